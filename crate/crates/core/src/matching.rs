//! Query matching against the referred instance, the training objective,
//! and the inference-time query choice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ProbMask};
use crate::losses::{cls_loss, lsi_loss, seg_loss, LossWeights};

/// Outputs of one object query over `T` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySequencePrediction {
    pub query_index: usize,
    /// Reference score `p_{i,t}` per frame.
    pub scores: Vec<f64>,
    /// Masks predicted from the long expression.
    pub long: Vec<ProbMask>,
    /// Masks predicted from the short expression, when it is used.
    pub short: Option<Vec<ProbMask>>,
}

impl QuerySequencePrediction {
    pub fn frames(&self) -> usize {
        self.scores.len()
    }

    fn validate(&self) -> Result<()> {
        let t = self.scores.len();
        if t == 0 {
            return Err(Error::invalid("prediction has no frames"));
        }
        if self.long.len() != t {
            return Err(Error::shape("prediction long masks", t, self.long.len()));
        }
        if let Some(short) = &self.short {
            if short.len() != t {
                return Err(Error::shape("prediction short masks", t, short.len()));
            }
        }
        let shape = self.long[0].shape();
        let all = self.long.iter().chain(self.short.iter().flatten());
        if let Some(m) = all.into_iter().find(|m| m.shape() != shape) {
            return Err(Error::shape("prediction mask shape", shape, m.shape()));
        }
        Ok(())
    }
}

/// Per-frame visibility and mask of the referred instance. A mask is
/// present exactly when the instance is visible.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSequence {
    frames: Vec<Option<BinaryMask>>,
}

impl GroundTruthSequence {
    pub fn new(frames: Vec<Option<BinaryMask>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("ground truth has no frames"));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Option<BinaryMask>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.frames.iter().map(Option::is_some).collect()
    }

    /// Masks resized (nearest neighbour) to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|m| match m {
                Some(m) if m.shape() != (height, width) => m.resize_nearest(height, width).map(Some),
                other => Ok(other.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(Self { frames })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub query: usize,
    pub cls: f64,
    pub lseg: f64,
    pub sseg: f64,
    pub lsi: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub selected_index: usize,
    pub costs: Vec<CostBreakdown>,
}

/// Unweighted component values plus gradients of the weighted total.
struct Components {
    cls: f64,
    lseg: f64,
    sseg: f64,
    lsi: f64,
    grad_scores: Vec<f64>,
    grad_long: Vec<Vec<f64>>,
    grad_short: Option<Vec<Vec<f64>>>,
}

fn axpy(acc: &mut [f64], k: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, v)| *a += k * v);
}

fn components(
    y: &QuerySequencePrediction,
    gt: &GroundTruthSequence,
    w: &LossWeights,
) -> Result<Components> {
    y.validate()?;
    if gt.len() != y.frames() {
        return Err(Error::shape("matching frames", gt.len(), y.frames()));
    }
    let (h, wd) = y.long[0].shape();
    let gt = gt.resized(h, wd)?;
    let npix = h * wd;
    let frames = y.frames();

    let cls = cls_loss(&y.scores, &gt.visibility())?;
    let grad_scores = cls.grad.iter().map(|g| w.lambda_cls * g).collect();

    let mut lseg = 0.0;
    let mut sseg = 0.0;
    let mut grad_long = vec![vec![0.0; npix]; frames];
    let mut grad_short = y.short.as_ref().map(|_| vec![vec![0.0; npix]; frames]);
    // frames without a visible instance carry no mask terms
    for (t, g) in gt.frames().iter().enumerate() {
        let Some(g) = g else { continue };
        let l = seg_loss(&y.long[t], g, w)?;
        lseg += l.value;
        axpy(&mut grad_long[t], w.lambda_seg, &l.grad);
        if let (Some(short), Some(gs)) = (&y.short, grad_short.as_mut()) {
            let s = seg_loss(&short[t], g, w)?;
            sseg += s.value;
            axpy(&mut gs[t], w.lambda_seg, &s.grad);
        }
    }

    let mut lsi = 0.0;
    if let (Some(short), Some(gs)) = (&y.short, grad_short.as_mut()) {
        let out = lsi_loss(&y.long, short, w)?;
        lsi = out.loss;
        for t in 0..frames {
            axpy(&mut grad_long[t], w.lambda_lsi, &out.grad_long[t]);
            axpy(&mut gs[t], w.lambda_lsi, &out.grad_short[t]);
        }
    }

    Ok(Components {
        cls: cls.value,
        lseg,
        sseg,
        lsi,
        grad_scores,
        grad_long,
        grad_short,
    })
}

/// `lambda_cls * cls + lambda_seg * (lseg + sseg) + lambda_lsi * lsi`.
pub fn matching_cost(
    y: &QuerySequencePrediction,
    gt: &GroundTruthSequence,
    w: &LossWeights,
) -> Result<CostBreakdown> {
    let c = components(y, gt, w)?;
    Ok(CostBreakdown {
        query: y.query_index,
        cls: c.cls,
        lseg: c.lseg,
        sseg: c.sseg,
        lsi: c.lsi,
        total: weighted_total(&c, w),
    })
}

fn weighted_total(c: &Components, w: &LossWeights) -> f64 {
    w.lambda_cls * c.cls + w.lambda_seg * c.lseg + w.lambda_seg * c.sseg + w.lambda_lsi * c.lsi
}

/// Argmin of the matching cost; ties go to the lowest query index.
pub fn select_best(
    y_all: &[QuerySequencePrediction],
    gt: &GroundTruthSequence,
    w: &LossWeights,
) -> Result<MatchResult> {
    if y_all.is_empty() {
        return Err(Error::invalid("no query predictions to match"));
    }
    let costs = y_all
        .iter()
        .map(|y| matching_cost(y, gt, w))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, c) in costs.iter().enumerate().skip(1) {
        if c.total < costs[best].total {
            best = i;
        }
    }
    Ok(MatchResult {
        selected_index: best,
        costs,
    })
}

/// Training objective value with gradients for the selected query.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLoss {
    pub cls: f64,
    pub lseg: f64,
    pub sseg: f64,
    pub lsi: f64,
    pub fbc: f64,
    pub total: f64,
    pub grad_scores: Vec<f64>,
    pub grad_long: Vec<Vec<f64>>,
    pub grad_short: Option<Vec<Vec<f64>>>,
    /// Factor to apply to the consistency loss's feature gradients.
    pub fbc_weight: f64,
}

/// Matching cost of `y_star` plus `lambda_fbc` times the summed
/// consistency terms.
pub fn final_loss(
    y_star: &QuerySequencePrediction,
    gt: &GroundTruthSequence,
    fbc_terms: &[f64],
    w: &LossWeights,
) -> Result<FinalLoss> {
    let c = components(y_star, gt, w)?;
    let fbc = fbc_terms.iter().fold(0.0, |a, b| a + b);
    let total = weighted_total(&c, w) + w.lambda_fbc * fbc;
    Ok(FinalLoss {
        cls: c.cls,
        lseg: c.lseg,
        sseg: c.sseg,
        lsi: c.lsi,
        fbc,
        total,
        grad_scores: c.grad_scores,
        grad_long: c.grad_long,
        grad_short: c.grad_short,
        fbc_weight: w.lambda_fbc,
    })
}

/// Picks the query with the highest mean reference score; ties go to the
/// lowest index. Returns the index and its long-expression masks.
pub fn select_inference(y_all: &[QuerySequencePrediction]) -> Result<(usize, Vec<ProbMask>)> {
    if y_all.is_empty() {
        return Err(Error::invalid("no query predictions to choose from"));
    }
    let mean = |y: &QuerySequencePrediction| y.scores.iter().sum::<f64>() / y.scores.len() as f64;
    let mut best = 0;
    let mut best_score = mean(&y_all[0]);
    for (i, y) in y_all.iter().enumerate().skip(1) {
        let s = mean(y);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok((best, y_all[best].long.clone()))
}
