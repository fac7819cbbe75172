//! Referring-segmentation metrics: P@K, overall/mean IoU, mAP over
//! IoU thresholds 0.50:0.05:0.95, region similarity J and boundary F.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::BinaryMask;

pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub prediction: BinaryMask,
    pub gt: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub frames: Vec<EvalFrame>,
    pub confidence: f64,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, frames: Vec<(BinaryMask, BinaryMask)>, confidence: f64) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::invalid(format!("record {id} has no frames")));
        }
        if !confidence.is_finite() {
            return Err(Error::invalid(format!("record {id} has non-finite confidence")));
        }
        let frames = frames
            .into_iter()
            .map(|(prediction, gt)| {
                if prediction.shape() != gt.shape() {
                    return Err(Error::shape("eval record prediction vs gt", gt.shape(), prediction.shape()));
                }
                Ok(EvalFrame { prediction, gt })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            frames,
            confidence,
        })
    }

    /// Σ intersection / Σ union over this record's frames; 1 when both are empty everywhere.
    pub fn iou(&self) -> f64 {
        let (i, u) = self.frames.iter().fold((0usize, 0usize), |(i, u), f| {
            let (fi, fu) = frame_counts(f);
            (i + fi, u + fu)
        });
        ratio_or_one(i, u)
    }
}

fn frame_counts(f: &EvalFrame) -> (usize, usize) {
    let i = f.prediction.intersection(&f.gt).expect("shapes checked");
    let u = f.prediction.union(&f.gt).expect("shapes checked");
    (i, u)
}

fn ratio_or_one(i: usize, u: usize) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn non_empty<T>(records: &[T]) -> Result<()> {
    if records.is_empty() {
        Err(Error::invalid("metrics need at least one record"))
    } else {
        Ok(())
    }
}

/// Fraction of records whose IoU is strictly greater than each K.
pub fn precision_at_k(records: &[EvalRecord]) -> Result<Vec<(f64, f64)>> {
    non_empty(records)?;
    let ious: Vec<f64> = records.iter().map(EvalRecord::iou).collect();
    Ok(precision_from_ious(&ious))
}

pub fn precision_from_ious(ious: &[f64]) -> Vec<(f64, f64)> {
    PRECISION_THRESHOLDS
        .iter()
        .map(|&k| {
            let hits = ious.iter().filter(|&&v| v > k).count();
            (k, hits as f64 / ious.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanIouMode {
    /// Average over every annotated frame of every sample.
    #[default]
    PerFrame,
    /// Average of per-sample pooled IoUs.
    PerSample,
}

pub fn overall_and_mean_iou(records: &[EvalRecord], mode: MeanIouMode) -> Result<(f64, f64)> {
    non_empty(records)?;
    let mut total_i = 0usize;
    let mut total_u = 0usize;
    let mut frame_ious = Vec::new();
    for r in records {
        for f in &r.frames {
            let (i, u) = frame_counts(f);
            total_i += i;
            total_u += u;
            frame_ious.push(ratio_or_one(i, u));
        }
    }
    let overall = ratio_or_one(total_i, total_u);
    let mean = match mode {
        MeanIouMode::PerFrame => mean(&frame_ious),
        MeanIouMode::PerSample => mean(&records.iter().map(EvalRecord::iou).collect::<Vec<_>>()),
    };
    Ok((overall, mean))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub iou: f64,
    pub confidence: f64,
}

/// Ranking by confidence descending; equal confidences fall back to id order.
fn ranked(samples: &[ScoredSample]) -> Vec<&ScoredSample> {
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.id.cmp(&b.id))
    });
    order
}

/// All-point interpolated AP with one ground-truth instance per sample.
pub fn average_precision(samples: &[ScoredSample], theta: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let order = ranked(samples);
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(n);
    for (rank, s) in order.iter().enumerate() {
        if s.iou >= theta {
            tp += 1;
        }
        points.push((tp as f64 / n as f64, tp as f64 / (rank + 1) as f64));
    }
    // running max from the right gives the interpolated precision
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn mean_ap_scores(samples: &[ScoredSample]) -> Result<f64> {
    non_empty(samples)?;
    let aps: Vec<f64> = ap_thresholds()
        .iter()
        .map(|&t| average_precision(samples, t))
        .collect();
    Ok(mean(&aps))
}

pub fn scored(records: &[EvalRecord]) -> Vec<ScoredSample> {
    records
        .iter()
        .map(|r| ScoredSample {
            id: r.id.clone(),
            iou: r.iou(),
            confidence: r.confidence,
        })
        .collect()
}

pub fn mean_ap(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    mean_ap_scores(&scored(records))
}

/// Foreground pixels with at least one 4-neighbour in the background; the
/// outside of the image counts as background.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        x == 0 || y == 0 || x + 1 == w || y + 1 == h
            || !mask.get(x - 1, y)
            || !mask.get(x + 1, y)
            || !mask.get(x, y - 1)
            || !mask.get(x, y + 1)
    })
    .expect("same shape")
}

/// Euclidean disk dilation.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.shape();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    BinaryMask::from_fn(h, w, |x, y| {
        offsets.iter().any(|&(dx, dy)| {
            let (sx, sy) = (x as isize + dx, y as isize + dy);
            sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h && mask.get(sx as usize, sy as usize)
        })
    })
    .expect("same shape")
}

pub fn boundary_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.008 * diag).ceil() as usize).max(1)
}

pub fn boundary_f(prediction: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if prediction.shape() != gt.shape() {
        return Err(Error::shape("boundary_f", gt.shape(), prediction.shape()));
    }
    let (h, w) = gt.shape();
    let r = boundary_tolerance(h, w);
    let pb = boundary(prediction);
    let gb = boundary(gt);
    let (np, ng) = (pb.count(), gb.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let precision = pb.intersection(&dilate(&gb, r))? as f64 / np as f64;
    let recall = gb.intersection(&dilate(&pb, r))? as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn j_and_f(records: &[EvalRecord]) -> Result<(f64, f64)> {
    non_empty(records)?;
    let mut js = Vec::new();
    let mut fs = Vec::new();
    for r in records {
        for f in &r.frames {
            let (i, u) = frame_counts(f);
            js.push(ratio_or_one(i, u));
            fs.push(boundary_f(&f.prediction, &f.gt)?);
        }
    }
    Ok((mean(&js), mean(&fs)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub precision_at: Vec<(f64, f64)>,
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub map: f64,
    pub j_mean: f64,
    pub f_mean: f64,
}

impl MetricReport {
    pub fn compute(records: &[EvalRecord], mode: MeanIouMode) -> Result<Self> {
        let precision_at = precision_at_k(records)?;
        let (overall_iou, mean_iou) = overall_and_mean_iou(records, mode)?;
        let (j_mean, f_mean) = j_and_f(records)?;
        Ok(Self {
            precision_at,
            overall_iou,
            mean_iou,
            map: mean_ap(records)?,
            j_mean,
            f_mean,
        })
    }

    /// JSON with fixed six-digit decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n  \"precision_at\": {");
        for (i, (k, v)) in self.precision_at.iter().enumerate() {
            let sep = if i == 0 { "" } else { "," };
            let _ = write!(s, "{sep}\n    \"{k:.1}\": {v:.6}");
        }
        s.push_str("\n  },\n");
        let fields = [
            ("overall_iou", self.overall_iou),
            ("mean_iou", self.mean_iou),
            ("map", self.map),
            ("j_mean", self.j_mean),
            ("f_mean", self.f_mean),
        ];
        for (i, (name, v)) in fields.iter().enumerate() {
            let sep = if i + 1 == fields.len() { "" } else { "," };
            let _ = writeln!(s, "  \"{name}\": {v:.6}{sep}");
        }
        s.push_str("}\n");
        s
    }
}
