//! Training objective, SGD loop, ablation switches and inference.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{clip_flows, clip_flows_opposite, FlowParams};
use crate::grid::{BinaryMask, ProbMask, RgbImage};
use crate::losses::LossWeights;
use crate::matching::{final_loss, select_best, select_inference, FinalLoss, GroundTruthSequence};
use crate::metrics::{EvalRecord, MeanIouMode, MetricReport};
use crate::model::{backward, forward, ForwardOutput, OutputGrads, ToyConfig, ToyParams};
use crate::rng::named_rng;
use crate::synth::Sample;
use crate::text::TextExpression;
use crate::warp::{fbc_loss, ConsistencyMode, FbcOutput, NeighborFlows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    Full,
    NoShort,
    NoLsi,
    NoFbc,
    Ofbc,
    Mfbc,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoShort,
        Ablation::NoLsi,
        Ablation::NoFbc,
        Ablation::Ofbc,
        Ablation::Mfbc,
    ];

    pub fn use_short(self) -> bool {
        self != Ablation::NoShort
    }

    pub fn mode(self) -> ConsistencyMode {
        match self {
            Ablation::Ofbc => ConsistencyMode::Opposite,
            Ablation::Mfbc => ConsistencyMode::Mutual,
            _ => ConsistencyMode::ForwardBackward,
        }
    }

    /// Loss weights with the disabled terms zeroed.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Ablation::NoShort | Ablation::NoLsi => LossWeights {
                lambda_lsi: 0.0,
                ..base
            },
            Ablation::NoFbc => LossWeights {
                lambda_fbc: 0.0,
                ..base
            },
            _ => base,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoShort => "no-short",
            Ablation::NoLsi => "no-lsi",
            Ablation::NoFbc => "no-fbc",
            Ablation::Ofbc => "ofbc",
            Ablation::Mfbc => "mfbc",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown ablation {s:?}; expected one of full, no-short, no-lsi, no-fbc, ofbc, mfbc"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub flow: FlowParams,
    /// Neighbours on each side of the anchor frame used by the consistency loss.
    pub flow_radius: usize,
    pub fbc_normalize: bool,
    /// Validation period in steps; 0 disables periodic validation.
    pub eval_every: usize,
    /// Samples per step; their gradients are summed.
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ablation: Ablation::Full,
            flow: FlowParams::default(),
            flow_radius: 2,
            fbc_normalize: false,
            eval_every: 0,
            batch_size: 1,
        }
    }
}

impl TrainOptions {
    fn effective_weights(&self) -> LossWeights {
        self.ablation.weights(self.weights)
    }

    fn uses_fbc(&self) -> bool {
        self.effective_weights().lambda_fbc != 0.0
    }
}

/// Full-resolution flows around each annotated frame of one sample.
pub type SampleFlows = Vec<(usize, NeighborFlows)>;

pub fn compute_flows(sample: &Sample, params: &FlowParams, radius: usize, with_opposite: bool) -> Result<SampleFlows> {
    sample
        .clip
        .annotated()
        .iter()
        .map(|&k| {
            let forward = clip_flows(&sample.clip, k, radius, params)?;
            let opposite = if with_opposite {
                clip_flows_opposite(&sample.clip, k, radius, params)?
            } else {
                Vec::new()
            };
            Ok((k, NeighborFlows { forward, opposite }))
        })
        .collect()
}

pub fn compute_corpus_flows(
    corpus: &[Sample],
    params: &FlowParams,
    radius: usize,
    with_opposite: bool,
) -> Result<Vec<SampleFlows>> {
    corpus
        .iter()
        .map(|s| compute_flows(s, params, radius, with_opposite))
        .collect()
}

/// `w` consecutive frames containing `k`, as centred as the clip allows.
pub fn window(len: usize, k: usize, w: usize) -> Range<usize> {
    if w >= len {
        return 0..len;
    }
    let start = k.saturating_sub(w / 2).min(len - w);
    start..start + w
}

/// Inputs of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInput<'a> {
    pub frames: &'a [RgbImage],
    pub gt: &'a GroundTruthSequence,
    pub long: &'a TextExpression,
    pub short: Option<&'a TextExpression>,
    /// Anchor index within `frames` and flows at feature resolution.
    pub fbc: Option<(usize, &'a NeighborFlows)>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: FinalLoss,
    pub selected: usize,
    /// Gap between the two lowest matching costs.
    pub margin: f64,
    pub forward: ForwardOutput,
    pub fbc: Option<FbcOutput>,
}

pub fn objective(
    params: &ToyParams,
    cfg: &ToyConfig,
    input: &ObjectiveInput<'_>,
    weights: &LossWeights,
    mode: ConsistencyMode,
    normalize: bool,
) -> Result<ObjectiveOutput> {
    let fwd = forward(params, cfg, input.frames, input.long, input.short)?;
    let matched = select_best(&fwd.predictions, input.gt, weights)?;
    let selected = matched.selected_index;
    let best = matched.costs[selected].total;
    let margin = matched
        .costs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != selected)
        .map(|(_, c)| c.total - best)
        .fold(f64::INFINITY, f64::min);
    let fbc = match input.fbc {
        Some((k, flows)) if weights.lambda_fbc != 0.0 => {
            Some(fbc_loss(&fwd.features, k, flows, mode, normalize)?)
        }
        _ => None,
    };
    let terms: Vec<f64> = fbc.iter().map(|o| o.loss).collect();
    let loss = final_loss(&fwd.predictions[selected], input.gt, &terms, weights)?;
    Ok(ObjectiveOutput {
        loss,
        selected,
        margin,
        forward: fwd,
        fbc,
    })
}

/// Output gradients of the objective, ready for `backward`.
pub fn objective_output_grads(out: &ObjectiveOutput) -> OutputGrads {
    let cache = &out.forward.cache;
    let mut g = OutputGrads::zeros(cache);
    let i = out.selected;
    g.scores[i] = out.loss.grad_scores.clone();
    g.long[i] = out.loss.grad_long.clone();
    if let (Some(gs), Some(ls)) = (g.short.as_mut(), &out.loss.grad_short) {
        gs[i] = ls.clone();
    }
    if let Some(fbc) = &out.fbc {
        for (dst, src) in g.features.iter_mut().zip(&fbc.grads) {
            dst.iter_mut()
                .zip(src.values())
                .for_each(|(d, s)| *d += out.loss.fbc_weight * s);
        }
    }
    g
}

pub fn objective_grads(params: &ToyParams, cfg: &ToyConfig, out: &ObjectiveOutput) -> Result<ToyParams> {
    backward(params, cfg, &out.forward.cache, &objective_output_grads(out))
}

/// One row of the loss trace; components are already weighted so they sum to `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub lseg: f64,
    pub sseg: f64,
    pub lsi: f64,
    pub fbc: f64,
}

impl TraceRow {
    fn from_loss(step: usize, l: &FinalLoss, w: &LossWeights) -> Self {
        Self {
            step,
            total: l.total,
            cls: w.lambda_cls * l.cls,
            lseg: w.lambda_seg * l.lseg,
            sseg: w.lambda_seg * l.sseg,
            lsi: w.lambda_lsi * l.lsi,
            fbc: w.lambda_fbc * l.fbc,
        }
    }

    fn mean(step: usize, rows: &[TraceRow]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: fn(&TraceRow) -> f64| rows.iter().map(f).fold(0.0, |a, b| a + b) / n;
        Self {
            step,
            total: avg(|r| r.total),
            cls: avg(|r| r.cls),
            lseg: avg(|r| r.lseg),
            sseg: avg(|r| r.sseg),
            lsi: avg(|r| r.lsi),
            fbc: avg(|r| r.fbc),
        }
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,total,cls,lseg,sseg,lsi,fbc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.total, r.cls, r.lseg, r.sseg, r.lsi, r.fbc
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyParams,
    pub trace: Vec<TraceRow>,
    /// Mean objective over the corpus before the first step.
    pub initial_loss: f64,
    /// Mean objective over the corpus after the last step.
    pub final_loss: f64,
    /// `(step, mean IoU)` from periodic validation.
    pub validation: Vec<(usize, f64)>,
}

/// Everything needed to evaluate the objective on one sample window.
struct Prepared {
    range: Range<usize>,
    gt: GroundTruthSequence,
    flows: Option<(usize, NeighborFlows)>,
}

fn prepare(
    sample: &Sample,
    k: usize,
    cfg: &ToyConfig,
    flows: Option<&SampleFlows>,
) -> Result<Prepared> {
    let range = window(sample.clip.len(), k, cfg.clip_window);
    let (fh, fw) = cfg.feature_size(sample.clip.height(), sample.clip.width())?;
    let gt = GroundTruthSequence::new(sample.gt.frames()[range.clone()].to_vec())?.resized(fh, fw)?;
    let flows = match flows {
        None => None,
        Some(list) => {
            let (_, nf) = list
                .iter()
                .find(|(a, _)| *a == k)
                .ok_or_else(|| Error::invalid(format!("no flows for frame {k} of {}", sample.id)))?;
            let inside = |t: &isize| range.contains(&((k as isize + t) as usize));
            let keep = |l: &[(isize, crate::grid::FlowField)]| {
                l.iter().filter(|(t, _)| inside(t)).cloned().collect::<Vec<_>>()
            };
            let trimmed = NeighborFlows {
                forward: keep(&nf.forward),
                opposite: keep(&nf.opposite),
            };
            Some((k - range.start, trimmed.downscaled(fh, fw)?))
        }
    };
    Ok(Prepared { range, gt, flows })
}

fn run_objective(
    params: &ToyParams,
    cfg: &ToyConfig,
    sample: &Sample,
    prep: &Prepared,
    opts: &TrainOptions,
) -> Result<ObjectiveOutput> {
    let weights = opts.effective_weights();
    let input = ObjectiveInput {
        frames: &sample.clip.frames()[prep.range.clone()],
        gt: &prep.gt,
        long: &sample.expression.long,
        short: opts.ablation.use_short().then_some(&sample.expression.short),
        fbc: prep.flows.as_ref().map(|(k, f)| (*k, f)),
    };
    objective(params, cfg, &input, &weights, opts.ablation.mode(), opts.fbc_normalize)
}

fn corpus_flows(corpus: &[Sample], opts: &TrainOptions, flows: Option<&[SampleFlows]>) -> Result<Option<Vec<SampleFlows>>> {
    if !opts.uses_fbc() {
        return Ok(None);
    }
    let with_opposite = opts.ablation.mode() != ConsistencyMode::ForwardBackward;
    match flows {
        Some(f) if f.len() != corpus.len() => Err(Error::shape("precomputed flows", corpus.len(), f.len())),
        Some(f) if with_opposite && f.iter().flatten().any(|(_, n)| n.opposite.is_empty() && !n.forward.is_empty()) => {
            Err(Error::invalid("precomputed flows lack the opposite direction required by this mode"))
        }
        Some(f) => Ok(Some(f.to_vec())),
        None => Ok(Some(compute_corpus_flows(corpus, &opts.flow, opts.flow_radius, with_opposite)?)),
    }
}

/// Mean objective over the corpus, each sample evaluated at its first annotated frame.
pub fn corpus_loss(
    params: &ToyParams,
    cfg: &ToyConfig,
    corpus: &[Sample],
    opts: &TrainOptions,
    flows: Option<&[SampleFlows]>,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let flows = corpus_flows(corpus, opts, flows)?;
    mean_loss(params, cfg, corpus, opts, flows.as_deref())
}

fn mean_loss(
    params: &ToyParams,
    cfg: &ToyConfig,
    corpus: &[Sample],
    opts: &TrainOptions,
    flows: Option<&[SampleFlows]>,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in corpus.iter().enumerate() {
        let k = s.clip.annotated()[0];
        let prep = prepare(s, k, cfg, flows.map(|f| &f[i]))?;
        total += run_objective(params, cfg, s, &prep, opts)?.loss.total;
    }
    Ok(total / corpus.len() as f64)
}

/// Plain SGD over a seeded shuffle of the corpus; each step sums the
/// gradients of `batch_size` samples.
pub fn train(
    cfg: &ToyConfig,
    corpus: &[Sample],
    opts: &TrainOptions,
    flows: Option<&[SampleFlows]>,
    validation: Option<&[Sample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opts.weights.validate()?;
    opts.flow.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let flows = corpus_flows(corpus, opts, flows)?;
    let flows = flows.as_deref();
    let weights = opts.effective_weights();

    let mut params = ToyParams::init(cfg)?;
    let initial_loss = mean_loss(&params, cfg, corpus, opts, flows)?;
    let mut rng = named_rng(cfg.seed, "train.order");
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut val = Vec::new();

    for step in 0..cfg.steps {
        let mut grads = params.zeros_like();
        let mut rows = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled above");
            let sample = &corpus[i];
            let ann = sample.clip.annotated();
            let k = ann[rng.gen_range(0..ann.len())];
            let prep = prepare(sample, k, cfg, flows.map(|f| &f[i]))?;
            let out = run_objective(&params, cfg, sample, &prep, opts)?;
            if !out.loss.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: out.loss.total,
                });
            }
            rows.push(TraceRow::from_loss(step, &out.loss, &weights));
            grads.axpy(1.0, &objective_grads(&params, cfg, &out)?)?;
        }
        trace.push(TraceRow::mean(step, &rows));
        params.axpy(-cfg.learning_rate, &grads)?;
        if !params.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
        if let Some(v) = validation {
            if opts.eval_every > 0 && (step + 1) % opts.eval_every == 0 {
                val.push((step + 1, evaluate(&params, cfg, v, MeanIouMode::PerFrame)?.mean_iou));
            }
        }
    }
    let final_loss = mean_loss(&params, cfg, corpus, opts, flows)?;
    Ok(TrainOutcome {
        params,
        trace,
        initial_loss,
        final_loss,
        validation: val,
    })
}

/// Bilinear resize with half-pixel centres.
pub fn upsample(m: &ProbMask, height: usize, width: usize) -> Result<ProbMask> {
    let (h, w) = m.shape();
    let coord = |i: usize, src: usize, dst: usize| {
        let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, h, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, w, width);
            let top = m.get(x0, y0) * (1.0 - fx) + m.get(x1, y0) * fx;
            let bot = m.get(x0, y1) * (1.0 - fx) + m.get(x1, y1) * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    ProbMask::new(height, width, out)
}

/// Long-expression inference on the whole clip; masks at the annotated frames.
pub fn predict(params: &ToyParams, cfg: &ToyConfig, sample: &Sample) -> Result<EvalRecord> {
    let out = forward(params, cfg, sample.clip.frames(), &sample.expression.long, None)?;
    let (best, masks) = select_inference(&out.predictions)?;
    let scores = &out.predictions[best].scores;
    let confidence = scores.iter().sum::<f64>() / scores.len() as f64;
    let (h, w) = (sample.clip.height(), sample.clip.width());
    let frames = sample
        .clip
        .annotated()
        .iter()
        .map(|&k| {
            let pred = upsample(&masks[k], h, w)?.binarize(0.5);
            let gt = sample.gt.frames()[k]
                .clone()
                .map_or_else(|| BinaryMask::empty(h, w), Ok)?;
            Ok((pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalRecord::new(sample.id.clone(), frames, confidence)
}

pub fn eval_records(params: &ToyParams, cfg: &ToyConfig, corpus: &[Sample]) -> Result<Vec<EvalRecord>> {
    corpus.iter().map(|s| predict(params, cfg, s)).collect()
}

pub fn evaluate(params: &ToyParams, cfg: &ToyConfig, corpus: &[Sample], mode: MeanIouMode) -> Result<MetricReport> {
    MetricReport::compute(&eval_records(params, cfg, corpus)?, mode)
}

/// Ground truth echoed back as predictions.
pub fn oracle_records(corpus: &[Sample]) -> Result<Vec<EvalRecord>> {
    corpus
        .iter()
        .map(|s| {
            let (h, w) = (s.clip.height(), s.clip.width());
            let frames = s
                .clip
                .annotated()
                .iter()
                .map(|&k| {
                    let gt = s.gt.frames()[k]
                        .clone()
                        .map_or_else(|| BinaryMask::empty(h, w), Ok)?;
                    Ok((gt.clone(), gt))
                })
                .collect::<Result<Vec<_>>>()?;
            EvalRecord::new(s.id.clone(), frames, 1.0)
        })
        .collect()
}
