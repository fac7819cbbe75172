//! Central finite-difference checks of every analytic gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureMap, FlowField, ProbMask, RgbImage};
use crate::losses::{cls_loss, dice_loss, focal_loss, lsi_loss, LossWeights};
use crate::matching::GroundTruthSequence;
use crate::model::{backward, forward, OutputGrads, ToyConfig, ToyParams};
use crate::rng::stream_rng;
use crate::synth::{long_expression, short_expression, Color, Instance, Motion, Shape};
use crate::text::{pos_tag, tokenize, TextExpression};
use crate::train::{objective, objective_grads, ObjectiveInput};
use crate::warp::{fbc_loss, ConsistencyMode, NeighborFlows};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub worst_rel_err: f64,
    /// Location of the worst comparison, e.g. `conv1.weight[3]`.
    pub worst_at: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn worst(&self) -> &SuiteResult {
        self.suites
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
            .expect("at least one suite")
    }
}

struct Tracker {
    suite: &'static str,
    instances: usize,
    checked: usize,
    worst: f64,
    worst_at: String,
}

impl Tracker {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            instances: 0,
            checked: 0,
            worst: 0.0,
            worst_at: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        // NaN compares false, so route it explicitly
        if e > self.worst || e.is_nan() {
            self.worst = if e.is_nan() { f64::INFINITY } else { e };
            self.worst_at = at();
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            suite: self.suite,
            instances: self.instances,
            checked: self.checked,
            worst_rel_err: self.worst,
            worst_at: self.worst_at,
        }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
fn central(x: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let x0 = x[i];
    x[i] = x0 + FD_STEP;
    let plus = f(x)?;
    x[i] = x0 - FD_STEP;
    let minus = f(x)?;
    x[i] = x0;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

/// Probability away from the clamp and from the threshold kink.
fn prob(rng: &mut ChaCha8Rng, tau: f64) -> f64 {
    loop {
        let v: f64 = rng.gen_range(0.02..0.98);
        if (v - tau).abs() > 1e-3 {
            return v;
        }
    }
}

fn binary(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.5)).collect()).expect("sized")
}

fn masks_from(flat: &[f64], t: usize, h: usize, w: usize) -> Result<Vec<ProbMask>> {
    (0..t)
        .map(|i| ProbMask::new(h, w, flat[i * h * w..(i + 1) * h * w].to_vec()))
        .collect()
}

fn check_lsi(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut tr = Tracker::new("lsi");
    let w = LossWeights::default();
    for n in 0..instances {
        let mut rng = stream_rng(seed, 100 + n as u64);
        let (t, h, wd) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let len = t * h * wd;
        let mut long: Vec<f64> = (0..len).map(|_| prob(&mut rng, w.tau)).collect();
        let mut short: Vec<f64> = (0..len).map(|_| prob(&mut rng, w.tau)).collect();
        let out = lsi_loss(&masks_from(&long, t, h, wd)?, &masks_from(&short, t, h, wd)?, &w)?;
        let s_masks = masks_from(&short, t, h, wd)?;
        for i in 0..len {
            let num = central(&mut long, i, |x| Ok(lsi_loss(&masks_from(x, t, h, wd)?, &s_masks, &w)?.loss))?;
            tr.record(out.grad_long[i / (h * wd)][i % (h * wd)], num, || format!("long[{i}]"));
        }
        let l_masks = masks_from(&long, t, h, wd)?;
        for i in 0..len {
            let num = central(&mut short, i, |x| Ok(lsi_loss(&l_masks, &masks_from(x, t, h, wd)?, &w)?.loss))?;
            tr.record(out.grad_short[i / (h * wd)][i % (h * wd)], num, || format!("short[{i}]"));
        }
        tr.instances += 1;
    }
    Ok(tr.finish())
}

fn check_mask_loss(
    seed: u64,
    instances: usize,
    suite: &'static str,
    stream: u64,
    f: impl Fn(&ProbMask, &BinaryMask) -> Result<crate::losses::MaskLoss>,
) -> Result<SuiteResult> {
    let mut tr = Tracker::new(suite);
    for n in 0..instances {
        let mut rng = stream_rng(seed, stream + n as u64);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let mut m: Vec<f64> = (0..h * w).map(|_| prob(&mut rng, -1.0)).collect();
        let g = binary(&mut rng, h, w);
        let out = f(&ProbMask::new(h, w, m.clone())?, &g)?;
        for i in 0..h * w {
            let num = central(&mut m, i, |x| Ok(f(&ProbMask::new(h, w, x.to_vec())?, &g)?.value))?;
            tr.record(out.grad[i], num, || format!("m[{i}]"));
        }
        tr.instances += 1;
    }
    Ok(tr.finish())
}

fn check_cls(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut tr = Tracker::new("cls");
    for n in 0..instances {
        let mut rng = stream_rng(seed, 400 + n as u64);
        let t = rng.gen_range(1..=6);
        let mut p: Vec<f64> = (0..t).map(|_| prob(&mut rng, -1.0)).collect();
        let gt: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.5)).collect();
        let out = cls_loss(&p, &gt)?;
        for i in 0..t {
            let num = central(&mut p, i, |x| Ok(cls_loss(x, &gt)?.value))?;
            tr.record(out.grad[i], num, || format!("p[{i}]"));
        }
        tr.instances += 1;
    }
    Ok(tr.finish())
}

fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, mag: f64) -> Result<FlowField> {
    let n = h * w;
    FlowField::new(
        h,
        w,
        (0..n).map(|_| rng.gen_range(-mag..mag)).collect(),
        (0..n).map(|_| rng.gen_range(-mag..mag)).collect(),
    )
}

fn random_neighbor_flows(rng: &mut ChaCha8Rng, frames: usize, k: usize, h: usize, w: usize) -> Result<NeighborFlows> {
    let mut nf = NeighborFlows::default();
    for t in crate::flow::neighbour_offsets(k, frames, 2) {
        nf.forward.push((t, random_flow(rng, h, w, 1.5)?));
        nf.opposite.push((t, random_flow(rng, h, w, 1.5)?));
    }
    Ok(nf)
}

const MODES: [ConsistencyMode; 3] = [
    ConsistencyMode::ForwardBackward,
    ConsistencyMode::Opposite,
    ConsistencyMode::Mutual,
];

fn check_fbc(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut tr = Tracker::new("fbc");
    for n in 0..instances {
        let mut rng = stream_rng(seed, 500 + n as u64);
        let frames = rng.gen_range(2..=5);
        let k = rng.gen_range(0..frames);
        let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(2..=4));
        let mode = MODES[n % 3];
        let normalize = rng.gen_bool(0.5);
        let flows = random_neighbor_flows(&mut rng, frames, k, h, w)?;
        let size = c * h * w;
        let mut flat: Vec<f64> = (0..frames * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |x: &[f64]| -> Result<Vec<FeatureMap>> {
            (0..frames)
                .map(|t| FeatureMap::new(c, h, w, x[t * size..(t + 1) * size].to_vec()))
                .collect()
        };
        let out = fbc_loss(&build(&flat)?, k, &flows, mode, normalize)?;
        for i in 0..flat.len() {
            let num = central(&mut flat, i, |x| Ok(fbc_loss(&build(x)?, k, &flows, mode, normalize)?.loss))?;
            tr.record(out.grads[i / size].values()[i % size], num, || format!("f[{i}] ({mode:?})"));
        }
        tr.instances += 1;
    }
    Ok(tr.finish())
}

/// Configuration of the small model used by the end-to-end checks.
pub fn gradcheck_config(seed: u64) -> ToyConfig {
    ToyConfig {
        num_queries: 2,
        hidden_dim: 6,
        feature_channels: 4,
        feature_stride: 2,
        seed,
        ..ToyConfig::default()
    }
}

fn random_expressions(rng: &mut ChaCha8Rng) -> Result<(TextExpression, TextExpression)> {
    let inst = Instance {
        shape: Shape::ALL[rng.gen_range(0..3)],
        color: Color::ALL[rng.gen_range(0..6)],
        size: 1,
        start: (0, 0),
        velocity: (0, 0),
        motion: Motion::ALL[rng.gen_range(0..5)],
    };
    // an occasional unknown word exercises the out-of-vocabulary row
    let mut long = long_expression(&inst);
    if rng.gen_bool(0.3) {
        long = long.replacen("a ", "a shiny ", 1);
    }
    Ok((pos_tag(&tokenize(&long))?, pos_tag(&tokenize(&short_expression(&inst)))?))
}

fn random_frames(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Result<Vec<RgbImage>> {
    (0..n)
        .map(|_| RgbImage::new(h, w, (0..h * w).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()))
        .collect()
}

fn corrupt_grads(grads: &mut ToyParams, corrupt: Option<&str>) -> Result<()> {
    if let Some(name) = corrupt {
        let t = grads
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name:?}")))?;
        t.data[0] += 0.5 * t.data[0].abs() + 1e-2;
    }
    Ok(())
}

fn sweep(
    tr: &mut Tracker,
    params: &ToyParams,
    analytic: &ToyParams,
    mut f: impl FnMut(&ToyParams) -> Result<f64>,
) -> Result<()> {
    let mut p = params.clone();
    for slot in 0..p.tensors.len() {
        for i in 0..p.tensors[slot].data.len() {
            let x0 = p.tensors[slot].data[i];
            p.tensor_mut(slot).data[i] = x0 + FD_STEP;
            let plus = f(&p)?;
            p.tensor_mut(slot).data[i] = x0 - FD_STEP;
            let minus = f(&p)?;
            p.tensor_mut(slot).data[i] = x0;
            let num = (plus - minus) / (2.0 * FD_STEP);
            let name = p.tensors[slot].name;
            tr.record(analytic.tensors[slot].data[i], num, || format!("{name}[{i}]"));
        }
    }
    Ok(())
}

/// Backward pass against a random linear functional of every model output.
fn check_model(seed: u64, instances: usize, corrupt: Option<&str>) -> Result<SuiteResult> {
    let mut tr = Tracker::new("model");
    for n in 0..instances {
        let mut rng = stream_rng(seed, 600 + n as u64);
        let cfg = gradcheck_config(seed.wrapping_add(n as u64));
        let params = ToyParams::init(&cfg)?;
        let frames = random_frames(&mut rng, 1, 8, 8)?;
        let (long, short) = random_expressions(&mut rng)?;
        let out = forward(&params, &cfg, &frames, &long, Some(&short))?;
        let mut r = OutputGrads::zeros(&out.cache);
        let mut fill = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        r.scores.iter_mut().for_each(&mut fill);
        r.long.iter_mut().flatten().for_each(&mut fill);
        r.short.iter_mut().flatten().flatten().for_each(&mut fill);
        r.features.iter_mut().for_each(&mut fill);
        let mut analytic = backward(&params, &cfg, &out.cache, &r)?;
        corrupt_grads(&mut analytic, corrupt)?;
        let functional = |p: &ToyParams| -> Result<f64> {
            let o = forward(p, &cfg, &frames, &long, Some(&short))?;
            let mut s = 0.0;
            for (i, y) in o.predictions.iter().enumerate() {
                for t in 0..y.frames() {
                    s += r.scores[i][t] * y.scores[t];
                    s += dot(&r.long[i][t], y.long[t].values());
                    let short = y.short.as_ref().expect("short requested");
                    s += dot(&r.short.as_ref().expect("short grads")[i][t], short[t].values());
                }
            }
            for (rf, f) in r.features.iter().zip(&o.features) {
                s += dot(rf, f.values());
            }
            Ok(s)
        };
        sweep(&mut tr, &params, &analytic, functional)?;
        tr.instances += 1;
    }
    Ok(tr.finish())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The training objective end to end, including the consistency path.
/// Instances where a perturbation could cross the mask threshold or flip
/// the matched query are redrawn.
fn check_objective(seed: u64, instances: usize, corrupt: Option<&str>) -> Result<SuiteResult> {
    let mut tr = Tracker::new("objective");
    let weights = LossWeights {
        lambda_fbc: 0.5,
        ..LossWeights::default()
    };
    let mut stream = 700u64;
    while tr.instances < instances {
        stream += 1;
        if stream > 700 + 50 * instances as u64 {
            return Err(Error::invalid("could not draw well-separated objective instances"));
        }
        let mut rng = stream_rng(seed, stream);
        let cfg = gradcheck_config(seed.wrapping_add(stream));
        let params = ToyParams::init(&cfg)?;
        let frames_n = 3;
        let frames = random_frames(&mut rng, frames_n, 8, 8)?;
        let (long, short) = random_expressions(&mut rng)?;
        let use_short = rng.gen_bool(0.8);
        let gt_frames: Vec<Option<BinaryMask>> = (0..frames_n)
            .map(|_| rng.gen_bool(0.8).then(|| binary(&mut rng, 8, 8)))
            .collect();
        let gt = GroundTruthSequence::new(gt_frames)?;
        let k = 1;
        let flows = random_neighbor_flows(&mut rng, frames_n, k, 4, 4)?;
        let mode = MODES[tr.instances % 3];
        let normalize = rng.gen_bool(0.5);
        let input = ObjectiveInput {
            frames: &frames,
            gt: &gt,
            long: &long,
            short: use_short.then_some(&short),
            fbc: Some((k, &flows)),
        };
        let out = objective(&params, &cfg, &input, &weights, mode, normalize)?;
        let near_tau = out.forward.predictions.iter().any(|y| {
            y.long
                .iter()
                .chain(y.short.iter().flatten())
                .any(|m| m.values().iter().any(|v| (v - weights.tau).abs() < 1e-5))
        });
        if near_tau || out.margin < 1e-5 {
            continue;
        }
        let mut analytic = objective_grads(&params, &cfg, &out)?;
        corrupt_grads(&mut analytic, corrupt)?;
        sweep(&mut tr, &params, &analytic, |p| {
            Ok(objective(p, &cfg, &input, &weights, mode, normalize)?.loss.total)
        })?;
        tr.instances += 1;
    }
    Ok(tr.finish())
}

/// Runs every suite with `instances` random instances each. `corrupt`
/// names a model parameter whose analytic gradient is deliberately broken.
pub fn run(seed: u64, instances: usize, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let w = LossWeights::default();
    let suites = vec![
        check_lsi(seed, instances)?,
        check_mask_loss(seed, instances, "dice", 200, |m, g| dice_loss(m, g, w.dice_smooth))?,
        check_mask_loss(seed, instances, "focal", 300, |m, g| {
            focal_loss(m, g, w.focal_alpha, w.focal_gamma)
        })?,
        check_cls(seed, instances)?,
        check_fbc(seed, instances)?,
        check_model(seed, instances, corrupt)?,
        check_objective(seed, instances, corrupt)?,
    ];
    Ok(GradcheckReport { suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-6).abs() < 1e-18);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn corruption_is_detected_and_named() {
        let rep = run(1, 1, Some("kernel.bias")).unwrap();
        assert!(!rep.passed());
        assert!(rep.worst().worst_at.starts_with("kernel.bias"), "{:?}", rep.worst());
    }
}
