//! Scalar re-implementation of the matching cost on plain vectors.

use losh::grid::{BinaryMask, ProbMask};
use losh::{GroundTruthSequence, LossWeights, QuerySequencePrediction};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub h: usize,
    pub w: usize,
    // [query][frame][pixel]
    pub long: Vec<Vec<Vec<f64>>>,
    pub short: Option<Vec<Vec<Vec<f64>>>>,
    pub scores: Vec<Vec<f64>>,
    // [frame] -> pixels when visible
    pub gt: Vec<Option<Vec<bool>>>,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=8);
    let t = rng.gen_range(1..=4);
    let h = rng.gen_range(1..=8);
    let w = rng.gen_range(1..=8);
    let masks = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| (0..t).map(|_| (0..h * w).map(|_| rng.gen::<f64>()).collect()).collect())
            .collect()
    };
    let long = masks(rng);
    let short = if rng.gen_bool(0.7) { Some(masks(rng)) } else { None };
    let scores = (0..n).map(|_| (0..t).map(|_| rng.gen_range(0.01..0.99)).collect()).collect();
    let gt = (0..t)
        .map(|_| {
            if rng.gen_bool(0.8) {
                let density = rng.gen::<f64>();
                Some((0..h * w).map(|_| rng.gen_bool(density)).collect())
            } else {
                None
            }
        })
        .collect();
    Instance { h, w, long, short, scores, gt }
}

pub fn dice(m: &[f64], g: &[bool], s: f64) -> f64 {
    let mut num = s;
    let mut den = s;
    for i in 0..m.len() {
        let gv = g[i] as u8 as f64;
        num += 2.0 * m[i] * gv;
        den += m[i] + gv;
    }
    1.0 - num / den
}

pub fn focal(m: &[f64], g: &[bool], alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..m.len() {
        let p = m[i].clamp(1e-7, 1.0 - 1e-7);
        total += if g[i] {
            -alpha * (1.0 - p).powf(gamma) * p.ln()
        } else {
            -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
        };
    }
    total / m.len() as f64
}

pub fn lsi_term(a: &[f64], b: &[f64], tau: f64, eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut area = 0.0;
    for i in 0..a.len() {
        let x = if a[i] >= tau { a[i] } else { 0.0 };
        let y = if b[i] >= tau { b[i] } else { 0.0 };
        inter += x * y;
        area += x;
    }
    1.0 - (inter + eps) / (area + eps)
}

pub fn oracle_cost(inst: &Instance, q: usize, w: &LossWeights) -> f64 {
    let t = inst.gt.len();
    let mut cls = 0.0;
    for f in 0..t {
        let p = inst.scores[q][f];
        cls += if inst.gt[f].is_some() { -p.ln() } else { -(1.0 - p).ln() };
    }
    cls /= t as f64;
    let mut seg = 0.0;
    for f in 0..t {
        if let Some(g) = &inst.gt[f] {
            let m = &inst.long[q][f];
            seg += dice(m, g, w.dice_smooth) + focal(m, g, w.focal_alpha, w.focal_gamma);
            if let Some(short) = &inst.short {
                let m = &short[q][f];
                seg += dice(m, g, w.dice_smooth) + focal(m, g, w.focal_alpha, w.focal_gamma);
            }
        }
    }
    let mut lsi = 0.0;
    if let Some(short) = &inst.short {
        for f in 0..t {
            lsi += lsi_term(&inst.long[q][f], &short[q][f], w.tau, w.epsilon);
        }
    }
    w.lambda_cls * cls + w.lambda_seg * seg + w.lambda_lsi * lsi
}

pub fn oracle_select(inst: &Instance, w: &LossWeights) -> usize {
    let costs: Vec<f64> = (0..inst.long.len()).map(|q| oracle_cost(inst, q, w)).collect();
    let mut best = 0;
    for q in 1..costs.len() {
        if costs[q] < costs[best] {
            best = q;
        }
    }
    best
}

pub fn to_library(inst: &Instance) -> (Vec<QuerySequencePrediction>, GroundTruthSequence) {
    let pm = |v: &Vec<f64>| ProbMask::new(inst.h, inst.w, v.clone()).unwrap();
    let preds = (0..inst.long.len())
        .map(|q| QuerySequencePrediction {
            query_index: q,
            scores: inst.scores[q].clone(),
            long: inst.long[q].iter().map(pm).collect(),
            short: inst.short.as_ref().map(|s| s[q].iter().map(pm).collect()),
        })
        .collect();
    let gt = inst
        .gt
        .iter()
        .map(|g| g.as_ref().map(|v| BinaryMask::new(inst.h, inst.w, v.clone()).unwrap()))
        .collect();
    (preds, GroundTruthSequence::new(gt).unwrap())
}
