//! Scalar loss terms with analytic gradients with respect to the
//! predicted probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{same_shape, BinaryMask, ProbMask};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub lambda_lsi: f64,
    pub lambda_fbc: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_seg: 5.0,
            lambda_lsi: 5.0,
            lambda_fbc: 0.1,
            epsilon: 1.0,
            tau: 0.5,
            focal_alpha: 0.4,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_seg", self.lambda_seg),
            ("lambda_lsi", self.lambda_lsi),
            ("lambda_fbc", self.lambda_fbc),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
            ("dice_smooth", self.dice_smooth),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Multiplies the four objective weights by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda_cls: self.lambda_cls * c,
            lambda_seg: self.lambda_seg * c,
            lambda_lsi: self.lambda_lsi * c,
            lambda_fbc: self.lambda_fbc * c,
            ..*self
        }
    }
}

/// A loss value with its gradient over the mask pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsiOutput {
    pub loss: f64,
    /// Per-frame terms, each in `[0, 1]`.
    pub terms: Vec<f64>,
    pub grad_long: Vec<Vec<f64>>,
    pub grad_short: Vec<Vec<f64>>,
}

/// Long-short intersection loss: per frame,
/// `1 - (|a * b| + eps) / (|a| + eps)` on the threshold-filtered masks.
///
/// Filtered pixels get zero gradient.
pub fn lsi_loss(long: &[ProbMask], short: &[ProbMask], weights: &LossWeights) -> Result<LsiOutput> {
    if long.len() != short.len() {
        return Err(Error::shape("lsi_loss (frames)", long.len(), short.len()));
    }
    let (tau, eps) = (weights.tau, weights.epsilon);
    let mut out = LsiOutput {
        loss: 0.0,
        terms: Vec::with_capacity(long.len()),
        grad_long: Vec::with_capacity(long.len()),
        grad_short: Vec::with_capacity(long.len()),
    };
    for (l, s) in long.iter().zip(short) {
        same_shape(l.shape(), s.shape(), "lsi_loss")?;
        let filt = |v: f64| if v >= tau { v } else { 0.0 };
        let (mut inter, mut area) = (0.0, 0.0);
        for (&lv, &sv) in l.values().iter().zip(s.values()) {
            let a = filt(lv);
            inter += a * filt(sv);
            area += a;
        }
        let denom = area + eps;
        let ratio = (inter + eps) / denom;
        let term = 1.0 - ratio;
        let mut gl = vec![0.0; l.values().len()];
        let mut gs = vec![0.0; l.values().len()];
        for (i, (&lv, &sv)) in l.values().iter().zip(s.values()).enumerate() {
            let (a, b) = (filt(lv), filt(sv));
            if lv >= tau {
                gl[i] = -b / denom + ratio / denom;
            }
            if sv >= tau {
                gs[i] = -a / denom;
            }
        }
        out.loss += term;
        out.terms.push(term);
        out.grad_long.push(gl);
        out.grad_short.push(gs);
    }
    Ok(out)
}

/// `1 - (2 sum(m g) + s) / (sum(m) + sum(g) + s)`.
pub fn dice_loss(m: &ProbMask, g: &BinaryMask, smooth: f64) -> Result<MaskLoss> {
    same_shape(m.shape(), g.shape(), "dice_loss")?;
    let (mut inter, mut sum_m, mut sum_g) = (0.0, 0.0, 0.0);
    for (&p, &t) in m.values().iter().zip(g.values()) {
        let t = if t { 1.0 } else { 0.0 };
        inter += p * t;
        sum_m += p;
        sum_g += t;
    }
    let num = 2.0 * inter + smooth;
    let den = sum_m + sum_g + smooth;
    let grad = g
        .values()
        .iter()
        .map(|&t| {
            let t = if t { 1.0 } else { 0.0 };
            -(2.0 * t * den - num) / (den * den)
        })
        .collect();
    Ok(MaskLoss {
        value: 1.0 - num / den,
        grad,
    })
}

/// Mean over pixels of the probability-space focal loss.
pub fn focal_loss(m: &ProbMask, g: &BinaryMask, alpha: f64, gamma: f64) -> Result<MaskLoss> {
    same_shape(m.shape(), g.shape(), "focal_loss")?;
    let n = m.values().len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(m.values().len());
    for (&raw, &t) in m.values().iter().zip(g.values()) {
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let clamped = p != raw;
        let (v, d) = if t {
            let q = 1.0 - p;
            let v = -alpha * q.powf(gamma) * p.ln();
            let d = alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p);
            (v, d)
        } else {
            let q = 1.0 - p;
            let v = -(1.0 - alpha) * p.powf(gamma) * q.ln();
            let d = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
            (v, d)
        };
        value += v;
        grad.push(if clamped { 0.0 } else { d / n });
    }
    Ok(MaskLoss {
        value: value / n,
        grad,
    })
}

/// Mean binary cross-entropy of per-frame reference scores.
pub fn cls_loss(p: &[f64], p_gt: &[bool]) -> Result<MaskLoss> {
    if p.len() != p_gt.len() {
        return Err(Error::shape("cls_loss", p_gt.len(), p.len()));
    }
    if p.is_empty() {
        return Err(Error::invalid("cls_loss needs at least one frame"));
    }
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&raw, &t) in p.iter().zip(p_gt) {
        let q = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let clamped = q != raw;
        let (v, d) = if t {
            (-q.ln(), -1.0 / q)
        } else {
            (-(1.0 - q).ln(), 1.0 / (1.0 - q))
        };
        value += v;
        grad.push(if clamped { 0.0 } else { d / n });
    }
    Ok(MaskLoss {
        value: value / n,
        grad,
    })
}

/// DICE plus focal loss on one mask.
pub fn seg_loss(m: &ProbMask, g: &BinaryMask, w: &LossWeights) -> Result<MaskLoss> {
    let dice = dice_loss(m, g, w.dice_smooth)?;
    let focal = focal_loss(m, g, w.focal_alpha, w.focal_gamma)?;
    Ok(MaskLoss {
        value: dice.value + focal.value,
        grad: dice.grad.iter().zip(&focal.grad).map(|(a, b)| a + b).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(rows: &[&[f64]]) -> ProbMask {
        ProbMask::from_rows(rows).unwrap()
    }

    fn bm(rows: &[&[u8]]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::new(h, w, rows.concat().iter().map(|&v| v == 1).collect()).unwrap()
    }

    #[test]
    fn lsi_hand_case() {
        let w = LossWeights::default();
        let l = pm(&[&[0.8, 0.6], &[0.2, 0.9]]);
        let s = pm(&[&[0.9, 0.4], &[0.7, 0.6]]);
        let out = lsi_loss(&[l], &[s], &w).unwrap();
        // (0.72 + 0.54 + 1) / (2.3 + 1)
        assert!((out.loss - (1.0 - 2.26 / 3.3)).abs() < 1e-12);
        assert!((out.loss - 0.315152).abs() < 1e-6);
    }

    #[test]
    fn lsi_identical_binary_masks() {
        let w = LossWeights::default();
        let m = pm(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let out = lsi_loss(&vec![m.clone(); 3], &vec![m; 3], &w).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn lsi_empty_long_mask_is_zero() {
        let w = LossWeights::default();
        let l = ProbMask::filled(3, 3, 0.4).unwrap();
        let s = ProbMask::filled(3, 3, 0.9).unwrap();
        let out = lsi_loss(&[l], &[s], &w).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn lsi_rejects_mismatch() {
        let w = LossWeights::default();
        let a = ProbMask::filled(2, 2, 0.5).unwrap();
        let b = ProbMask::filled(2, 3, 0.5).unwrap();
        assert!(lsi_loss(&[a.clone()], &[b], &w).is_err());
        assert!(lsi_loss(&[a.clone()], &[a.clone(), a], &w).is_err());
    }

    #[test]
    fn dice_examples() {
        let ones = BinaryMask::new(2, 2, vec![true; 4]).unwrap();
        assert_eq!(dice_loss(&ones.to_prob(), &ones, 1.0).unwrap().value, 0.0);
        let zeros = BinaryMask::new(2, 2, vec![false; 4]).unwrap();
        assert_eq!(dice_loss(&zeros.to_prob(), &zeros, 1.0).unwrap().value, 0.0);
        let m = pm(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let g = bm(&[&[1, 1], &[0, 0]]);
        assert!((dice_loss(&m, &g, 1.0).unwrap().value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn focal_examples() {
        let g = bm(&[&[1, 0]]);
        let perfect = pm(&[&[1.0, 0.0]]);
        assert!(focal_loss(&perfect, &g, 0.4, 2.0).unwrap().value <= 1e-5);

        let half = pm(&[&[0.5]]);
        let fg = focal_loss(&half, &bm(&[&[1]]), 0.4, 2.0).unwrap().value;
        assert!((fg - 0.4 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((fg - 0.069315).abs() < 1e-6);
        let bg = focal_loss(&half, &bm(&[&[0]]), 0.4, 2.0).unwrap().value;
        assert!((bg - 0.103972).abs() < 1e-6);
    }

    #[test]
    fn cls_examples() {
        assert!(cls_loss(&[1.0, 0.0], &[true, false]).unwrap().value < 1e-6);
        let one = cls_loss(&[0.5], &[true]).unwrap().value;
        assert!((one - 0.693147).abs() < 1e-6);
        let two = cls_loss(&[0.5, 0.5], &[true, false]).unwrap().value;
        assert!((two - 2f64.ln()).abs() < 1e-12);
        assert!(cls_loss(&[0.5], &[true, false]).is_err());
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            epsilon: 0.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            lambda_lsi: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn lsi_terms_in_unit_interval(
            (h, w, a, b) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
                let v = proptest::collection::vec(0.0f64..=1.0, h * w);
                (Just(h), Just(w), v.clone(), v)
            }),
            tau in 0.0f64..=1.0,
        ) {
            let weights = LossWeights { tau, ..LossWeights::default() };
            let l = ProbMask::new(h, w, a).unwrap();
            let s = ProbMask::new(h, w, b).unwrap();
            let out = lsi_loss(&[l], &[s], &weights).unwrap();
            prop_assert!(out.terms.iter().all(|t| (0.0..=1.0).contains(t)));
        }

        #[test]
        fn lsi_zero_when_long_inside_binary_short(
            (h, w, a, b) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
                (Just(h), Just(w),
                 proptest::collection::vec(0.0f64..=1.0, h * w),
                 proptest::collection::vec(any::<bool>(), h * w))
            })
        ) {
            let weights = LossWeights::default();
            let short: Vec<f64> = b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            // zero out long wherever the short mask is empty
            let long: Vec<f64> = a.iter().zip(&b).map(|(&v, &x)| if x { v } else { 0.0 }).collect();
            let out = lsi_loss(
                &[ProbMask::new(h, w, long).unwrap()],
                &[ProbMask::new(h, w, short).unwrap()],
                &weights,
            ).unwrap();
            prop_assert_eq!(out.loss, 0.0);
        }

        #[test]
        fn dice_and_focal_are_permutation_invariant(
            (vals, bits, rot) in (2usize..20).prop_flat_map(|n| {
                (proptest::collection::vec(0.0f64..=1.0, n),
                 proptest::collection::vec(any::<bool>(), n),
                 0..n)
            })
        ) {
            let n = vals.len();
            let m = ProbMask::new(1, n, vals.clone()).unwrap();
            let g = BinaryMask::new(1, n, bits.clone()).unwrap();
            let mut pv = vals; pv.rotate_left(rot);
            let mut pb = bits; pb.rotate_left(rot);
            let pm = ProbMask::new(1, n, pv).unwrap();
            let pg = BinaryMask::new(1, n, pb).unwrap();
            let d0 = dice_loss(&m, &g, 1.0).unwrap().value;
            let d1 = dice_loss(&pm, &pg, 1.0).unwrap().value;
            prop_assert!((d0 - d1).abs() < 1e-12);
            let f0 = focal_loss(&m, &g, 0.4, 2.0).unwrap().value;
            let f1 = focal_loss(&pm, &pg, 0.4, 2.0).unwrap().value;
            prop_assert!((f0 - f1).abs() < 1e-12);
        }
    }
}
