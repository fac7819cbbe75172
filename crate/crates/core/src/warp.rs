//! Bilinear feature warping along flow fields and the forward-backward
//! feature consistency loss with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, FlowField};

/// Norms below this are treated as exactly zero when differentiating.
const NORM_FLOOR: f64 = 1e-12;

/// Which way features are carried between the annotated frame and its neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Neighbours warped onto the annotated frame.
    #[default]
    ForwardBackward,
    /// The annotated frame warped onto each neighbour.
    Opposite,
    /// Sum of both directions.
    Mutual,
}

/// Flows around an anchor frame `k`, expressed at feature resolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborFlows {
    /// `(t, o_{k -> k+t})`.
    pub forward: Vec<(isize, FlowField)>,
    /// `(t, o_{k+t -> k})`; only needed by the opposite and mutual modes.
    pub opposite: Vec<(isize, FlowField)>,
}

impl NeighborFlows {
    pub fn downscaled(&self, height: usize, width: usize) -> Result<Self> {
        let scale = |list: &[(isize, FlowField)]| {
            list.iter()
                .map(|(t, f)| Ok((*t, downscale_flow(f, height, width)?)))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            forward: scale(&self.forward)?,
            opposite: scale(&self.opposite)?,
        })
    }
}

/// `f^w_{k+t -> k}` for each available offset, with `t = 0` holding `f_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedFeatureSet {
    pub anchor_index: usize,
    pub entries: Vec<(isize, FeatureMap)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbcOutput {
    pub loss: f64,
    /// One gradient per input feature map; zero for frames not involved.
    pub grads: Vec<FeatureMap>,
}

/// Average-pools a flow to `height x width` and rescales displacements
/// into the target grid's pixel units.
pub fn downscale_flow(o: &FlowField, height: usize, width: usize) -> Result<FlowField> {
    let (src_h, src_w) = o.shape();
    if height == 0 || width == 0 || height > src_h || width > src_w {
        return Err(Error::invalid(format!(
            "cannot rescale {src_h}x{src_w} flow to {height}x{width}"
        )));
    }
    if (height, width) == (src_h, src_w) {
        return Ok(o.clone());
    }
    let su = width as f64 / src_w as f64;
    let sv = height as f64 / src_h as f64;
    let mut u = Vec::with_capacity(height * width);
    let mut v = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1) = (y * src_h / height, (y + 1) * src_h / height);
        for x in 0..width {
            let (x0, x1) = (x * src_w / width, (x + 1) * src_w / width);
            let (mut acc_u, mut acc_v) = (0.0, 0.0);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let (du, dv) = o.at(xx, yy);
                    acc_u += du;
                    acc_v += dv;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            u.push(acc_u / n * su);
            v.push(acc_v / n * sv);
        }
    }
    FlowField::new(height, width, u, v)
}

/// Bilinear taps for one sample: four `(index, weight)` pairs.
#[inline]
fn taps(x: f64, y: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    [
        (y0 * width + x0, (1.0 - ax) * (1.0 - ay)),
        (y0 * width + x1, ax * (1.0 - ay)),
        (y1 * width + x0, (1.0 - ax) * ay),
        (y1 * width + x1, ax * ay),
    ]
}

fn check_flow(f: &FeatureMap, o: &FlowField) -> Result<()> {
    if (f.height(), f.width()) != o.shape() {
        return Err(Error::shape("warp", (f.height(), f.width()), o.shape()));
    }
    Ok(())
}

/// `out(c, x, y) = f(c, x + u, y + v)`, bilinear, clamped to the grid.
pub fn warp(f: &FeatureMap, o: &FlowField) -> Result<FeatureMap> {
    check_flow(f, o)?;
    let (c, h, w) = f.shape();
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = o.at(x, y);
            let i = y * w + x;
            let t = taps(x as f64 + du, y as f64 + dv, w, h);
            for ch in 0..c {
                let plane = f.plane(ch);
                // identity flow reads the source pixel with weight exactly 1
                out[ch * n + i] = t[0].1 * plane[t[0].0]
                    + t[1].1 * plane[t[1].0]
                    + t[2].1 * plane[t[2].0]
                    + t[3].1 * plane[t[3].0];
            }
        }
    }
    FeatureMap::new(c, h, w, out)
}

/// Adjoint of [`warp`]: scatters `grad_out` back onto the source grid.
pub fn warp_backward(grad_out: &FeatureMap, o: &FlowField) -> Result<FeatureMap> {
    check_flow(grad_out, o)?;
    let (c, h, w) = grad_out.shape();
    let n = h * w;
    let mut grad = FeatureMap::zeros(c, h, w);
    let g = grad.values_mut();
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = o.at(x, y);
            let i = y * w + x;
            let t = taps(x as f64 + du, y as f64 + dv, w, h);
            for ch in 0..c {
                let up = grad_out.values()[ch * n + i];
                for &(j, wt) in &t {
                    g[ch * n + j] += wt * up;
                }
            }
        }
    }
    Ok(grad)
}

/// Warps every available neighbour onto frame `k`.
pub fn warped_features(
    features: &[FeatureMap],
    k: usize,
    forward: &[(isize, FlowField)],
) -> Result<WarpedFeatureSet> {
    let anchor = features
        .get(k)
        .ok_or_else(|| Error::invalid(format!("anchor {k} outside {} frames", features.len())))?;
    let mut entries = vec![(0, anchor.clone())];
    for (t, o) in forward {
        entries.push((*t, warp(neighbour(features, k, *t)?, o)?));
    }
    entries.sort_by_key(|(t, _)| *t);
    Ok(WarpedFeatureSet {
        anchor_index: k,
        entries,
    })
}

fn neighbour(features: &[FeatureMap], k: usize, t: isize) -> Result<&FeatureMap> {
    let j = k as isize + t;
    if j < 0 || j as usize >= features.len() {
        return Err(Error::invalid(format!(
            "neighbour {k}{t:+} outside {} frames",
            features.len()
        )));
    }
    Ok(&features[j as usize])
}

/// One directed term `||warp(moving, o) - target||` and its gradients.
fn directed_term(
    moving: &FeatureMap,
    target: &FeatureMap,
    o: &FlowField,
    normalize: bool,
) -> Result<(f64, FeatureMap, FeatureMap)> {
    if moving.shape() != target.shape() {
        return Err(Error::shape("fbc_loss", moving.shape(), target.shape()));
    }
    let warped = warp(moving, o)?;
    let diff: Vec<f64> = warped
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| a - b)
        .collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let (c, h, w) = moving.shape();
    let scale = if normalize {
        1.0 / ((c * h * w) as f64).sqrt()
    } else {
        1.0
    };
    let dscale = if norm < NORM_FLOOR { 0.0 } else { scale / norm };
    let grad_warped = FeatureMap::new(c, h, w, diff.iter().map(|d| d * dscale).collect())?;
    let grad_moving = warp_backward(&grad_warped, o)?;
    let grad_target = FeatureMap::new(
        c,
        h,
        w,
        grad_warped.values().iter().map(|g| -g).collect(),
    )?;
    Ok((norm * scale, grad_moving, grad_target))
}

fn accumulate(dst: &mut FeatureMap, src: &FeatureMap) {
    dst.values_mut()
        .iter_mut()
        .zip(src.values())
        .for_each(|(d, s)| *d += s);
}

fn directed_loss(
    features: &[FeatureMap],
    k: usize,
    flows: &NeighborFlows,
    opposite: bool,
    normalize: bool,
    grads: &mut [FeatureMap],
) -> Result<f64> {
    let list = if opposite {
        &flows.opposite
    } else {
        &flows.forward
    };
    let mut total = 0.0;
    for (t, o) in list {
        let j = (k as isize + t) as usize;
        let other = neighbour(features, k, *t)?;
        let anchor = &features[k];
        if opposite {
            let (loss, g_anchor, g_other) = directed_term(anchor, other, o, normalize)?;
            total += loss;
            accumulate(&mut grads[k], &g_anchor);
            accumulate(&mut grads[j], &g_other);
        } else {
            let (loss, g_other, g_anchor) = directed_term(other, anchor, o, normalize)?;
            total += loss;
            accumulate(&mut grads[j], &g_other);
            accumulate(&mut grads[k], &g_anchor);
        }
    }
    Ok(total)
}

/// Sum over neighbours of the Euclidean distance between warped and
/// reference features. With `normalize`, each distance is divided by
/// `sqrt(c * h * w)`.
pub fn fbc_loss(
    features: &[FeatureMap],
    k: usize,
    flows: &NeighborFlows,
    mode: ConsistencyMode,
    normalize: bool,
) -> Result<FbcOutput> {
    let anchor = features
        .get(k)
        .ok_or_else(|| Error::invalid(format!("anchor {k} outside {} frames", features.len())))?;
    let (c, h, w) = anchor.shape();
    let mut grads = vec![FeatureMap::zeros(c, h, w); features.len()];
    let loss = match mode {
        ConsistencyMode::ForwardBackward => {
            directed_loss(features, k, flows, false, normalize, &mut grads)?
        }
        ConsistencyMode::Opposite => directed_loss(features, k, flows, true, normalize, &mut grads)?,
        ConsistencyMode::Mutual => {
            let fb = directed_loss(features, k, flows, false, normalize, &mut grads)?;
            let op = directed_loss(features, k, flows, true, normalize, &mut grads)?;
            fb + op
        }
    };
    Ok(FbcOutput { loss, grads })
}
