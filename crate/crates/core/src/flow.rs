//! Dense two-frame optical flow by polynomial expansion (Farneback).
//!
//! Each pixel neighbourhood is approximated by a quadratic
//! `f(x) = x^T A x + b^T x + c` fitted with Gaussian applicability. For a
//! displacement `d`, `b_dst = b_src - 2 A d`, so `d` solves a 2x2 system
//! accumulated over a window. A prior displacement is refined iteratively
//! and propagated coarse-to-fine through a Gaussian pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FlowField, GrayImage, VideoClip};

/// Tikhonov term added to the per-window normal equations.
pub const FLOW_REGULARIZATION: f64 = 1e-3;

/// Images are expanded in 8-bit intensity units so the regularizer is
/// negligible wherever there is texture.
const INTENSITY_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_neighborhood: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_size: 15,
            iterations: 3,
            poly_neighborhood: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels < 1 {
            return Err(Error::invalid("pyramid_levels must be >= 1"));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::invalid("pyramid_scale must lie in (0, 1)"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        for (name, v) in [
            ("window_size", self.window_size),
            ("poly_neighborhood", self.poly_neighborhood),
        ] {
            if v < 3 || v % 2 == 0 {
                return Err(Error::invalid(format!("{name} must be odd and >= 3, got {v}")));
            }
        }
        if !(self.poly_sigma > 0.0 && self.poly_sigma.is_finite()) {
            return Err(Error::invalid("poly_sigma must be positive"));
        }
        Ok(())
    }
}

/// Estimates the displacement taking each `src` pixel to its location in `dst`.
pub fn farneback_flow(src: &GrayImage, dst: &GrayImage, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if src.shape() != dst.shape() {
        return Err(Error::shape("farneback_flow", src.shape(), dst.shape()));
    }
    let (height, width) = src.shape();
    let src = Plane::from_gray(src);
    let dst = Plane::from_gray(dst);
    let expansion = PolyFilters::new(params.poly_neighborhood / 2, params.poly_sigma);

    let levels = pyramid_sizes(height, width, params);
    let mut flow: Option<(Plane, Plane)> = None;
    for &(level, h, w) in levels.iter().rev() {
        let (src_l, dst_l) = if level == 0 {
            (src.clone(), dst.clone())
        } else {
            let scale = params.pyramid_scale.powi(level as i32);
            let sigma = (1.0 / scale - 1.0) * 0.5;
            (
                gaussian_blur(&src, sigma).resize(h, w),
                gaussian_blur(&dst, sigma).resize(h, w),
            )
        };
        let (mut u, mut v) = match flow.take() {
            None => (Plane::zeros(h, w), Plane::zeros(h, w)),
            Some((pu, pv)) => {
                let sx = w as f64 / pu.width as f64;
                let sy = h as f64 / pu.height as f64;
                (pu.resize(h, w).scaled(sx), pv.resize(h, w).scaled(sy))
            }
        };
        let poly_src = expansion.expand(&src_l);
        let poly_dst = expansion.expand(&dst_l);
        for _ in 0..params.iterations {
            let mut system = update_matrices(&poly_src, &poly_dst, &u, &v);
            for field in &mut system {
                *field = box_blur(field, params.window_size / 2);
            }
            solve(&system, &mut u, &mut v);
        }
        flow = Some((u, v));
    }
    let (u, v) = flow.expect("at least one pyramid level");
    FlowField::new(height, width, u.data, v.data)
}

/// Flows `o_{k -> k+t}` for `t` in `-radius..=radius`, `t != 0`, omitting
/// neighbours outside the clip.
pub fn clip_flows(
    clip: &VideoClip,
    k: usize,
    radius: usize,
    params: &FlowParams,
) -> Result<Vec<(isize, FlowField)>> {
    neighbour_flows(clip, k, radius, params, false)
}

/// Flows `o_{k+t -> k}`, from each neighbour back to the anchor frame.
pub fn clip_flows_opposite(
    clip: &VideoClip,
    k: usize,
    radius: usize,
    params: &FlowParams,
) -> Result<Vec<(isize, FlowField)>> {
    neighbour_flows(clip, k, radius, params, true)
}

fn neighbour_flows(
    clip: &VideoClip,
    k: usize,
    radius: usize,
    params: &FlowParams,
    toward_anchor: bool,
) -> Result<Vec<(isize, FlowField)>> {
    if k >= clip.len() {
        return Err(Error::invalid(format!(
            "frame index {k} outside clip of {} frames",
            clip.len()
        )));
    }
    let anchor = clip.frames()[k].to_gray();
    let mut out = Vec::new();
    for t in neighbour_offsets(k, clip.len(), radius) {
        let other = clip.frames()[(k as isize + t) as usize].to_gray();
        let flow = if toward_anchor {
            farneback_flow(&other, &anchor, params)?
        } else {
            farneback_flow(&anchor, &other, params)?
        };
        out.push((t, flow));
    }
    Ok(out)
}

/// Offsets `-radius..=radius` (excluding 0) that land inside `[0, len)`.
pub fn neighbour_offsets(k: usize, len: usize, radius: usize) -> Vec<isize> {
    let r = radius as isize;
    (-r..=r)
        .filter(|&t| t != 0)
        .filter(|&t| {
            let j = k as isize + t;
            j >= 0 && j < len as isize
        })
        .collect()
}

fn pyramid_sizes(height: usize, width: usize, params: &FlowParams) -> Vec<(usize, usize, usize)> {
    let min_side = params.poly_neighborhood.max(8);
    let mut levels = vec![(0, height, width)];
    for level in 1..params.pyramid_levels {
        let scale = params.pyramid_scale.powi(level as i32);
        let h = (height as f64 * scale).round() as usize;
        let w = (width as f64 * scale).round() as usize;
        if h < min_side || w < min_side {
            break;
        }
        levels.push((level, h, w));
    }
    levels
}

#[derive(Debug, Clone)]
struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            data: img.values().iter().map(|v| v * INTENSITY_SCALE).collect(),
        }
    }

    #[inline]
    fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor();
        let y0 = y.floor();
        let ax = x - x0;
        let ay = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = (1.0 - ax) * self.at_clamped(x0, y0) + ax * self.at_clamped(x0 + 1, y0);
        let bottom =
            (1.0 - ax) * self.at_clamped(x0, y0 + 1) + ax * self.at_clamped(x0 + 1, y0 + 1);
        (1.0 - ay) * top + ay * bottom
    }

    /// Bilinear resize with pixel-center alignment.
    fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                data.push(self.bilinear(src_x, src_y));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    fn scaled(mut self, factor: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let mut tmp = Plane::zeros(p.height, p.width);
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * p.at_clamped(x + j as isize - radius, y);
            }
            tmp.data[y as usize * p.width + x as usize] = acc;
        }
    }
    let mut out = Plane::zeros(p.height, p.width);
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * tmp.at_clamped(x, y + j as isize - radius);
            }
            out.data[y as usize * p.width + x as usize] = acc;
        }
    }
    out
}

/// Per-pixel quadratic coefficients `[bx, by, axx, ayy, axy]`.
struct Expansion {
    height: usize,
    width: usize,
    coeffs: Vec<[f64; 5]>,
}

impl Expansion {
    fn at(&self, x: usize, y: usize) -> [f64; 5] {
        self.coeffs[y * self.width + x]
    }

    fn bilinear(&self, x: f64, y: f64) -> [f64; 5] {
        let x0 = x.floor();
        let y0 = y.floor();
        let ax = x - x0;
        let ay = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let c00 = self.at(x0, y0);
        let c10 = self.at(x1, y0);
        let c01 = self.at(x0, y1);
        let c11 = self.at(x1, y1);
        std::array::from_fn(|k| {
            (1.0 - ay) * ((1.0 - ax) * c00[k] + ax * c10[k])
                + ay * ((1.0 - ax) * c01[k] + ax * c11[k])
        })
    }
}

/// Weighted least-squares filters projecting a neighbourhood onto the
/// quadratic basis `{1, x, y, x^2, y^2, xy}`.
struct PolyFilters {
    radius: isize,
    /// `taps[k][(dy + r) * side + (dx + r)]` for the five non-constant terms.
    taps: [Vec<f64>; 5],
}

impl PolyFilters {
    fn new(radius: usize, sigma: f64) -> Self {
        let r = radius as isize;
        let side = 2 * radius + 1;
        let basis = |x: f64, y: f64| [1.0, x, y, x * x, y * y, x * y];
        let weight = |x: f64, y: f64| (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();

        let mut gram = [[0.0f64; 6]; 6];
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (dx as f64, dy as f64);
                let b = basis(x, y);
                let w = weight(x, y);
                for i in 0..6 {
                    for j in 0..6 {
                        gram[i][j] += w * b[i] * b[j];
                    }
                }
            }
        }
        let inv = invert6(gram);
        let mut taps: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; side * side]);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (dx as f64, dy as f64);
                let b = basis(x, y);
                let w = weight(x, y);
                let idx = ((dy + r) as usize) * side + (dx + r) as usize;
                for (k, tap) in taps.iter_mut().enumerate() {
                    let row = &inv[k + 1];
                    tap[idx] = w * (0..6).map(|j| row[j] * b[j]).sum::<f64>();
                }
            }
        }
        Self { radius: r, taps }
    }

    /// Expands around each pixel's own value so flat regions give exact zeros.
    fn expand(&self, p: &Plane) -> Expansion {
        let r = self.radius;
        let side = (2 * r + 1) as usize;
        let mut coeffs = Vec::with_capacity(p.height * p.width);
        for y in 0..p.height as isize {
            for x in 0..p.width as isize {
                let center = p.at_clamped(x, y);
                let mut c = [0.0; 5];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let diff = p.at_clamped(x + dx, y + dy) - center;
                        if diff == 0.0 {
                            continue;
                        }
                        let idx = ((dy + r) as usize) * side + (dx + r) as usize;
                        for (ck, tap) in c.iter_mut().zip(&self.taps) {
                            *ck += tap[idx] * diff;
                        }
                    }
                }
                coeffs.push(c);
            }
        }
        Expansion {
            height: p.height,
            width: p.width,
            coeffs,
        }
    }
}

fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = m;
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        for j in 0..6 {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..6 {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in 0..6 {
                        a[i][j] -= f * a[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    inv
}

/// Builds the five fields `[g11, g12, g22, h1, h2]` of `A^T A` and `A^T db`.
fn update_matrices(src: &Expansion, dst: &Expansion, u: &Plane, v: &Plane) -> [Plane; 5] {
    let (h, w) = (src.height, src.width);
    let mut fields: [Plane; 5] = std::array::from_fn(|_| Plane::zeros(h, w));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (du, dv) = (u.data[i], v.data[i]);
            let sx = x as f64 + du;
            let sy = y as f64 + dv;
            if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
                continue;
            }
            let [bx1, by1, axx1, ayy1, axy1] = src.at(x, y);
            let [bx2, by2, axx2, ayy2, axy2] = dst.bilinear(sx, sy);
            let a = 0.5 * (axx1 + axx2);
            let b = 0.5 * (ayy1 + ayy2);
            let c = 0.25 * (axy1 + axy2);
            let db0 = -0.5 * (bx2 - bx1) + a * du + c * dv;
            let db1 = -0.5 * (by2 - by1) + c * du + b * dv;
            fields[0].data[i] = a * a + c * c;
            fields[1].data[i] = c * (a + b);
            fields[2].data[i] = c * c + b * b;
            fields[3].data[i] = a * db0 + c * db1;
            fields[4].data[i] = c * db0 + b * db1;
        }
    }
    fields
}

/// Separable box sum over the window clipped to the image.
fn box_blur(p: &Plane, radius: usize) -> Plane {
    let (h, w) = (p.height, p.width);
    let r = radius as isize;
    let mut tmp = Plane::zeros(h, w);
    for y in 0..h {
        let row = &p.data[y * w..(y + 1) * w];
        for x in 0..w as isize {
            let lo = (x - r).max(0) as usize;
            let hi = ((x + r) as usize).min(w - 1);
            tmp.data[y * w + x as usize] = row[lo..=hi].iter().sum();
        }
    }
    let mut out = Plane::zeros(h, w);
    for y in 0..h as isize {
        let lo = (y - r).max(0) as usize;
        let hi = ((y + r) as usize).min(h - 1);
        for x in 0..w {
            out.data[y as usize * w + x] = (lo..=hi).map(|yy| tmp.data[yy * w + x]).sum();
        }
    }
    out
}

fn solve(system: &[Plane; 5], u: &mut Plane, v: &mut Plane) {
    let lambda = FLOW_REGULARIZATION;
    for i in 0..u.data.len() {
        let g11 = system[0].data[i] + lambda;
        let g12 = system[1].data[i];
        let g22 = system[2].data[i] + lambda;
        let h1 = system[3].data[i];
        let h2 = system[4].data[i];
        let det = g11 * g22 - g12 * g12;
        u.data[i] = (g22 * h1 - g12 * h2) / det;
        v.data[i] = (g11 * h2 - g12 * h1) / det;
    }
}
