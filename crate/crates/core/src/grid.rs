//! Grid containers shared by every stage of the pipeline.
//!
//! All grids are row-major. Pixel `(x, y)` lives at index `y * width + x`,
//! with `x` growing rightward and `y` growing downward from the top-left
//! pixel center. Values are `f64` in memory; the on-disk formats in
//! [`crate::io`] narrow them to `f32` or `u8`.

use crate::error::{Error, Result};

/// Per-pixel foreground probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, values.len(), "ProbMask::new")?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!(
                "probability {v} at pixel {i} is outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(height, width, rows.concat())
    }

    /// Builds a mask from logits through the logistic function.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        Self::new(height, width, logits.iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Binarizes with an inclusive threshold.
    pub fn binarize(&self, tau: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v >= tau).collect(),
        }
    }
}

/// Ground-truth style mask with exactly two values.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        check_dims(height, width, values.len(), "BinaryMask::new")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_prob(&self) -> ProbMask {
        ProbMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Nearest-neighbour resize; sample `(x, y)` reads source pixel
    /// `floor((x + 0.5) * src / dst)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be non-empty"));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<usize> {
        same_shape(self.shape(), other.shape(), "BinaryMask::intersection")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<usize> {
        same_shape(self.shape(), other.shape(), "BinaryMask::union")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| **a || **b)
            .count())
    }
}

/// A `channels x height x width` real-valued feature volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("feature map needs at least one channel"));
        }
        check_dims(height, width * channels, values.len(), "FeatureMap::new")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Dense per-pixel displacement, in pixels along x (`u`) and y (`v`).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_dims(height, width, u.len(), "FlowField::new (u)")?;
        check_dims(height, width, v.len(), "FlowField::new (v)")?;
        if u.iter().chain(&v).any(|d| !d.is_finite()) {
            return Err(Error::invalid("flow field contains non-finite values"));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u.len() as f64;
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| u.hypot(*v))
            .sum::<f64>()
            / n
    }
}

/// Single-channel image, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, values.len(), "GrayImage::new")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// RGB image, channel values in `[0, 1]`, stored interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    values: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, values: Vec<[f64; 3]>) -> Result<Self> {
        check_dims(height, width, values.len(), "RgbImage::new")?;
        if values.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("rgb channel value outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.values[y * self.width + x]
    }

    /// Luma conversion with weights 0.299 / 0.587 / 0.114.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
                .collect(),
        }
    }
}

/// A short video: equally sized frames plus the indices carrying ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<RgbImage>,
    annotated: Vec<usize>,
}

impl VideoClip {
    pub fn new(frames: Vec<RgbImage>, mut annotated: Vec<usize>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("video clip needs at least one frame"))?
            .shape();
        if let Some(bad) = frames.iter().find(|f| f.shape() != first) {
            return Err(Error::shape("VideoClip::new", first, bad.shape()));
        }
        annotated.sort_unstable();
        annotated.dedup();
        if let Some(&k) = annotated.iter().find(|&&k| k >= frames.len()) {
            return Err(Error::invalid(format!(
                "annotated index {k} outside clip of {} frames",
                frames.len()
            )));
        }
        Ok(Self { frames, annotated })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn annotated(&self) -> &[usize] {
        &self.annotated
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

/// Keeps values `>= tau`, zeroing the rest; surviving probabilities are not binarized.
pub fn threshold_filter(m: &ProbMask, tau: f64) -> ProbMask {
    ProbMask {
        height: m.height,
        width: m.width,
        values: m
            .values
            .iter()
            .map(|&v| if v >= tau { v } else { 0.0 })
            .collect(),
    }
}

pub fn soft_area(m: &ProbMask) -> f64 {
    m.values.iter().sum()
}

pub fn soft_intersection(a: &ProbMask, b: &ProbMask) -> Result<f64> {
    same_shape(a.shape(), b.shape(), "soft_intersection")?;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn same_shape(
    a: (usize, usize),
    b: (usize, usize),
    context: &'static str,
) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(context, a, b))
    }
}

fn check_dims(height: usize, width: usize, len: usize, context: &'static str) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("{context}: empty grid {height}x{width}")));
    }
    if height * width != len {
        return Err(Error::shape(context, height * width, len));
    }
    Ok(())
}
