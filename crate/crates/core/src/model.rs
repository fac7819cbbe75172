//! A small query-based segmentation model with hand-written reverse mode.
//!
//! Visual encoder: two 3x3 tanh convolutions. Text encoder: mean of word
//! embeddings. Fusion: per-pixel `x = tanh(Wv f + Wt z + b)`. Each query
//! produces a hidden state `h = tanh(Wq q + Wz z + b)`, a kernel
//! `k = Wk h + b` and, per frame, a mask
//! `m = sigmoid(MASK_GAIN k_hat . x + b)` with `k_hat = k / |k|`. The
//! reference score asks how well the visual features pooled under the
//! query's own long mask predict the expression's words against the rest
//! of the vocabulary: with `u = A g`,
//! `g = sum_p m (f - mean_p f) / (sum_p m + 1)` and `E` the embedding
//! table, the logit is `SCORE_GAIN * (z . u - logsumexp(E u) + ln |E|)`.
//! Zero parameters and empty masks both score 0.5.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{sigmoid, FeatureMap, ProbMask, RgbImage};
use crate::matching::QuerySequencePrediction;
use crate::rng::named_rng;
use crate::text::TextExpression;

const CHECKPOINT_MAGIC: &[u8; 4] = b"LOSH";
const CHECKPOINT_VERSION: u32 = 1;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

pub fn default_vocab() -> Vec<String> {
    [
        "a", "is", "moving", "left", "right", "up", "down", "still", "square", "circle",
        "triangle", "red", "green", "blue", "yellow", "purple", "orange",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub num_queries: usize,
    pub hidden_dim: usize,
    pub feature_channels: usize,
    pub feature_stride: usize,
    pub vocab: Vec<String>,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub clip_window: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_queries: 4,
            hidden_dim: 32,
            feature_channels: 16,
            feature_stride: 4,
            vocab: default_vocab(),
            learning_rate: 0.05,
            steps: 200,
            seed: 0,
            clip_window: 5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries < 2 {
            return Err(Error::invalid("num_queries must be >= 2"));
        }
        if self.hidden_dim == 0 || self.feature_channels == 0 {
            return Err(Error::invalid("hidden_dim and feature_channels must be positive"));
        }
        if ![1, 2, 4].contains(&self.feature_stride) {
            return Err(Error::invalid(format!(
                "feature_stride must be 1, 2 or 4, got {}",
                self.feature_stride
            )));
        }
        if self.clip_window == 0 {
            return Err(Error::invalid("clip_window must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.vocab.is_empty() {
            return Err(Error::invalid("vocab must not be empty"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.vocab.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(Error::invalid(format!("duplicate vocab word {dup:?}")));
        }
        Ok(())
    }

    fn strides(&self) -> (usize, usize) {
        match self.feature_stride {
            1 => (1, 1),
            2 => (2, 1),
            _ => (2, 2),
        }
    }

    pub fn feature_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.feature_stride;
        if height % s != 0 || width % s != 0 {
            return Err(Error::invalid(format!(
                "feature_stride {s} does not divide {height}x{width}"
            )));
        }
        Ok((height / s, width / s))
    }

    /// Embedding row per token; the extra last row is the out-of-vocabulary word.
    pub fn token_ids(&self, expr: &TextExpression) -> Vec<usize> {
        let index: HashMap<&str, usize> =
            self.vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        expr.tokens()
            .iter()
            .map(|t| index.get(t.as_str()).copied().unwrap_or(self.vocab.len()))
            .collect()
    }
}

// Tensor slots, in checkpoint order.
pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const EMBED: usize = 4;
pub const QUERY: usize = 5;
pub const FUSE_WV: usize = 6;
pub const FUSE_WT: usize = 7;
pub const FUSE_B: usize = 8;
pub const HEAD_WQ: usize = 9;
pub const HEAD_WZ: usize = 10;
pub const HEAD_B: usize = 11;
pub const KERNEL_W: usize = 12;
pub const KERNEL_B: usize = 13;
pub const MASK_B: usize = 14;
pub const SCORE_W: usize = 15;

/// Fixed temperature on the reference-score logit.
pub const SCORE_GAIN: f64 = 5.0;
/// Mask logits are `MASK_GAIN * (k_hat . x) + b` with a unit-length kernel.
pub const MASK_GAIN: f64 = 4.0;
const KERNEL_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// (name, shape, fan_in) for every tensor.
fn layout(cfg: &ToyConfig) -> Vec<(&'static str, Vec<usize>, usize)> {
    let (c, d, n, v) = (cfg.feature_channels, cfg.hidden_dim, cfg.num_queries, cfg.vocab.len() + 1);
    vec![
        ("conv1.weight", vec![c, 3, 3, 3], 27),
        ("conv1.bias", vec![c], 27),
        ("conv2.weight", vec![c, c, 3, 3], 9 * c),
        ("conv2.bias", vec![c], 9 * c),
        // rows have no inputs, so fan_in is taken as 1
        ("text.embedding", vec![v, d], 1),
        ("query.embedding", vec![n, d], d),
        ("fuse.visual", vec![c, c], c + d),
        ("fuse.text", vec![c, d], c + d),
        ("fuse.bias", vec![c], c + d),
        ("head.query", vec![d, d], 2 * d),
        ("head.text", vec![d, d], 2 * d),
        ("head.bias", vec![d], 2 * d),
        ("kernel.weight", vec![c, d], d),
        ("kernel.bias", vec![c], d),
        ("mask.bias", vec![1], c),
        ("score.bilinear", vec![d, c], c),
    ]
}

#[derive(Debug, Clone)]
pub struct ToyParams {
    pub tensors: Vec<Tensor>,
    version: u64,
}

impl PartialEq for ToyParams {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl ToyParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), one stream per tensor name.
    pub fn init(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = named_rng(cfg.seed, name);
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self {
            tensors,
            version: fresh_version(),
        })
    }

    pub fn zeros(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = layout(cfg)
            .into_iter()
            .map(|(name, shape, _)| {
                let len = shape.iter().product();
                Tensor {
                    name,
                    shape,
                    data: vec![0.0; len],
                }
            })
            .collect();
        Ok(Self {
            tensors,
            version: fresh_version(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name,
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
            version: fresh_version(),
        }
    }

    pub fn get(&self, slot: usize) -> &[f64] {
        &self.tensors[slot].data
    }

    fn get_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.tensors[slot].data
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks cached forward passes as stale; call after editing tensors in place.
    pub fn touch(&mut self) {
        self.version = fresh_version();
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        self.version = fresh_version();
        &mut self.tensors[slot]
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &ToyParams) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += k * y);
        }
        self.version = fresh_version();
        Ok(())
    }

    fn check_layout(&self, other: &ToyParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::invalid("parameter sets have different layouts"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint written for a model with configuration `cfg`.
    pub fn decode(bytes: &[u8], cfg: &ToyConfig, path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "bad magic, expected LOSH"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, &format!("unsupported checkpoint version {version}")));
        }
        let mut params = Self::zeros(cfg)?;
        for t in &mut params.tensors {
            let at = r.pos as u64;
            let n = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let name = r.take(n)?;
            if name != t.name.as_bytes() {
                return Err(r.error(at, &format!(
                    "expected tensor {:?}, found {:?}",
                    t.name,
                    String::from_utf8_lossy(name)
                )));
            }
            let at = r.pos as u64;
            let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            if count != t.data.len() as u64 {
                return Err(r.error(at, &format!(
                    "tensor {} has {count} elements, configuration expects {}",
                    t.name,
                    t.data.len()
                )));
            }
            for v in t.data.iter_mut() {
                let at = r.pos as u64;
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                if !v.is_finite() {
                    return Err(r.error(at, &format!("non-finite value in {}", t.name)));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, cfg: &ToyConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, cfg, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(self.pos as u64, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn error(&self, offset: u64, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }
}

/// 3x3 convolution, zero padding 1. `input` is `[cin][h][w]`.
fn conv3x3(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / stride, w / stride);
    let k = cin * 9;
    let col = im2col(input, cin, h, w, stride);
    let npix = ho * wo;
    let mut out = vec![0.0; cout * npix];
    for o in 0..cout {
        let wrow = &weight[o * k..(o + 1) * k];
        let plane = &mut out[o * npix..(o + 1) * npix];
        for (p, v) in plane.iter_mut().enumerate() {
            *v = bias[o] + dot(wrow, &col[p * k..(p + 1) * k]);
        }
    }
    (out, ho, wo)
}

/// Zero-padded 3x3 patches, one row of `cin * 9` values per output pixel,
/// ordered like the weight layout `[cin][ky][kx]`.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (h / stride, w / stride);
    let k = cin * 9;
    let mut col = vec![0.0; ho * wo * k];
    for y in 0..ho {
        for x in 0..wo {
            let row = &mut col[(y * wo + x) * k..(y * wo + x + 1) * k];
            for ky in 0..3 {
                let sy = (y * stride + ky).wrapping_sub(1);
                if sy >= h {
                    continue;
                }
                for kx in 0..3 {
                    let sx = (x * stride + kx).wrapping_sub(1);
                    if sx >= w {
                        continue;
                    }
                    for i in 0..cin {
                        row[i * 9 + ky * 3 + kx] = input[i * h * w + sy * w + sx];
                    }
                }
            }
        }
    }
    col
}

/// Gradients of `conv3x3` given `dout` with respect to its pre-activation output.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    stride: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let (ho, wo) = (h / stride, w / stride);
    let npix = ho * wo;
    let k = cin * 9;
    let col = im2col(input, cin, h, w, stride);
    for o in 0..cout {
        let g = &dout[o * npix..(o + 1) * npix];
        dbias[o] += g.iter().sum::<f64>();
        let dw = &mut dweight[o * k..(o + 1) * k];
        for (p, &gv) in g.iter().enumerate() {
            if gv != 0.0 {
                axpy_slice(dw, gv, &col[p * k..(p + 1) * k]);
            }
        }
    }
    let Some(di) = dinput else { return };
    let mut dcol = vec![0.0; k];
    for y in 0..ho {
        for x in 0..wo {
            let p = y * wo + x;
            dcol.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..cout {
                let gv = dout[o * npix + p];
                if gv != 0.0 {
                    axpy_slice(&mut dcol, gv, &weight[o * k..(o + 1) * k]);
                }
            }
            for ky in 0..3 {
                let sy = (y * stride + ky).wrapping_sub(1);
                if sy >= h {
                    continue;
                }
                for kx in 0..3 {
                    let sx = (x * stride + kx).wrapping_sub(1);
                    if sx >= w {
                        continue;
                    }
                    for i in 0..cin {
                        di[i * h * w + sy * w + sx] += dcol[i * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
}

fn axpy_slice(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// `y[r] = sum_c m[r][c] x[c]`, `m` row-major `rows x cols`.
fn matvec(m: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y[c] += sum_r m[r][c] g[r]`.
fn matvec_t_acc(m: &[f64], g: &[f64], y: &mut [f64]) {
    let cols = y.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (c, yc) in y.iter_mut().enumerate() {
            *yc += m[r * cols + c] * gr;
        }
    }
}

/// `dm[r][c] += g[r] x[c]`.
fn outer_acc(dm: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (c, xc) in x.iter().enumerate() {
            dm[r * cols + c] += gr * xc;
        }
    }
}

#[derive(Debug, Clone)]
struct ExprCache {
    ids: Vec<usize>,
    z: Vec<f64>,
    /// `[t][p * c + j]`.
    x: Vec<Vec<f64>>,
    /// `[i][d]`.
    h: Vec<Vec<f64>>,
    /// `[i][j]`, raw kernels.
    k: Vec<Vec<f64>>,
    /// `[i][j]`, `k / sqrt(|k|^2 + KERNEL_EPS)`.
    kn: Vec<Vec<f64>>,
    /// `[i][t][p]`.
    m: Vec<Vec<Vec<f64>>>,
}

/// Activations needed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    frames: usize,
    in_hw: (usize, usize),
    mid_hw: (usize, usize),
    feat_hw: (usize, usize),
    input: Vec<Vec<f64>>,
    a1: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    long: ExprCache,
    short: Option<ExprCache>,
    /// `[i][t]`, `u = A g`.
    score_u: Vec<Vec<Vec<f64>>>,
    /// `[i][t][w]`, softmax of `E u` over embedding rows.
    score_pi: Vec<Vec<Vec<f64>>>,
    /// `[i][t]`, long mask mass `sum_p m`.
    mass: Vec<Vec<f64>>,
    /// `[i][t][j]`, mask-pooled centred visual features.
    pooled: Vec<Vec<Vec<f64>>>,
    /// `[t][j]`, per-channel frame mean of the visual features.
    fmean: Vec<Vec<f64>>,
    /// `[i][t]`.
    scores: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.feat_hw
    }

    pub fn has_short(&self) -> bool {
        self.short.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub predictions: Vec<QuerySequencePrediction>,
    /// Visual features `f_t` per frame.
    pub features: Vec<FeatureMap>,
    /// Visual-encoder calls made by this pass.
    pub encoder_invocations: usize,
    pub cache: ForwardCache,
}

/// Upstream gradients of a scalar objective with respect to model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    /// `[i][t]`.
    pub scores: Vec<Vec<f64>>,
    /// `[i][t][p]`.
    pub long: Vec<Vec<Vec<f64>>>,
    pub short: Option<Vec<Vec<Vec<f64>>>>,
    /// `[t]`, each `c * h * w` in channel-major order.
    pub features: Vec<Vec<f64>>,
}

impl OutputGrads {
    pub fn zeros(cache: &ForwardCache) -> Self {
        let n = cache.scores.len();
        let t = cache.frames;
        let p = cache.feat_hw.0 * cache.feat_hw.1;
        let masks = vec![vec![vec![0.0; p]; t]; n];
        Self {
            scores: vec![vec![0.0; t]; n],
            long: masks.clone(),
            short: cache.short.as_ref().map(|_| masks),
            features: cache.f.iter().map(|f| vec![0.0; f.len()]).collect(),
        }
    }
}

fn frame_input(frame: &RgbImage) -> Vec<f64> {
    let (h, w) = frame.shape();
    let mut out = vec![0.0; 3 * h * w];
    for (p, px) in frame.pixels().iter().enumerate() {
        for ch in 0..3 {
            out[ch * h * w + p] = px[ch] - 0.5;
        }
    }
    out
}

fn encode_text(params: &ToyParams, cfg: &ToyConfig, ids: &[usize]) -> Vec<f64> {
    let d = cfg.hidden_dim;
    let emb = params.get(EMBED);
    let mut z = vec![0.0; d];
    for &id in ids {
        z.iter_mut()
            .zip(&emb[id * d..(id + 1) * d])
            .for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / ids.len() as f64;
    z.iter_mut().for_each(|v| *v *= inv);
    z
}

fn expr_forward(params: &ToyParams, cfg: &ToyConfig, expr: &TextExpression, f: &[Vec<f64>], npix: usize) -> Result<ExprCache> {
    if expr.is_empty() {
        return Err(Error::invalid("empty expression"));
    }
    let (c, d, n) = (cfg.feature_channels, cfg.hidden_dim, cfg.num_queries);
    let ids = cfg.token_ids(expr);
    let z = encode_text(params, cfg, &ids);

    let mut u = matvec(params.get(FUSE_WT), &z, c);
    u.iter_mut().zip(params.get(FUSE_B)).for_each(|(a, b)| *a += b);
    let wv = params.get(FUSE_WV);
    let x: Vec<Vec<f64>> = f
        .iter()
        .map(|ft| {
            let mut xt = vec![0.0; npix * c];
            for p in 0..npix {
                let out = &mut xt[p * c..(p + 1) * c];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = u[j];
                    let row = &wv[j * c..(j + 1) * c];
                    for (i, wji) in row.iter().enumerate() {
                        acc += wji * ft[i * npix + p];
                    }
                    *o = acc.tanh();
                }
            }
            xt
        })
        .collect();

    let wz_z = matvec(params.get(HEAD_WZ), &z, d);
    let q = params.get(QUERY);
    let mut h = Vec::with_capacity(n);
    let mut k = Vec::with_capacity(n);
    for i in 0..n {
        let mut hi = matvec(params.get(HEAD_WQ), &q[i * d..(i + 1) * d], d);
        for (a, (b, bias)) in hi.iter_mut().zip(wz_z.iter().zip(params.get(HEAD_B))) {
            *a = (*a + b + bias).tanh();
        }
        let mut ki = matvec(params.get(KERNEL_W), &hi, c);
        ki.iter_mut().zip(params.get(KERNEL_B)).for_each(|(a, b)| *a += b);
        h.push(hi);
        k.push(ki);
    }

    let kn: Vec<Vec<f64>> = k
        .iter()
        .map(|ki| {
            let r = (dot(ki, ki) + KERNEL_EPS).sqrt();
            ki.iter().map(|v| v / r).collect()
        })
        .collect();
    let bm = params.get(MASK_B)[0];
    let m = kn
        .iter()
        .map(|ki| {
            x.iter()
                .map(|xt| {
                    (0..npix)
                        .map(|p| {
                            let dot: f64 = xt[p * c..(p + 1) * c].iter().zip(ki).map(|(a, b)| a * b).sum();
                            sigmoid(MASK_GAIN * dot + bm)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ExprCache { ids, z, x, h, k, kn, m })
}

fn to_masks(m: &[Vec<f64>], fh: usize, fw: usize) -> Result<Vec<ProbMask>> {
    m.iter().map(|mt| ProbMask::new(fh, fw, mt.clone())).collect()
}

/// Runs the model on `frames`. Visual features are computed once per frame
/// and shared by both expressions.
pub fn forward(
    params: &ToyParams,
    cfg: &ToyConfig,
    frames: &[RgbImage],
    long: &TextExpression,
    short: Option<&TextExpression>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let expected = layout(cfg);
    if params.tensors.len() != expected.len()
        || params.tensors.iter().zip(&expected).any(|(t, (_, s, _))| &t.shape != s)
    {
        return Err(Error::invalid("parameters do not match the model configuration"));
    }
    let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
    let (hh, ww) = first.shape();
    if let Some(f) = frames.iter().find(|f| f.shape() != (hh, ww)) {
        return Err(Error::shape("forward frames", (hh, ww), f.shape()));
    }
    let (fh, fw) = cfg.feature_size(hh, ww)?;
    let (s1, s2) = cfg.strides();
    let c = cfg.feature_channels;
    let npix = fh * fw;

    let mut input = Vec::with_capacity(frames.len());
    let mut a1s = Vec::with_capacity(frames.len());
    let mut fs = Vec::with_capacity(frames.len());
    let mut mid_hw = (0, 0);
    for frame in frames {
        let inp = frame_input(frame);
        let (mut a1, h1, w1) = conv3x3(&inp, 3, hh, ww, params.get(CONV1_W), params.get(CONV1_B), c, s1);
        tanh_in_place(&mut a1);
        let (mut f, _, _) = conv3x3(&a1, c, h1, w1, params.get(CONV2_W), params.get(CONV2_B), c, s2);
        tanh_in_place(&mut f);
        mid_hw = (h1, w1);
        input.push(inp);
        a1s.push(a1);
        fs.push(f);
    }
    let encoder_invocations = frames.len();

    let long_c = expr_forward(params, cfg, long, &fs, npix)?;
    let short_c = short
        .map(|s| expr_forward(params, cfg, s, &fs, npix))
        .transpose()?;

    let a = params.get(SCORE_W);
    let table = params.get(EMBED);
    let d = cfg.hidden_dim;
    let rows = table.len() / d;
    let fmean: Vec<Vec<f64>> = fs
        .iter()
        .map(|ft| {
            (0..c)
                .map(|j| ft[j * npix..(j + 1) * npix].iter().sum::<f64>() / npix as f64)
                .collect()
        })
        .collect();
    let mut mass = vec![vec![0.0; frames.len()]; cfg.num_queries];
    let mut pooled = vec![vec![vec![0.0; c]; frames.len()]; cfg.num_queries];
    let mut scores = vec![vec![0.0; frames.len()]; cfg.num_queries];
    let mut score_u = vec![vec![Vec::new(); frames.len()]; cfg.num_queries];
    let mut score_pi = vec![vec![Vec::new(); frames.len()]; cfg.num_queries];
    for i in 0..cfg.num_queries {
        for (t, ft) in fs.iter().enumerate() {
            let m = &long_c.m[i][t];
            let sum: f64 = m.iter().sum();
            let gc: Vec<f64> = (0..c)
                .map(|j| {
                    let plane = &ft[j * npix..(j + 1) * npix];
                    let mu = fmean[t][j];
                    plane.iter().zip(m).map(|(f, w)| (f - mu) * w).sum::<f64>() / (sum + 1.0)
                })
                .collect();
            let u = matvec(a, &gc, d);
            let sw: Vec<f64> = (0..rows).map(|w| dot(&table[w * d..(w + 1) * d], &u)).collect();
            let top = sw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = sw.iter().map(|v| (v - top).exp()).collect();
            let total: f64 = ex.iter().sum();
            let lse = top + total.ln();
            let logit = SCORE_GAIN * (dot(&long_c.z, &u) - lse + (rows as f64).ln());
            scores[i][t] = sigmoid(logit);
            score_u[i][t] = u;
            score_pi[i][t] = ex.iter().map(|v| v / total).collect();
            mass[i][t] = sum;
            pooled[i][t] = gc;
        }
    }

    let predictions = (0..cfg.num_queries)
        .map(|i| {
            Ok(QuerySequencePrediction {
                query_index: i,
                scores: scores[i].clone(),
                long: to_masks(&long_c.m[i], fh, fw)?,
                short: short_c.as_ref().map(|s| to_masks(&s.m[i], fh, fw)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let features = fs
        .iter()
        .map(|f| FeatureMap::new(c, fh, fw, f.clone()))
        .collect::<Result<Vec<_>>>()?;

    Ok(ForwardOutput {
        predictions,
        features,
        encoder_invocations,
        cache: ForwardCache {
            version: params.version,
            frames: frames.len(),
            in_hw: (hh, ww),
            mid_hw,
            feat_hw: (fh, fw),
            input,
            a1: a1s,
            f: fs,
            long: long_c,
            short: short_c,
            score_u,
            score_pi,
            mass,
            pooled,
            fmean,
            scores,
        },
    })
}

/// Backward through one expression's fusion and mask head, given the
/// gradient `gm` with respect to its masks.
fn expr_backward(
    params: &ToyParams,
    cfg: &ToyConfig,
    e: &ExprCache,
    gm: &[Vec<Vec<f64>>],
    f: &[Vec<f64>],
    grads: &mut ToyParams,
    df: &mut [Vec<f64>],
) {
    let (c, d, n) = (cfg.feature_channels, cfg.hidden_dim, cfg.num_queries);
    let npix = f[0].len() / c;
    let mut dkn = vec![vec![0.0; c]; n];
    let mut dh = vec![vec![0.0; d]; n];
    let mut dx = vec![vec![0.0; npix * c]; f.len()];

    let mut dbm = 0.0;
    for i in 0..n {
        for (t, xt) in e.x.iter().enumerate() {
            let (m, g) = (&e.m[i][t], &gm[i][t]);
            let dxt = &mut dx[t];
            for p in 0..npix {
                let dl = g[p] * m[p] * (1.0 - m[p]);
                if dl == 0.0 {
                    continue;
                }
                dbm += dl;
                let xp = &xt[p * c..(p + 1) * c];
                let dg = dl * MASK_GAIN;
                for j in 0..c {
                    dkn[i][j] += dg * xp[j];
                    dxt[p * c + j] += dg * e.kn[i][j];
                }
            }
        }
    }
    grads.get_mut(MASK_B)[0] += dbm;

    // k_hat = k / r: dk = (dk_hat - k_hat (k_hat . dk_hat)) / r
    let dk: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = (dot(&e.k[i], &e.k[i]) + KERNEL_EPS).sqrt();
            let proj = dot(&e.kn[i], &dkn[i]);
            (0..c).map(|j| (dkn[i][j] - e.kn[i][j] * proj) / r).collect()
        })
        .collect();

    // kernel = Wk h + bk
    let mut dz = vec![0.0; d];
    let q = params.get(QUERY);
    for i in 0..n {
        outer_acc(grads.get_mut(KERNEL_W), &dk[i], &e.h[i]);
        grads.get_mut(KERNEL_B).iter_mut().zip(&dk[i]).for_each(|(a, b)| *a += b);
        matvec_t_acc(params.get(KERNEL_W), &dk[i], &mut dh[i]);
        // h = tanh(Wq q + Wz z + bh)
        let da: Vec<f64> = dh[i].iter().zip(&e.h[i]).map(|(g, h)| g * (1.0 - h * h)).collect();
        outer_acc(grads.get_mut(HEAD_WQ), &da, &q[i * d..(i + 1) * d]);
        outer_acc(grads.get_mut(HEAD_WZ), &da, &e.z);
        grads.get_mut(HEAD_B).iter_mut().zip(&da).for_each(|(a, b)| *a += b);
        let mut dq = vec![0.0; d];
        matvec_t_acc(params.get(HEAD_WQ), &da, &mut dq);
        grads.get_mut(QUERY)[i * d..(i + 1) * d]
            .iter_mut()
            .zip(&dq)
            .for_each(|(a, b)| *a += b);
        matvec_t_acc(params.get(HEAD_WZ), &da, &mut dz);
    }

    // x = tanh(Wv f + Wt z + bf)
    let wv = params.get(FUSE_WV);
    let mut du = vec![0.0; c];
    let mut dwv = vec![0.0; c * c];
    for (t, xt) in e.x.iter().enumerate() {
        let ft = &f[t];
        let dft = &mut df[t];
        for p in 0..npix {
            for j in 0..c {
                let xv = xt[p * c + j];
                let dpre = dx[t][p * c + j] * (1.0 - xv * xv);
                if dpre == 0.0 {
                    continue;
                }
                du[j] += dpre;
                for i in 0..c {
                    dwv[j * c + i] += dpre * ft[i * npix + p];
                    dft[i * npix + p] += dpre * wv[j * c + i];
                }
            }
        }
    }
    grads.get_mut(FUSE_WV).iter_mut().zip(&dwv).for_each(|(a, b)| *a += b);
    outer_acc(grads.get_mut(FUSE_WT), &du, &e.z);
    grads.get_mut(FUSE_B).iter_mut().zip(&du).for_each(|(a, b)| *a += b);
    matvec_t_acc(params.get(FUSE_WT), &du, &mut dz);

    // z = mean of embedding rows
    let inv = 1.0 / e.ids.len() as f64;
    let demb = grads.get_mut(EMBED);
    for &id in &e.ids {
        demb[id * d..(id + 1) * d]
            .iter_mut()
            .zip(&dz)
            .for_each(|(a, b)| *a += b * inv);
    }
}

/// Exact parameter gradients of a scalar objective whose output gradients are `g`.
pub fn backward(
    params: &ToyParams,
    cfg: &ToyConfig,
    cache: &ForwardCache,
    g: &OutputGrads,
) -> Result<ToyParams> {
    if cache.version != params.version {
        return Err(Error::StaleCache(format!(
            "cache was built for parameter version {}, parameters are at version {}",
            cache.version, params.version
        )));
    }
    let (c, d, n) = (cfg.feature_channels, cfg.hidden_dim, cfg.num_queries);
    let t_len = cache.frames;
    let npix = cache.feat_hw.0 * cache.feat_hw.1;
    if g.scores.len() != n
        || g.long.len() != n
        || g.features.len() != t_len
        || g.short.is_some() != cache.short.is_some()
    {
        return Err(Error::invalid("output gradients do not match the forward pass"));
    }
    let mask_ok = |m: &Vec<Vec<Vec<f64>>>| {
        m.len() == n && m.iter().all(|q| q.len() == t_len && q.iter().all(|v| v.len() == npix))
    };
    if !mask_ok(&g.long)
        || !g.short.as_ref().map_or(true, mask_ok)
        || g.scores.iter().any(|s| s.len() != t_len)
        || g.features.iter().any(|f| f.len() != c * npix)
    {
        return Err(Error::invalid("output gradient shapes do not match the forward pass"));
    }

    let mut grads = params.zeros_like();
    let mut df: Vec<Vec<f64>> = g.features.clone();

    // score head: long expression, pooled under each query's long mask
    let long = &cache.long;
    let a = params.get(SCORE_W);
    let table = params.get(EMBED);
    let mut gm_long = g.long.clone();
    let mut dz = vec![0.0; d];
    for i in 0..n {
        for t in 0..t_len {
            let s = cache.scores[i][t];
            let dl = g.scores[i][t] * s * (1.0 - s) * SCORE_GAIN;
            if dl == 0.0 {
                continue;
            }
            let pooled = &cache.pooled[i][t];
            let mean = &cache.fmean[t];
            let (u, pi) = (&cache.score_u[i][t], &cache.score_pi[i][t]);
            // du = z - E^T pi
            let mut du: Vec<f64> = long.z.iter().map(|z| dl * z).collect();
            {
                let de = grads.get_mut(EMBED);
                for (w, &pw) in pi.iter().enumerate() {
                    let row = &table[w * d..(w + 1) * d];
                    for k in 0..d {
                        du[k] -= dl * pw * row[k];
                        de[w * d + k] -= dl * pw * u[k];
                    }
                }
            }
            dz.iter_mut().zip(u).for_each(|(a, b)| *a += dl * b);
            outer_acc(grads.get_mut(SCORE_W), &du, pooled);
            let mut dgc = vec![0.0; c];
            matvec_t_acc(a, &du, &mut dgc);
            // gc_j = N_j / (S + 1), N_j = sum_p m_p (f_pj - mean_j)
            let mass = cache.mass[i][t];
            let dn: Vec<f64> = dgc.iter().map(|v| v / (mass + 1.0)).collect();
            let ds: f64 = -dn.iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>();
            let (ft, m, dft, dm) = (&cache.f[t], &long.m[i][t], &mut df[t], &mut gm_long[i][t]);
            for j in 0..c {
                let plane = &ft[j * npix..(j + 1) * npix];
                let dplane = &mut dft[j * npix..(j + 1) * npix];
                let via_mean = mass * dn[j] / npix as f64;
                for p in 0..npix {
                    dm[p] += dn[j] * (plane[p] - mean[j]);
                    dplane[p] += dn[j] * m[p] - via_mean;
                }
            }
            dm.iter_mut().for_each(|v| *v += ds);
        }
    }
    let inv = 1.0 / long.ids.len() as f64;
    for &id in &long.ids {
        grads.get_mut(EMBED)[id * d..(id + 1) * d]
            .iter_mut()
            .zip(&dz)
            .for_each(|(e, v)| *e += v * inv);
    }
    expr_backward(params, cfg, long, &gm_long, &cache.f, &mut grads, &mut df);
    if let (Some(short), Some(gs)) = (&cache.short, &g.short) {
        expr_backward(params, cfg, short, gs, &cache.f, &mut grads, &mut df);
    }

    // visual encoder
    let (s1, s2) = cfg.strides();
    let (hh, ww) = cache.in_hw;
    let (h1, w1) = cache.mid_hw;
    for t in 0..t_len {
        let f = &cache.f[t];
        let dpre2: Vec<f64> = df[t].iter().zip(f).map(|(g, v)| g * (1.0 - v * v)).collect();
        let a1 = &cache.a1[t];
        let mut da1 = vec![0.0; a1.len()];
        let (gw2, gb2) = two_mut(&mut grads, CONV2_W, CONV2_B);
        conv3x3_backward(a1, c, h1, w1, params.get(CONV2_W), c, s2, &dpre2, gw2, gb2, Some(&mut da1));
        let dpre1: Vec<f64> = da1.iter().zip(a1).map(|(g, v)| g * (1.0 - v * v)).collect();
        let (gw1, gb1) = two_mut(&mut grads, CONV1_W, CONV1_B);
        conv3x3_backward(&cache.input[t], 3, hh, ww, params.get(CONV1_W), c, s1, &dpre1, gw1, gb1, None);
    }
    Ok(grads)
}

fn two_mut(p: &mut ToyParams, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = p.tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{pos_tag, tokenize};

    fn expr(s: &str) -> TextExpression {
        pos_tag(&tokenize(s)).unwrap()
    }

    fn small() -> ToyConfig {
        ToyConfig {
            num_queries: 2,
            hidden_dim: 6,
            feature_channels: 4,
            feature_stride: 2,
            ..ToyConfig::default()
        }
    }

    fn frames(n: usize, seed: u64) -> Vec<RgbImage> {
        let mut rng = named_rng(seed, "frames");
        (0..n)
            .map(|_| RgbImage::new(8, 8, (0..64).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap())
            .collect()
    }

    #[test]
    fn same_expression_gives_identical_masks() {
        let cfg = small();
        let p = ToyParams::init(&cfg).unwrap();
        let e = expr("a red square");
        let out = forward(&p, &cfg, &frames(2, 1), &e, Some(&e)).unwrap();
        for y in &out.predictions {
            assert_eq!(&y.long, y.short.as_ref().unwrap());
        }
    }

    #[test]
    fn zero_params_give_half_everywhere() {
        let cfg = small();
        let p = ToyParams::zeros(&cfg).unwrap();
        let out = forward(&p, &cfg, &frames(2, 1), &expr("a red square is still"), None).unwrap();
        for y in &out.predictions {
            assert!(y.scores.iter().all(|&s| s == 0.5));
            assert!(y.long.iter().all(|m| m.values().iter().all(|&v| v == 0.5)));
        }
    }

    #[test]
    fn frame_permutation_permutes_outputs() {
        let cfg = small();
        let p = ToyParams::init(&cfg).unwrap();
        let fr = frames(3, 2);
        let rev: Vec<RgbImage> = fr.iter().rev().cloned().collect();
        let e = expr("a blue circle is moving up");
        let a = forward(&p, &cfg, &fr, &e, None).unwrap();
        let b = forward(&p, &cfg, &rev, &e, None).unwrap();
        for (ya, yb) in a.predictions.iter().zip(&b.predictions) {
            for t in 0..3 {
                assert_eq!(ya.long[t], yb.long[2 - t]);
                assert_eq!(ya.scores[t], yb.scores[2 - t]);
            }
        }
    }

    #[test]
    fn encoder_runs_once_per_frame() {
        let cfg = small();
        let p = ToyParams::init(&cfg).unwrap();
        let fr = frames(4, 3);
        let one = forward(&p, &cfg, &fr, &expr("a red square is still"), None).unwrap();
        let two = forward(&p, &cfg, &fr, &expr("a red square is still"), Some(&expr("a red square"))).unwrap();
        assert_eq!(one.encoder_invocations, 4);
        assert_eq!(two.encoder_invocations, 4);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small();
        let p = ToyParams::init(&cfg).unwrap();
        let out = forward(&p, &cfg, &frames(2, 4), &expr("a red square is still"), Some(&expr("a red square"))).unwrap();
        let g = backward(&p, &cfg, &out.cache, &OutputGrads::zeros(&out.cache)).unwrap();
        assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = small();
        let mut p = ToyParams::init(&cfg).unwrap();
        let out = forward(&p, &cfg, &frames(1, 4), &expr("a red square"), None).unwrap();
        p.tensor_mut(MASK_B).data[0] += 1.0;
        let err = backward(&p, &cfg, &out.cache, &OutputGrads::zeros(&out.cache)).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)));
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let cfg = small();
        assert_eq!(ToyParams::init(&cfg).unwrap(), ToyParams::init(&cfg).unwrap());
        let other = ToyConfig { seed: 9, ..small() };
        assert_ne!(ToyParams::init(&cfg).unwrap(), ToyParams::init(&other).unwrap());
        let p = ToyParams::init(&cfg).unwrap();
        let b = 1.0 / 27f64.sqrt();
        assert!(p.get(CONV1_W).iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = small();
        let p = ToyParams::init(&cfg).unwrap();
        let bytes = p.encode();
        let path = Path::new("ckpt");
        assert_eq!(ToyParams::decode(&bytes, &cfg, path).unwrap(), p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ToyParams::decode(&bad, &cfg, path), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            ToyParams::decode(&bytes[..bytes.len() - 3], &cfg, path),
            Err(Error::Format { .. })
        ));
        let bigger = ToyConfig { hidden_dim: 7, ..small() };
        assert!(ToyParams::decode(&bytes, &bigger, path).is_err());
    }

    #[test]
    fn unknown_words_use_the_last_row() {
        let cfg = small();
        let ids = cfg.token_ids(&expr("a zebra"));
        assert_eq!(ids, vec![0, cfg.vocab.len()]);
    }

    #[test]
    fn stride_must_divide_frame() {
        let cfg = ToyConfig { feature_stride: 4, ..small() };
        let p = ToyParams::init(&cfg).unwrap();
        let fr = vec![RgbImage::new(6, 8, vec![[0.0; 3]; 48]).unwrap()];
        assert!(forward(&p, &cfg, &fr, &expr("a red square"), None).is_err());
    }
}
