//! Plain-text `key = value` run configuration.
//!
//! Blank lines and anything after `#` are ignored. Every key is optional and
//! falls back to its default; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::losses::LossWeights;
use crate::model::ToyConfig;
use crate::train::TrainOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: LossWeights,
    pub flow: FlowParams,
    pub toy: ToyConfig,
    pub flow_radius: usize,
    pub fbc_normalize: bool,
    pub batch_size: usize,
    /// Training corpus root.
    pub data: Option<PathBuf>,
    /// Corpus used for periodic validation during training.
    pub eval_data: Option<PathBuf>,
    pub eval_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            weights: t.weights,
            flow: t.flow,
            toy: ToyConfig::default(),
            flow_radius: t.flow_radius,
            fbc_normalize: t.fbc_normalize,
            batch_size: t.batch_size,
            data: None,
            eval_data: None,
            eval_every: t.eval_every,
            out_dir: None,
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "lambda_cls",
    "lambda_seg",
    "lambda_lsi",
    "lambda_fbc",
    "epsilon",
    "tau",
    "focal_alpha",
    "focal_gamma",
    "dice_smooth",
    "pyramid_levels",
    "pyramid_scale",
    "window_size",
    "iterations",
    "poly_neighborhood",
    "poly_sigma",
    "num_queries",
    "hidden_dim",
    "feature_channels",
    "feature_stride",
    "vocab",
    "learning_rate",
    "steps",
    "seed",
    "clip_window",
    "flow_radius",
    "fbc_normalize",
    "batch_size",
    "data",
    "eval_data",
    "eval_every",
    "out_dir",
];

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("cannot parse `{v}` for `{key}`"),
    })
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let w = &mut self.weights;
        let f = &mut self.flow;
        let t = &mut self.toy;
        match key {
            "lambda_cls" => w.lambda_cls = num(line, key, v)?,
            "lambda_seg" => w.lambda_seg = num(line, key, v)?,
            "lambda_lsi" => w.lambda_lsi = num(line, key, v)?,
            "lambda_fbc" => w.lambda_fbc = num(line, key, v)?,
            "epsilon" => w.epsilon = num(line, key, v)?,
            "tau" => w.tau = num(line, key, v)?,
            "focal_alpha" => w.focal_alpha = num(line, key, v)?,
            "focal_gamma" => w.focal_gamma = num(line, key, v)?,
            "dice_smooth" => w.dice_smooth = num(line, key, v)?,
            "pyramid_levels" => f.pyramid_levels = num(line, key, v)?,
            "pyramid_scale" => f.pyramid_scale = num(line, key, v)?,
            "window_size" => f.window_size = num(line, key, v)?,
            "iterations" => f.iterations = num(line, key, v)?,
            "poly_neighborhood" => f.poly_neighborhood = num(line, key, v)?,
            "poly_sigma" => f.poly_sigma = num(line, key, v)?,
            "num_queries" => t.num_queries = num(line, key, v)?,
            "hidden_dim" => t.hidden_dim = num(line, key, v)?,
            "feature_channels" => t.feature_channels = num(line, key, v)?,
            "feature_stride" => t.feature_stride = num(line, key, v)?,
            "vocab" => {
                t.vocab = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_lowercase)
                    .collect()
            }
            "learning_rate" => t.learning_rate = num(line, key, v)?,
            "steps" => t.steps = num(line, key, v)?,
            "seed" => t.seed = num(line, key, v)?,
            "clip_window" => t.clip_window = num(line, key, v)?,
            "flow_radius" => self.flow_radius = num(line, key, v)?,
            "fbc_normalize" => self.fbc_normalize = num(line, key, v)?,
            "batch_size" => self.batch_size = num(line, key, v)?,
            "data" => self.data = path(v),
            "eval_data" => self.eval_data = path(v),
            "eval_every" => self.eval_every = num(line, key, v)?,
            "out_dir" => self.out_dir = path(v),
            _ => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        let w = &self.weights;
        let lambdas = [w.lambda_cls, w.lambda_seg, w.lambda_lsi, w.lambda_fbc];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(w.tau > 0.0 && w.tau < 1.0) {
            return Err(Error::invalid("tau must lie in (0, 1)"));
        }
        if !(w.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(0.0..=1.0).contains(&w.focal_alpha) || w.focal_gamma < 0.0 || w.dice_smooth < 0.0 {
            return Err(Error::invalid("focal/dice parameters out of range"));
        }
        if self.flow_radius == 0 {
            return Err(Error::invalid("flow_radius must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Training options for this config; the ablation is chosen separately.
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            weights: self.weights,
            flow: self.flow.clone(),
            flow_radius: self.flow_radius,
            fbc_normalize: self.fbc_normalize,
            eval_every: self.eval_every,
            batch_size: self.batch_size,
            ..TrainOptions::default()
        }
    }

    /// Writes every key, so the output fully records the run.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let f = &self.flow;
        let t = &self.toy;
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            w.lambda_cls.to_string(),
            w.lambda_seg.to_string(),
            w.lambda_lsi.to_string(),
            w.lambda_fbc.to_string(),
            w.epsilon.to_string(),
            w.tau.to_string(),
            w.focal_alpha.to_string(),
            w.focal_gamma.to_string(),
            w.dice_smooth.to_string(),
            f.pyramid_levels.to_string(),
            f.pyramid_scale.to_string(),
            f.window_size.to_string(),
            f.iterations.to_string(),
            f.poly_neighborhood.to_string(),
            f.poly_sigma.to_string(),
            t.num_queries.to_string(),
            t.hidden_dim.to_string(),
            t.feature_channels.to_string(),
            t.feature_stride.to_string(),
            t.vocab.join(","),
            t.learning_rate.to_string(),
            t.steps.to_string(),
            t.seed.to_string(),
            t.clip_window.to_string(),
            self.flow_radius.to_string(),
            self.fbc_normalize.to_string(),
            self.batch_size.to_string(),
            p(&self.data),
            p(&self.eval_data),
            self.eval_every.to_string(),
            p(&self.out_dir),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{body}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key `{k}`"),
                });
            }
            cfg.set(line, k, v)?;
            seen.push(k);
        }
        Ok(cfg)
    }
}
