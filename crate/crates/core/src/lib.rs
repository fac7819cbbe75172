//! Long-short text joint prediction for referring video object segmentation.

pub mod config;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod text;
pub mod train;
pub mod warp;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use flow::{clip_flows, clip_flows_opposite, farneback_flow, FlowParams};
pub use grid::{
    soft_area, soft_intersection, threshold_filter, BinaryMask, FeatureMap, FlowField, GrayImage,
    ProbMask, RgbImage, VideoClip,
};
pub use losses::LossWeights;
pub use metrics::{EvalFrame, EvalRecord, MeanIouMode, MetricReport, ScoredSample};
pub use model::{ToyConfig, ToyParams};
pub use synth::{Difficulty, GenerateConfig, Sample};
pub use matching::{
    final_loss, matching_cost, select_best, select_inference, GroundTruthSequence, MatchResult,
    QuerySequencePrediction,
};
pub use text::{pos_tag, shorten, tokenize, LongShortPair, PosTag, TextExpression};
pub use warp::{fbc_loss, warp, ConsistencyMode, NeighborFlows};
pub use train::{Ablation, TrainOptions, TrainOutcome};
