//! Fixtures shared by the benchmarks.

use losh::synth::generate;
use losh::{Difficulty, GenerateConfig, Sample};

/// One easy sample at the default 64x64, 5-frame size.
pub fn easy_sample(seed: u64) -> Sample {
    let cfg = GenerateConfig {
        count: 1,
        difficulty: Difficulty::Easy,
        ..Default::default()
    };
    generate(seed, &cfg).expect("valid config").remove(0)
}
