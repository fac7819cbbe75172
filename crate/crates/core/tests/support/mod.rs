#![allow(dead_code)]

pub mod matching;
pub mod metrics;
pub mod textures;
