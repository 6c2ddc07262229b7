//! Density-map cell detection: network, label rendering, center
//! extraction, scoring and a synthetic data generator.

pub mod annotation;
pub mod config;
pub mod density;
pub mod evaluate;
pub mod grid;
pub mod labelgen;
pub mod model;
pub mod postprocess;
pub mod synth;
pub mod tensor;
pub mod train;
