//! Statistical downscaling of gridded precipitation with stacked
//! super-resolution convolutional networks conditioned on elevation, plus the
//! BCSD and lasso-ASD baselines and the evaluation metrics used to compare them.

pub mod asd;
pub mod bcsd;
pub mod config;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod stack;
pub mod synth;
pub mod train;
