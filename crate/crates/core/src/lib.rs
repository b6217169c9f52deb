//! Masked pretraining over two-hand 2D pose sequences with a differentiable
//! hand-model decoder, plus fine-tuning for isolated sign classification.

pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod encoder;
pub mod finetune;
pub mod handmodel;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod numerics;
pub mod posedata;
pub mod synth;
