//! Session-level PHQ-8 severity prediction from precomputed turn embeddings
//! and clinician-style feature scores: the predictor with cross-session
//! memory, its training recipe, a deterministic synthetic fixture
//! generator, and the evaluation/ablation harness.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
