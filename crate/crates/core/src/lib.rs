//! Contrastive image-report alignment with dynamic soft labels built from
//! text, clinical-label and graph similarity, plus negation-based hard
//! negatives and the evaluation protocols that go with them.

pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph_builder;
pub mod metrics;
pub mod negation_forge;
pub mod numerics;
pub mod report_nlp;
pub mod seed;
pub mod soft_contrastive;
pub mod synth_corpus;
pub mod train;

pub use error::{Error, Result};
