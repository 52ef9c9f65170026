//! Speaker-verification backend built around simplified Gaussian PLDA.
//!
//! The pipeline is: length normalization, optional LDA, length normalization
//! again, PLDA training (single- or multi-objective), two-covariance scoring,
//! optional symmetric score normalization, and detection metrics.



pub mod bench;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod plda;
pub mod preprocess;
pub mod scoring;

pub use corpus::{LabeledVectorSet, SpeakerGroup, SynthConfig, Trial, TrialLabel, TrialList};
pub use error::{Error, Result};
pub use metrics::{DcfParams, DetPoint};
pub use plda::{PldaModel, SelectionStrategy, TrainConfig, TrainingLog};
pub use preprocess::LdaTransform;
pub use scoring::{EnrollPooling, KernelMode, ScoreList, ScoringKernel};
