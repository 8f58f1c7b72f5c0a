//! Co-learning of representation and classifier for imbalanced
//! semi-supervised classification, on synthetic long-tailed vector data.
//!
//! The crate is organised bottom-up: [`datagen`] builds long-tailed splits,
//! [`sampling`] draws batches, [`nn`] holds the small MLP machinery,
//! [`ssl`] the pseudo-labeling losses, [`tfe`] the feature blending for the
//! classifier head, [`train`] the loop and baselines, and [`eval`] the
//! metrics and shifted-distribution sweeps.

pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod ssl;
pub mod tfe;
pub mod train;

pub use config::{Ablation, EncoderChoice, Mode, TrainConfig};
pub use datagen::{ClassDistribution, Dataset, ImbalanceSpec, MixtureSpec};
pub use error::{Error, Result};
pub use eval::{EvalResult, PcMode, PriorPair, SweepTable};
pub use nn::{Activation, AdamConfig, Checkpoint, EmaState, Encoder, Head, OptState, Params};
pub use sampling::{Batch, SamplerKind};
pub use ssl::{AugmentConfig, PseudoLabel};
pub use tfe::{BlendedBatch, TfeConfig, TfeFlags, TfePlan};
pub use train::{EpochMetrics, EvalModel, Phase, StepReport, TrainData, TrainOutcome, TrainState, Trainer};
