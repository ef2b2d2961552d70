//! Label-noise robust training at desk scale.
//!
//! The pipeline trains a classifier on data with corrupted labels by
//! combining three mutually reinforcing pieces:
//!
//! 1. **Interpolated contrastive representation learning** ([`losses`],
//!    [`membank`]): a supervised contrastive loss over mixed two-view
//!    batches, with one mixing coefficient per view and the same convex
//!    combination imposed on the loss; a FIFO memory bank enlarges the
//!    positive/negative pool beyond the minibatch.
//! 2. **k-NN noise detection** ([`detect`]): soft labels voted by nearest
//!    neighbors in embedding space, a corrected re-vote, a cross-entropy
//!    disagreement score, and a per-class balanced clean-set selection.
//! 3. **Semi-supervised classification and clean-set fine-tuning**
//!    ([`train`]): detected-clean samples keep their labels, the rest take
//!    the model's own soft predictions; a final fine-tuning stage re-trains
//!    the classifier on the clean set with a bootstrapped mixup loss.
//!
//! Every stochastic choice derives from one seed through a documented,
//! fixed PRNG ([`rng`]), so runs are reproducible bit for bit.

pub mod cli;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod losses;
pub mod math;
pub mod membank;
pub mod model;
pub mod rng;
pub mod train;

pub use config::{ExperimentConfig, GenParams, NoiseKind};
pub use data::{AugmentConfig, Dataset, Split};
pub use detect::{BalanceStrategy, DetectionResult};
pub use error::{Error, Result};
pub use losses::{CombineMode, ContrastBatch, LossOut, MixedLabel};
pub use math::Matrix;
pub use membank::{MemoryBank, MemorySnapshot};
pub use model::{ForwardPass, LrSchedule, ModelDims, ModelParams, OptState};
pub use rng::Rng;
pub use train::{EpochMetrics, TrainConfig, TrainOutput};
