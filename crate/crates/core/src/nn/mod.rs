//! From-scratch compensation network trained as a shared-weight pair.

pub mod adam;
pub mod mlp;
pub mod normalizer;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{displacement_loss, gradients, leaky_relu, DropoutMask, InputLayout, MlpModel};
pub use normalizer::Normalizer;
pub use train::{train, train_on_datasets, EpochRecord, TrainConfig, TrainOutcome};
