//! Synthetic garments, training instructions, the composite objective, the
//! training loop and dataset-level evaluation.

pub mod dataset;
pub mod eval;
pub mod loss;
pub mod synth;
pub mod train;

pub use synth::{generate_dataset, generate_pattern, generate_sample, parse_families, Family, SyntheticSpec};
pub use loss::{composite_loss, LossParts, LossWeights, Targets};
pub use train::{build_training_instruction, train, train_stitcher, TrainConfig, TrainError, TrainReport};
pub use eval::{evaluate_personalized, evaluate_standard, EvalError, StandardReport, TransferCase};
pub use dataset::{read_dataset, write_dataset, DatasetError};
