//! Generator pretraining and conditional training, evaluation and ablation.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod gan;
pub mod sc;

pub use ablation::{run_ablation_grid, AblationGrid, AblationReport, AblationSpec, AblationTable};
pub use config::TrainConfig;
pub use eval::{reconstruct, reconstruction_l1, evaluate_mean_baseline, evaluate_oracle, evaluate_reconstruction, mean_image, to_csv, EvalRow, CSV_HEADER};
pub use gan::{pretrain_generator, Discriminator, GanConfig, PretrainReport};
pub use sc::{model_for, train_step, StepContext, StepReport, StylePool, Trainer};
