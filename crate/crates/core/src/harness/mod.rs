//! Synthetic data, PCK evaluation and experiment runners.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod pck;

pub use config::{ExperimentConfig, NoiseKind, NoiseSpec, SplitSpec};
pub use dataset::{category, load_dataset, save_dataset, synth_dataset, BBox, Category, Dataset, SceneSample, ShapeKind, IMAGE_SIZE};
pub use eval::{evaluate, parse_thresholds, prepare, write_metrics_csv, EvalSet, Evaluation, MetricsRow};
pub use pck::{chance_pck, pck, STANDARD_THRESHOLDS};
pub use experiments::{
    apply_noise, check_compatible, checkpoint_config, dataset_for, eval_checkpoint, run_ablation, run_noise_suite,
    splits, train_experiment, AblationRun, NoiseReport, TrainedModel, ABLATIONS,
};
pub use gradcheck::{gradcheck_module, GRADCHECK_MODULES};
