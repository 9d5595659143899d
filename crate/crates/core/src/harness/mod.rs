//! Training loop, evaluation driver, checkpoints and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod probe;
pub mod train;

pub use ablation::{ablation_variants, run_ablation, AblationReport, AblationRow, AblationSuite};
pub use checkpoint::{Checkpoint, Models};
pub use config::{DataConfig, EstimatorKind, FlowConfig, GanConfig, OptimizerConfig, PerceptualConfig, TrainConfig};
pub use data::{load_pairs, make_batch, Batch, Split};
pub use eval::{evaluate_split, infer_raw, run_gcm, run_pair, SplitEval, TruthMetrics};
pub use probe::{marker_centroid, marker_scene, marker_shift, MarkerProbe};
pub use train::{fit, fit_with, init_models, FitOutput, StepReport, Trainer};
