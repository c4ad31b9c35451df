//! Everything around the network that turns it into an experiment: synthetic
//! labeled scenes, parameterized corruptions, detection-quality scoring, the
//! experiment configuration with its presets, append-only run logs, the
//! continual stream driver, and the single-channel ablation study.

pub mod ablation;
pub mod config;
pub mod corrupt;
pub mod eval;
pub mod metrics;
pub mod scene;
pub mod stream;

pub use ablation::{channel_ablation_study, evaluate_detector, AblationReport, AblationRow};
pub use config::{Condition, ExperimentConfig, Profile, StreamConfig};
pub use corrupt::{corrupt, CorruptionKind, MAX_SEVERITY};
pub use eval::{evaluate_map50, MapReport};
pub use metrics::{read_metrics, BatchRow, MetricsWriter, RunMeta, SummaryCell, SummaryTable};
pub use scene::{generate_source, BackgroundFamily, SceneSpec};
pub use stream::{
    build_target_sets, corrupt_set, direct_test, gamma_digest, run_continual, RunArtifacts,
    TargetSet,
};
