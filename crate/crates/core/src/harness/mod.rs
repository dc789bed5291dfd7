//! Training loop, configuration, metrics, checkpoints and the scheduler suite.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod suite;
pub mod trainer;

pub use checkpoint::{checkpoint_config, load_checkpoint, save_checkpoint};
pub use config::{LearnerConfig, RunConfig, SchedulerKind};
pub use metrics::{read_metrics, MetricsEvent, MetricsSink};
pub use suite::{run_baseline_suite, SuiteAggregate, SuiteReport, SuiteRow};
pub use trainer::{read_corpus, run_training, FinalReport, Trainer, CORPUS_FILE};
