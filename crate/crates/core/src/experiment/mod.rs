//! Configuration, the interval loop, evaluation, checkpoints, metrics,
//! probes and plots.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod plots;
pub mod probe;
pub mod run;

pub use checkpoint::{Checkpoint, Manifest, Progress, Stage};
pub use config::{BaseConfig, EvalConfig, ExperimentConfig, LedgerConfig, Mode, OUTPUT_DIR_ENV};
pub use evaluate::{accuracy, evaluate, split_questions, EvalSettings};
pub use metrics::{check_stream, read_metrics, EvalScores, Event, MetricsRecord, MetricsWriter, Phase};
pub use plots::{emit_plots, PlotSummary};
pub use probe::{probe_command, train_paradigm, MatchedRun, Paradigm, ParadigmRun, ProbeKind};
pub use run::{base_policy, run, Observer, PhaseView, RunSummary, Trainer};
