//! Benchmarks, experiments and reporting around the designer: a synthetic
//! task suite with an exact-match evaluator, fixed-topology baselines,
//! adversarial robustness runs, run configuration and DOT export.

mod bench;
mod config;
mod dot;
mod tasks;

pub use bench::{
    run_attack, run_baseline, run_designer, run_method, write_csv, BenchReport, BenchSettings,
    CategoryStats, MacpWeights, Method, TaskRun, CSV_HEADER,
};
pub use config::{
    AgentConfig, AggregateConfig, AttackConfig, BackendConfig, BackendKind, DimsConfig,
    EmbedderConfig, EmbedderKind, OutputConfig, RunConfig, SuiteConfig, SummarizerConfig,
};
pub use dot::{export_dot, to_dot};
pub use tasks::{evaluate, generate_suite, normalize, Category, SuiteCounts, SyntheticTask};
