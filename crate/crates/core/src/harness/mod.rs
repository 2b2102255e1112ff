//! Experiment orchestration: configs, the paired baseline/ghost study, the
//! barrier-bypass certificate, persistence and plots.

pub mod bypass;
pub mod config;
pub mod plots;
pub mod report;
pub mod selftest;
pub mod study;

pub use bypass::{bypass_demo, verify_path_certificate, BypassDemo, PathCertificate, PathPoint, Verdict, Violation};
pub use config::{DiagConfig, KvFile, StudyConfig};
pub use plots::{emit_plots, PlotSet};
pub use report::{emit_csv, parse_csv, read_study_dir, write_study_dir, EpochRow, CSV_HEADER};
pub use study::{run_study, ArmSeries, RunResult, StudyReport, StudySummary};
