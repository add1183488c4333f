//! Comparison systems: Manhattan-distance profiles and LSTM classifiers.

pub mod lstm;
pub mod manhattan;
pub mod suite;

pub use lstm::{FrozenEncoder, InputMode, LstmClassifier, LstmConfig, StepSource};
pub use manhattan::{build_profiles, manhattan_classify, ManhattanProfile};
pub use suite::{run_baseline_suite, LstmSettings, RowResult, SuiteArtifacts, SuiteReport, SuiteRow};
