//! Two-stage retrieval, linear probing, finite-difference gradient checks
//! and the JSON reports built from them.

mod ablate;
mod gradcheck;
mod probe;
mod reports;
mod retrieval;

pub use ablate::{ablate, AblationReport, AblationRow};
pub use gradcheck::{gradcheck_inputs, gradcheck_seed, gradcheck_suite, GradcheckConfig, GradcheckReport, GradcheckRow};
pub use probe::{linear_probe, probe_data, ProbeConfig, ProbeReport};
pub use reports::{
    emit_reports, stop_gradient_suite, ReportOptions, ReportSummary, StopGradSuite, GRADCHECK_FILE, PROBE_FILE,
    RETRIEVAL_FILE, STOPGRAD_FILE,
};
pub use retrieval::{retrieval_eval, retrieval_eval_with, ModelScorer, PairScorer, Recall, RetrievalReport, RetrievalTrace};
