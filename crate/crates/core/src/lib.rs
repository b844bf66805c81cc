//! Unified scoring engine for membership inference and machine-generated
//! text detection over per-token sufficient-statistics traces.
//!
//! The crate is organised bottom-up:
//!
//! - [`traces`]: the data model and the `mint-trace` JSON Lines format;
//! - [`metrics`]: one scoring function per method, all oriented so that a
//!   higher score means H1 (member / machine generated);
//! - [`eval`]: AUROC, Spearman correlation, Jensen-Shannon distance,
//!   bootstrap intervals and method rankings;
//! - [`synth`]: synthetic trace sets with analytic ground truth;
//! - [`harness`]: batch scoring, evaluation and report files.

pub mod error;
pub mod eval;
pub mod harness;
pub mod method;
pub mod metrics;
pub mod synth;
pub mod traces;

pub use error::{Error, ErrorKind, Result};
pub use eval::{
    auroc, bootstrap_ci, js_distance, rank_methods, spearman, transfer_report, EvalResult,
    RankingMode, TransferReport, TransferRow,
};
pub use method::{Family, Method, MethodSpec, Params};
pub use metrics::{score, FrequencyTable, ScoreRecord, Scored};
pub use synth::{analytic_auroc_gaussian, brute_force_auroc, gen_traceset, SynthConfig};
pub use traces::{
    read_traces, validate_trace, write_traces, DocumentTrace, Field, Label, Task, TokenObservation,
    TraceReader, TraceSet, TraceWriter, Violation,
};
