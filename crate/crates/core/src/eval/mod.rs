//! Evaluation: retrieval and answer metrics, SNR context mixing and
//! hyperparameter sweeps.

pub mod metrics;
pub mod snr;
pub mod sweep;

use thiserror::Error;

pub use metrics::{
    evaluate, latency_report, pseudo_recall_at_k, recall_at_k, report_csv, vqa_accuracy,
    EvalRecord, MatchMode, MetricsReport, RetrievedItem,
};
pub use snr::mix_snr_context;
pub use sweep::{parse_grid, sweep, sweep_csv, SweepGrid, SweepRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("record {0} has neither gold_entity nor gold_section_id")]
    MissingGold(usize),
    #[error("no record carries timings")]
    NoTimings,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{pool} pool has {available} items, {needed} needed")]
    InsufficientPool {
        pool: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("no records to evaluate")]
    NoRecords,
    #[error("pipeline failure: {0}")]
    Pipeline(String),
}
