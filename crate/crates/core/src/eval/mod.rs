//! Evaluation: metrics, subject splits, label subsampling, probing and the
//! downstream scenarios.

pub mod hypnogram;
pub mod knn;
pub mod ledger;
pub mod metrics;
pub mod scenarios;
pub mod splits;
pub mod subsample;

pub use knn::{knn_predict, Pca};
pub use ledger::{append_ledger, read_ledger, upsert_ledger, LedgerRow};
pub use metrics::{metric_acc, metric_kappa, metric_mf1, Confusion, MetricsReport};
pub use splits::{make_splits, Fold, SplitPlan};
pub use subsample::{subsample, SubsampleReport};
