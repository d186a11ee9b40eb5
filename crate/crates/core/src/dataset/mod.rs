//! Ingestion of temporal QoS logs into a sparse tensor, summary statistics,
//! density-based train/test splits, isolation-forest outlier removal, and a
//! synthetic generator for desk-scale experiments.

mod iforest;
mod load;
mod split;
mod synth;
mod tensor;

pub use iforest::{isolation_forest_filter, score_all, OutlierReport};
pub use load::{load_qos_log, read_tensor_cache, write_tensor_cache};
pub use split::{split_train_test, SplitAssignment};
pub use synth::{synth_tensor, SynthData, SynthParams};
pub use tensor::{QosTensor, TensorSummary};
