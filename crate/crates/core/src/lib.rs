//! Training engine for node regression/classification on graphs with
//! heterogeneous tabular node features.
//!
//! The crate combines two learners: gradient-boosted decision trees over the
//! raw tabular features, and message-passing neural networks over the graph.
//! They can run standalone (baselines), staged (`train_resgnn`), or jointly
//! end-to-end (`train_bgnn`), where each epoch's boosting round fits the
//! feature updates produced by the network's gradient steps.
//!
//! Module map:
//! - [`tensor`]: dense f64 matrices with a reverse-mode tape and optimizers.
//! - [`graph`]: immutable CSR graphs with symmetric normalization.
//! - [`features`]: tabular feature containers, targets, splits, encoding.
//! - [`gbdt`]: boosted multi-output regression trees with exact split search.
//! - [`gnn`]: GCN / GAT / AGNN / APPNP / FCNN models built on the tape.
//! - [`train`]: the joint training loop, the two-stage variant, prediction.
//! - [`data`]: dataset manifests, CSV IO, k-NN graph construction, synthetic
//!   fixture generation.

pub mod data;
pub mod error;
pub mod features;
pub mod gbdt;
pub mod gnn;
pub mod graph;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use tensor::Tensor;
