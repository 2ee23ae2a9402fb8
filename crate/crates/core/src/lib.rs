//! Relational reasoning over cross-modality graphs.
//!
//! The crate models a matching problem between two instance sets ("modalities")
//! as three attributed graphs: one intra graph per modality capturing
//! within-modality relations, and a bipartite inter graph whose edges are the
//! candidate cross-modality pairs. A stack of graph-convolution units updates
//! node and edge attributes jointly; a decoder scores every inter-edge with a
//! probability, and training minimizes cross entropy against edge labels.
//!
//! Modules:
//! - [`tensor`]: dense 2-D tensors, reverse-mode autodiff, SGD, gradcheck.
//! - [`graph`]: node table, edge lists, bundle validation, serialization.
//! - [`build`]: graph constructors (KNN, top-K, social, bipartite) and
//!   file ingestion.
//! - [`net`]: the encoder / GCN-unit / decoder network itself.
//! - [`train`]: datasets, splits, the training loop and evaluation metrics.

pub mod build;
pub mod graph;
pub mod net;
pub mod tensor;
pub mod train;

pub use graph::{EdgeList, EdgeRole, GraphBundle, NodeTable};
pub use net::{ModelConfig, ModelParams};
pub use tensor::{Tape, Tensor};
