//! Semantic segmentation of multispectral point clouds with sparse labels.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`pointcloud`]: the cloud data model, CSV/binary I/O, and a seeded
//!   synthetic scene generator with long-tailed class counts.
//! - [`sampling`]: grid-balanced sampling (grid sparsification,
//!   category-balanced centroid selection, k-NN sample extraction) plus the
//!   random-sampling baseline and evaluation masks.
//! - [`tensor`]: a dense 2-D tensor core with a reverse-mode gradient tape,
//!   providing exactly the operators the network and losses need.
//! - [`network`]: the 5-level encoder-decoder feature aggregation network
//!   with multi-scale feature fusion skip connections.
//! - [`loss`]: the adaptive hybrid loss (per-resolution multi-scale loss,
//!   dual-head long-tailed loss, and their weighted combination).
//! - [`metrics`]: confusion-matrix accumulation and the reported metrics
//!   (OA, AA, kappa, mIoU, head/tail statistics).
//! - [`pipeline`]: the training loop, evaluation aggregation, ablation
//!   harness, and sampling-strategy comparison.

pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod pointcloud;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use loss::{ClassWeights, TailSet};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use network::{ModuleToggles, NetworkConfig, NetworkParams};
pub use pipeline::{RunConfig, RunLog, TrainConfig};
pub use pointcloud::{MultispectralPointCloud, SceneSpec, UNLABELED};
pub use sampling::{Centroid, GridIndex, Role, SampleSet};
pub use tensor::{Tape, TensorId};
