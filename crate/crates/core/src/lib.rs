//! Learned, neighborhood-preserving feature compression for approximate
//! nearest neighbor search, together with the search structures that consume
//! the compressed vectors.
//!
//! The crate is organized bottom-up:
//!
//! - [`dataio`]: fvecs/bvecs/ivecs readers and writers, query splits.
//! - [`tensor`]: a small dense-tensor library with tape-based reverse-mode
//!   differentiation and a finite-difference gradient checker.
//! - [`model`]: the compression network (projection bank, staged
//!   transformer encoders around an input-derived compression token, and the
//!   compression head) plus its checkpoint format.
//! - [`loss`]: the distance-weighted neighborhood preserving loss.
//! - [`train`]: AdamW, the polynomial learning-rate schedule and the
//!   training loop.
//! - [`hnsw`]: an HNSW graph that can be built in one vector space and
//!   searched in another.
//! - [`quant`]: k-means, product quantization, IVFADC and 8-bit scalar
//!   quantization.
//! - [`eval`]: ground truth, recall metrics, throughput and
//!   Johnson-Lindenstrauss diagnostics.
//! - [`pipeline`]: the command implementations behind the `ccst` binary.

pub mod codec;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod hnsw;
pub mod loss;
pub mod metric;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod synth;
pub mod tensor;
pub mod train;

pub use dataio::{NeighborLists, VectorDataset};
pub use error::{Error, Result};
pub use hnsw::{HnswConfig, HnswIndex};
pub use loss::LossConfig;
pub use model::{CcstModel, Mode, ModelConfig, ModelState};
pub use train::{TrainConfig, TrainReport};

