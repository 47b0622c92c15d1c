//! Vector quantizers: k-means, product quantization with asymmetric
//! distance search, an inverted file over PQ codes, and 8-bit scalar
//! quantization.

mod ivf;
mod kmeans;
mod pq;
mod sq;

pub use ivf::{IvfConfig, IvfIndex};
pub use kmeans::{kmeans, nearest_centroid, KMeans};
pub use pq::{PqCodebook, PqConfig, PqIndex, PQ_CENTROIDS};
pub use sq::{SqIndex, SqParams};
