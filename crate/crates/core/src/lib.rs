//! Loss-landscape probing toolkit.
//!
//! * [`net`]: feed-forward networks with exact gradients and Jacobians.
//! * [`landscape`]: affine-map embeddings into ReLU MLPs and trapping runs.
//! * [`spectral`]: Hessian-vector products and extreme eigenvalues.
//! * [`ntk`]: empirical neural tangent kernel slices and change metrics.
//! * [`rank`]: conv/dense singular spectra, effective rank, rank clipping.
//! * [`train`]: SGD, schedules, regularizers, PGD attacks.
//! * [`data`]: CIFAR-10 binary loader, synthetic blobs, augmentation.

pub mod data;
pub mod error;
pub mod landscape;
pub mod linalg;
pub mod net;
pub mod ntk;
pub mod rank;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{ProbeError, Result};
pub use tensor::{Batch, Shape, Tensor};
