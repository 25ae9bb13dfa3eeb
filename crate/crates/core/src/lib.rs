//! Multi-marginal Monge maps learned with neural networks.
//!
//! Given a source distribution μ₁ and targets μ₂,…,μ_N, `mm-monge` trains one
//! MLP per target so that `T_h(X) ~ μ_h` for `X ~ μ₁`, while keeping a joint
//! transport cost `c(X, T₂(X), …, T_N(X))` small. The marginal constraints are
//! enforced softly through squared maximum mean discrepancy (MMD) penalties
//! with a Gaussian kernel.
//!
//! Module map:
//!
//! - [`tensor`], [`rng`]: dense row-major matrices and a seedable generator.
//! - [`kernel`], [`mmd`]: Gaussian kernel, Gram matrices and MMD² estimators.
//! - [`net`]: feed-forward networks with hand-written backprop, checkpoints.
//! - [`optim`]: SGD, Adagrad, RMSprop, Adam on flat parameter vectors.
//! - [`cost`]: chain and pairwise quadratic costs, barycenter samples.
//! - [`data`]: synthetic marginals and CSV sample I/O.
//! - [`train`]: penalized objective, training loop, evaluation reports.
//!
//! Heavy loops (GEMM, Gram rows) run on rayon when the `parallel` feature is
//! enabled. Work is always split into fixed-size row chunks and every
//! reduction runs in a fixed order, so results are bitwise identical for any
//! thread count.

pub mod cost;
pub mod data;
pub mod error;
pub mod kernel;
pub mod mmd;
pub mod net;
pub mod optim;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernel::KernelConfig;
pub use net::{MapEnsemble, MlpSpec};
pub use rng::Rng;
pub use tensor::Matrix2D;
pub use train::{TrainConfig, TrainReport};
