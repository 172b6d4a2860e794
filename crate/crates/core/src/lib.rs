//! Tensorized predictive models with automatic selection of decomposition
//! ranks.
//!
//! The crate trains models whose weight tensors are kept in decomposed form
//! (Tensor Train, Tucker-2, low-rank factorization) while learning relaxed
//! binary masks over the decomposition ranks. After training the masks are
//! rounded and the zeroed rank slices are cut out of the cores, producing a
//! strictly smaller model whose outputs are verified to match the masked
//! original.
//!
//! Module map:
//! - [`tensor`]: dense multidimensional arrays and the contraction products
//!   everything else is built from.
//! - [`autodiff`]: tape-based reverse-mode differentiation over tensors.
//! - [`decomp`]: decomposition containers, initializers and reconstruction.
//! - [`masks`]: rank masks, relaxed Bernoulli sampling, temperature schedule.
//! - [`layers`] / [`model`]: decomposed layers and the model container.
//! - [`trainer`]: the relaxed MAP objective, Adam, and the training loop.
//! - [`prune`]: rounding masks, slicing cores, equivalence verification.
//! - [`data`] / [`checkpoint`] / [`config`]: dataset ingestion, binary
//!   checkpoints, experiment configuration.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decomp;
mod error;
pub mod layers;
pub mod masks;
pub mod model;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::DenseTensor;

/// Pin the size of the global worker pool. Results do not depend on the
/// thread count (each output element has a fixed summation order); this
/// only controls parallelism.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Argument(format!("cannot size thread pool: {e}")))
}

/// Without the `parallel` feature every kernel is sequential; a request for
/// more than one thread is only noted.
#[cfg(not(feature = "parallel"))]
pub fn configure_threads(n: usize) -> Result<()> {
    if n > 1 {
        log::warn!("built without the `parallel` feature; running single-threaded");
    }
    Ok(())
}
