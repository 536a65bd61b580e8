//! Full and separable 3D convolutions over stereo cost volumes.
//!
//! The crate provides:
//! - [`tensor`]: dense `(c, d, h, w)` volumes, padding, permutation and the
//!   SV3D binary format;
//! - [`conv`]: forward and backward kernels for full 3D convolution and the
//!   FwSC, DwSC and FDwSC variants, plus transposed convolution;
//! - [`config`]: network descriptions, shape inference and variant substitution;
//! - [`cost`]: exact parameter and MAC counts;
//! - [`verify`]: independent oracles (instrumented loops, finite differences,
//!   composition identities);
//! - [`report`] and [`bench`]: profiler output and timing statistics.

pub mod bench;
pub mod config;
pub mod conv;
pub mod cost;
mod error;
pub mod network;
pub mod report;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};

/// Run `f` on a pool of `threads` workers. Without the `parallel` feature
/// every kernel is sequential and this just calls `f`.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Err(Error::validation("thread count must be >= 1"));
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::validation(format!("cannot build thread pool: {e}")))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    Ok(f())
}

/// Worker threads kernels will use from the current context.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}
