//! Parallel iteration with a serial fallback.
//!
//! With the `parallel` feature this re-exports the rayon traits the crate
//! uses. Without it, the same method names resolve to ordinary iterators so
//! the numeric code is written once.

#[cfg(feature = "parallel")]
pub(crate) use rayon::prelude::{IndexedParallelIterator, ParallelIterator, ParallelSliceMut};

#[cfg(not(feature = "parallel"))]
pub(crate) use self::fallback::*;

/// Environment variable that caps worker threads. Unset or `0` means serial.
pub const THREADS_ENV: &str = "MM_MONGE_THREADS";

#[cfg(not(feature = "parallel"))]
mod fallback {
    pub trait ParallelSliceMut<T> {
        fn par_chunks_mut(&mut self, size: usize) -> std::slice::ChunksMut<'_, T>;
    }

    impl<T> ParallelSliceMut<T> for [T] {
        fn par_chunks_mut(&mut self, size: usize) -> std::slice::ChunksMut<'_, T> {
            self.chunks_mut(size)
        }
    }

    /// `with_min_len` is a scheduling hint; serially it is the identity.
    pub trait IndexedParallelIterator: Iterator + Sized {
        fn with_min_len(self, _min: usize) -> Self {
            self
        }
    }

    impl<I: Iterator> IndexedParallelIterator for I {}
}

/// Thread cap read from [`THREADS_ENV`]; `0` when unset or unparsable.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Run `f` on a dedicated pool of `threads` workers (`0` = one worker).
///
/// All parallel kernels in this crate give the same bits for any pool size,
/// so the thread count only affects wall-clock time.
#[cfg(feature = "parallel")]
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    F: FnOnce() -> R + Send,
    R: Send,
{
    match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R, F>(_threads: usize, f: F) -> R
where
    F: FnOnce() -> R + Send,
    R: Send,
{
    f()
}
