//! Deterministic data-parallel helpers.
//!
//! Every hot loop in this crate maps a fixed partition of work items to
//! per-chunk partial results and then folds the partials in chunk order.
//! Chunk boundaries depend only on the input length, never on the thread
//! count, so the parallel and sequential paths produce bit-identical
//! floating-point results. With the `parallel` feature disabled the same
//! chunking runs on one thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for chunked loops. `Auto` uses rayon when the `parallel`
/// feature is enabled; `Sequential` forces the single-threaded path (used by
/// the benchmark suite to compare the two).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Auto,
    Sequential,
}

/// Splits `0..n` into contiguous chunks of at most `chunk_size` items.
pub fn chunk_ranges(n: usize, chunk_size: usize) -> Vec<std::ops::Range<usize>> {
    assert!(chunk_size > 0, "chunk_size must be positive");
    (0..n)
        .step_by(chunk_size)
        .map(|start| start..usize::min(start + chunk_size, n))
        .collect()
}

/// Maps each index chunk to a partial result. Partials come back in chunk
/// order regardless of scheduling.
pub fn map_chunks<T, F>(n: usize, chunk_size: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n, chunk_size);
    match mode {
        ExecMode::Sequential => ranges.into_iter().map(f).collect(),
        ExecMode::Auto => run_auto(ranges, f),
    }
}

#[cfg(feature = "parallel")]
fn run_auto<T, F>(ranges: Vec<std::ops::Range<usize>>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    ranges.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_auto<T, F>(ranges: Vec<std::ops::Range<usize>>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    ranges.into_iter().map(f).collect()
}

/// Chunked map followed by an in-order fold. The fold runs sequentially so
/// floating-point accumulation order is fixed.
pub fn map_reduce_chunks<T, A, F, G>(
    n: usize,
    chunk_size: usize,
    mode: ExecMode,
    init: A,
    map: F,
    mut fold: G,
) -> A
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    G: FnMut(A, T) -> A,
{
    map_chunks(n, chunk_size, mode, map)
        .into_iter()
        .fold(init, |acc, t| fold(acc, t))
}

/// Default chunk size for consumer-level loops.
pub const CONSUMER_CHUNK: usize = 64;
