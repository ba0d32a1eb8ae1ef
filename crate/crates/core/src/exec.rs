//! Execution-mode plumbing for the data-parallel inner loops.
//!
//! All heavy loops (batch gradient computation, batched prediction, noise
//! generation) are expressed as a map over fixed-size index chunks followed by
//! an in-order reduction. The chunk decomposition depends only on the input
//! length, never on the thread count, so the sequential and parallel paths
//! produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::ops::Range;

/// How chunked loops are driven.
///
/// `Parallel` uses the rayon global pool when the `parallel` feature is
/// enabled; without the feature it degrades to sequential execution so that
/// callers never need feature-conditional code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Split `0..len` into consecutive ranges of at most `chunk` elements.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0, "chunk size must be positive");
    let mut out = Vec::with_capacity(len.div_ceil(chunk));
    let mut start = 0;
    while start < len {
        let end = (start + chunk).min(len);
        out.push(start..end);
        start = end;
    }
    out
}

/// Map `f` over the chunk ranges of `0..len`, returning outputs in chunk
/// order. The decomposition (and therefore the result) is independent of the
/// execution mode.
pub fn map_chunks<O, F>(mode: ExecMode, len: usize, chunk: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(Range<usize>) -> O + Sync + Send,
{
    let ranges = chunk_ranges(len, chunk);
    match mode {
        ExecMode::Sequential => ranges.into_iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => ranges.into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => ranges.into_iter().map(f).collect(),
    }
}

/// Run `f` over mutable chunks of `data`, passing each chunk's start offset.
/// Chunk boundaries depend only on `data.len()`, as in [`map_chunks`].
pub fn for_each_chunk_mut<T, F>(mode: ExecMode, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    match mode {
        ExecMode::Sequential => {
            for (i, c) in data.chunks_mut(chunk).enumerate() {
                f(i * chunk, c);
            }
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i * chunk, c));
        }
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => {
            for (i, c) in data.chunks_mut(chunk).enumerate() {
                f(i * chunk, c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_ranges_cover_input_exactly() {
        let ranges = chunk_ranges(10, 4);
        assert_eq!(ranges, vec![0..4, 4..8, 8..10]);
        assert!(chunk_ranges(0, 4).is_empty());
        assert_eq!(chunk_ranges(4, 4), vec![0..4]);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let seq = map_chunks(ExecMode::Sequential, 1000, 37, |r| {
            r.map(|i| (i as f32).sin()).sum::<f32>()
        });
        let par = map_chunks(ExecMode::Parallel, 1000, 37, |r| {
            r.map(|i| (i as f32).sin()).sum::<f32>()
        });
        assert_eq!(seq, par);
    }
}
