//! Execution-mode switch for the data-parallel kernels.
//!
//! Every hot loop in the crate (voxelization, convolution, resampling) is
//! written against the two helpers below. With the `parallel` feature the
//! work runs on the rayon pool; without it the same code compiles to plain
//! sequential loops and rayon is not linked at all.
//!
//! Parallel results are bit-identical to sequential ones: tasks only ever
//! write disjoint output regions and all floating-point reductions happen
//! in a fixed sequential order inside one task.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Exec::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Exec::Sequential
    }
}

/// Map `0..n` through `f` and collect in index order.
pub fn map_collect<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len` slices of `buf`.
///
/// Chunks are disjoint, so the parallel and sequential paths write the same
/// bytes. `buf.len()` must be a multiple of `chunk_len`.
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk_len: usize, exec: Exec, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && buf.len().is_multiple_of(chunk_len));
    match exec {
        Exec::Sequential => {
            for (i, chunk) in buf.chunks_mut(chunk_len).enumerate() {
                f(i, chunk);
            }
        }
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            buf.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_collect_preserves_order() {
        let v = map_collect(8, Exec::default(), |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36, 49]);
    }

    #[test]
    fn chunked_writes_match_sequential() {
        let mut a = vec![0u64; 64];
        let mut b = vec![0u64; 64];
        for_each_chunk_mut(&mut a, 8, Exec::Sequential, |i, c| {
            c.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 8 + j) as u64)
        });
        for_each_chunk_mut(&mut b, 8, Exec::default(), |i, c| {
            c.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 8 + j) as u64)
        });
        assert_eq!(a, b);
    }
}
