//! Execution strategy for data-parallel inner loops.
//!
//! With the `parallel` feature enabled, the helpers here run on the rayon
//! thread pool unless [`force_serial`] has switched execution to serial
//! (the CLI `--deterministic` flag does this). Without the feature, every
//! helper is a plain sequential loop and rayon is not linked at all.
//!
//! All call sites are written so that parallel and serial execution give
//! bit-identical results: ordered maps preserve item order, and reductions
//! either combine with order-independent operators (min) or fold fixed
//! 256-item chunks serially and then combine the per-chunk partials in
//! chunk order.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SERIAL: AtomicBool = AtomicBool::new(false);

/// Fixed chunk length for chunked reductions. Part of the numeric
/// contract: changing it changes summation trees and therefore outputs.
pub const CHUNK: usize = 256;

/// Forces serial execution at runtime (idempotent, process-global).
pub fn force_serial(on: bool) {
    FORCE_SERIAL.store(on, Ordering::SeqCst);
}

pub fn serial_forced() -> bool {
    FORCE_SERIAL.load(Ordering::SeqCst)
}

#[cfg(feature = "parallel")]
fn parallel_active() -> bool {
    !serial_forced()
}

/// Ordered map over a slice.
pub fn map_slice<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Ordered map over an index range.
pub fn map_range<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// In-place transform of disjoint mutable chunks. `f` receives the chunk
/// index and the chunk slice; chunks have length [`CHUNK`] except the last.
pub fn for_each_chunk_mut<T: Send, F>(items: &mut [T], f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        items
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    for (i, chunk) in items.chunks_mut(CHUNK).enumerate() {
        f(i, chunk);
    }
}

/// Chunked fold-then-combine reduction over an index range.
///
/// The range is split into fixed [`CHUNK`]-sized chunks; `fold` accumulates
/// each chunk serially in index order into a fresh accumulator, and the
/// per-chunk partials are combined in ascending chunk order by `combine`.
/// The reduction tree is therefore identical whether or not the chunk
/// folds ran in parallel.
pub fn chunked_reduce<A, F, G, I>(n: usize, init: I, fold: F, combine: G) -> Option<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, usize) -> A + Sync + Send,
    G: Fn(A, A) -> A,
{
    if n == 0 {
        return None;
    }
    let n_chunks = n.div_ceil(CHUNK);
    let fold_chunk = |c: usize| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut acc = init();
        for i in lo..hi {
            acc = fold(acc, i);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<A> = if parallel_active() {
        (0..n_chunks).into_par_iter().map(fold_chunk).collect()
    } else {
        (0..n_chunks).map(fold_chunk).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<A> = (0..n_chunks).map(fold_chunk).collect();
    partials.into_iter().reduce(combine)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_reduce_matches_serial_sum() {
        // Non-associative f64 sum: identical chunking must give identical
        // bits in both modes.
        let xs: Vec<f64> = (0..10_000)
            .map(|i| ((i * 2654435761u64 as usize) as f64).sin())
            .collect();
        let run =
            || chunked_reduce(xs.len(), || 0.0f64, |acc, i| acc + xs[i], |a, b| a + b).unwrap();
        let parallel = run();
        force_serial(true);
        let serial = run();
        force_serial(false);
        assert_eq!(parallel.to_bits(), serial.to_bits());
    }

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(1000, |i| i * i);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, i * i);
        }
    }

    #[test]
    fn chunked_reduce_empty_is_none() {
        let r: Option<f64> = chunked_reduce(0, || 0.0, |a, _| a, |a, b| a + b);
        assert!(r.is_none());
    }
}
