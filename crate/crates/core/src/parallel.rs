//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work items are distributed by rayon;
//! without it the same closures run in a plain loop. Both paths return
//! results in index order, and [`tree_reduce`] merges them in a fixed
//! pairwise order, so outputs are bit-identical for any worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Samples per work item. The partition depends only on the sample count.
pub const CHUNK: usize = 128;

/// Name of the active execution backend.
pub fn backend() -> &'static str {
    if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential"
    }
}

/// `f(0), f(1), ..., f(n-1)`, in order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Splits `0..len` into fixed chunks of [`CHUNK`].
pub fn chunk_ranges(len: usize) -> Vec<std::ops::Range<usize>> {
    (0..len.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(len))
        .collect()
}

/// Pairwise reduction in a fixed order: ((0,1),(2,3)),... Returns `None` for
/// an empty input.
pub fn tree_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range() {
        let r = chunk_ranges(300);
        assert_eq!(r.len(), 3);
        assert_eq!(r[2], 256..300);
        assert!(chunk_ranges(0).is_empty());
    }

    #[test]
    fn tree_reduce_order_is_fixed() {
        let v: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let s = tree_reduce(v, |a, b| format!("({a}{b})")).unwrap();
        assert_eq!(s, "(((01)(23))4)");
        assert!(tree_reduce(Vec::<u8>::new(), |a, _| a).is_none());
    }

    #[test]
    fn map_keeps_order() {
        assert_eq!(map_indexed(6, |i| i * i), vec![0, 1, 4, 9, 16, 25]);
    }
}
