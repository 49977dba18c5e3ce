//! Order-preserving parallel map over independent items.

use rayon::prelude::*;

/// Applies `f` to every item on up to `threads` worker threads. Results are
/// returned in input order, so output never depends on scheduling.
/// `threads <= 1` runs inline on the caller's thread.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running serially");
            items.iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let v: Vec<u64> = (0..100).collect();
        let serial = par_map(&v, 1, |x| x * x);
        assert_eq!(par_map(&v, 4, |x| x * x), serial);
    }
}
