//! Data-parallel helpers.
//!
//! Every independent evaluation in the crate (matrix cells, sharpness probes,
//! PAD pairs, landscape grid rows, Hutchinson probes, benchmark cells) goes
//! through [`map_indexed`]. With the `parallel` feature the work is spread
//! over the rayon pool; without it, or with [`Exec::Sequential`], it runs in
//! order on the calling thread. Results are always returned in index order so
//! aggregation is identical in both modes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    /// Use the rayon pool when the `parallel` feature is compiled in.
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Parallel map over a slice, order preserving.
pub fn map_slice<I, T, F>(exec: Exec, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let seq = map_indexed(Exec::Sequential, 100, |i| i * i);
        let par = map_indexed(Exec::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
