//! Work distribution for the data-parallel loops (zoo training, per-class
//! excitation sweeps, Monte-Carlo chunks).
//!
//! With the default `parallel` feature these fan out over rayon; without it
//! every helper degrades to a plain sequential loop with the same signature.
//! [`map_serial`] and [`try_map_serial`] are always sequential so benchmarks
//! can compare both execution strategies in one build.
//!
//! All helpers preserve input order in their output, so results are
//! bit-identical with and without the feature as long as each work unit is
//! itself deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::Result;

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
pub fn map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Fallible [`map`]; the first error wins.
pub fn try_map<I, O, F>(items: Vec<I>, f: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Sequential map, regardless of features.
pub fn map_serial<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    F: Fn(I) -> O,
{
    items.into_iter().map(f).collect()
}

/// Sequential fallible map, regardless of features.
pub fn try_map_serial<I, O, F>(items: Vec<I>, f: F) -> Result<Vec<O>>
where
    F: Fn(I) -> Result<O>,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let out = map((0..100).collect(), |i: usize| i * i);
        let expected: Vec<usize> = (0..100).map(|i| i * i).collect();
        assert_eq!(out, expected);
        assert_eq!(out, map_serial((0..100).collect(), |i: usize| i * i));
    }

    #[test]
    fn try_map_propagates_error() {
        let r = try_map((0..10).collect(), |i: usize| {
            if i == 7 {
                Err(crate::Error::InvalidConfig("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(r.is_err());
    }
}
