//! Deterministic data-parallel dispatch.
//!
//! Every kernel in this crate parallelizes the same way: the output is
//! split into independent slices, each slice is produced by a pure
//! function of the inputs, and slices land at fixed positions. No
//! floating-point reduction ever crosses a slice boundary, so results
//! are bitwise identical at any thread count and with the `parallel`
//! feature disabled.

/// Execution strategy for the hot kernels.
///
/// `Auto` uses rayon when the `parallel` feature is enabled and falls
/// back to the sequential path otherwise. `Sequential` always runs the
/// single-threaded loop; the bench suite uses it as the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Auto,
    Sequential,
}

/// Builds a `Vec` by evaluating `f` at every index in `0..n`.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Auto => map_indexed_auto(n, f),
    }
}

#[cfg(feature = "parallel")]
fn map_indexed_auto<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_indexed_auto<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Fills `out`, chunked into rows of `row_len`, by calling
/// `f(row_index, row_slice)` for every row.
pub fn fill_rows<F>(exec: Exec, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(row_len > 0 && out.len() % row_len == 0);
    match exec {
        Exec::Sequential => {
            for (i, row) in out.chunks_mut(row_len).enumerate() {
                f(i, row);
            }
        }
        Exec::Auto => fill_rows_auto(out, row_len, f),
    }
}

#[cfg(feature = "parallel")]
fn fill_rows_auto<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
fn fill_rows_auto<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_and_sequential_agree_bitwise() {
        let f = |i: usize| ((i as f64) * 0.1).sin() / (i as f64 + 1.0);
        let a = map_indexed(Exec::Auto, 1000, f);
        let b = map_indexed(Exec::Sequential, 1000, f);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fill_rows_matches_map() {
        let mut out = vec![0.0; 12];
        fill_rows(Exec::Auto, &mut out, 4, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 4 + j) as f64;
            }
        });
        assert_eq!(out, (0..12).map(|i| i as f64).collect::<Vec<_>>());
    }
}
