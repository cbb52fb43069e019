//! Order-preserving execution of independent work units.
//!
//! Everything embarrassingly parallel in this crate (per-probe solves,
//! per-epsilon sweeps, per-frequency deconvolutions, per-transform-point
//! profiles) is funneled through [`map_units`], which dispatches to rayon
//! when the `parallel` feature is on and to a plain loop otherwise. Results
//! are always collected in input order and any subsequent reduction happens
//! sequentially over that ordered buffer, so thread count never changes the
//! bits of the output. [`map_units_sequential`] is always available so
//! benchmarks can compare the two paths inside one build.

/// Pin the worker pool to `threads` workers (0 leaves the library default).
///
/// Call once, before any parallel work. With the `parallel` feature this
/// builds the global rayon pool; without it the request is a no-op (the
/// sequential path ignores thread counts). Because every reduction in this
/// crate merges in input order, the thread count changes wall time only,
/// never output bytes.
pub fn configure_threads(threads: usize) -> Result<(), String> {
    if threads == 0 {
        return Ok(());
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(())
    }
}

/// Map `f` over `items`, preserving input order in the output.
///
/// With the `parallel` feature this fans out across the current rayon pool;
/// without it, it is exactly [`map_units_sequential`].
pub fn map_units<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_units_sequential(items, f)
    }
}

/// Sequential reference path: a straight ordered loop.
pub fn map_units_sequential<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Fallible variant of [`map_units`]: runs every unit, then reports the
/// first error in *input order* (not completion order), so failures are
/// deterministic under any thread count.
pub fn try_map_units<T, R, E, F>(items: Vec<T>, f: F) -> Result<Vec<R>, E>
where
    T: Send,
    R: Send,
    E: Send,
    F: Fn(T) -> Result<R, E> + Sync + Send,
{
    let results = map_units(items, f);
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: u64| x * x + 1;
        assert_eq!(map_units(items.clone(), f), map_units_sequential(items, f));
    }

    #[test]
    fn try_map_reports_first_error_by_input_order() {
        let items: Vec<i32> = (0..100).collect();
        let res: Result<Vec<i32>, i32> =
            try_map_units(items, |x| if x % 7 == 3 { Err(x) } else { Ok(x) });
        assert_eq!(res.unwrap_err(), 3);
    }
}
