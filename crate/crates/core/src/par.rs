//! Deterministic data-parallel reductions.
//!
//! Partial results are computed per row in parallel and folded sequentially in
//! row order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

/// Sum of `f(i)` for `i in 0..n`, folded in index order.
pub(crate) fn sum_rows<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let partials: Vec<f64> = (0..n).into_par_iter().map(f).collect();
    partials.iter().sum()
}

/// Numerically stable `log(sum(exp(x)))` over a slice; `-inf` entries are skipped.
/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values
        .iter()
        .filter(|v| **v > f64::NEG_INFINITY)
        .map(|v| (v - max).exp())
        .sum();
    max + sum.ln()
}
