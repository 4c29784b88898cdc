//! Small numeric helpers shared by the solver and the learning code.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1};

/// `log(sum(exp(xs)))`, max-shifted. Returns `-inf` when every term is `-inf`.
pub fn log_sum_exp<I>(xs: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_value {
            best = j;
            best_value = v;
        }
    }
    best
}

/// Shortest text that parses back to `v`; tiny and huge magnitudes use
/// exponent notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

/// `fmt_float`, or an empty cell for `None`.
pub fn fmt_opt_float(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn l2_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Scale `v` to unit length in place; returns the original norm.
pub fn normalize_in_place(mut v: ArrayViewMut1<'_, f64>) -> f64 {
    let norm = l2_norm(v.view());
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    }
    norm
}

/// Row-wise softmax of `logits`, max-subtracted.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Check that every row sums to one within `tol` with entries in `[0, 1]`.
pub fn check_row_stochastic(m: ArrayView2<'_, f64>, tol: f64) -> Result<(), String> {
    for (i, row) in m.outer_iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(format!("row {i} column {j} is not finite"));
        }
        if let Some(j) = row.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(format!("row {i} column {j} = {} is outside [0, 1]", row[j]));
        }
        let s = row.sum();
        if (s - 1.0).abs() > tol {
            return Err(format!("row {i} sums to {s}"));
        }
    }
    Ok(())
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}
