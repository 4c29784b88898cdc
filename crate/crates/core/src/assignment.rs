//! Linear assignment by the Hungarian method (shortest augmenting paths
//! with vertex potentials), O(n^3).

use ndarray::{Array2, ArrayView2};

/// Minimum-cost assignment of rows to columns for a rectangular cost
/// matrix. Both sides are padded with zero-cost dummies up to a square;
/// `result[row]` is `None` when the row was matched to a dummy column.
pub fn min_cost_assignment(cost: ArrayView2<'_, f64>) -> Vec<Option<usize>> {
    let (rows, cols) = cost.dim();
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let mut padded = Array2::<f64>::zeros((n, n));
    padded.slice_mut(ndarray::s![..rows, ..cols]).assign(&cost);

    // 1-based arrays with a virtual column 0, as in the classic formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = padded[[r0 - 1, col - 1]] - u[r0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut result = vec![None; rows];
    for (col, &row) in owner.iter().enumerate().take(n + 1).skip(1) {
        if row >= 1 && row <= rows && col <= cols {
            result[row - 1] = Some(col - 1);
        }
    }
    result
}

/// Maximum-weight assignment; see [`min_cost_assignment`].
pub fn max_weight_assignment(weights: ArrayView2<'_, f64>) -> Vec<Option<usize>> {
    let max = weights.fold(0.0f64, |m, &w| m.max(w));
    min_cost_assignment(weights.mapv(|w| max - w).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn classic_three_by_three() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let a = min_cost_assignment(cost.view());
        let total: f64 = a.iter().enumerate().map(|(r, c)| cost[[r, c.unwrap()]]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn wide_and_tall_matrices() {
        let wide = array![[5.0, 1.0, 9.0], [2.0, 8.0, 0.5]];
        assert_eq!(min_cost_assignment(wide.view()), vec![Some(1), Some(2)]);
        let tall = array![[1.0], [0.0], [3.0]];
        assert_eq!(min_cost_assignment(tall.view()), vec![None, Some(0), None]);
    }

    #[test]
    fn maximizes_weights() {
        let w = array![[0.0, 3.0], [3.0, 0.0]];
        assert_eq!(max_weight_assignment(w.view()), vec![Some(1), Some(0)]);
    }
}
