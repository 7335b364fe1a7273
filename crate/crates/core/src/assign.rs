//! Optimal assignment (Hungarian method, shortest augmenting paths with
//! potentials) on rectangular cost matrices.

use alloc::vec;
use alloc::vec::Vec;

/// Minimum-cost assignment for a `rows x cols` matrix in row-major order.
///
/// Returns, for every row, the column it is assigned to. When
/// `rows <= cols` every row is assigned; otherwise only `cols` rows get a
/// column and the rest are `None`.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let col_to_row = hungarian(&t, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            out[r] = Some(c);
        }
        return out;
    }
    hungarian(cost, rows, cols).into_iter().map(Some).collect()
}

/// Maximum-weight variant of [`min_cost_assignment`].
pub fn max_weight_assignment(weight: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let neg: Vec<f64> = weight.iter().map(|w| -w).collect();
    min_cost_assignment(&neg, rows, cols)
}

/// `n <= m`; returns the column of each row.
fn hungarian(a: &[f64], n: usize, m: usize) -> Vec<usize> {
    // 1-based potentials; index 0 is the virtual root column/row
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}
