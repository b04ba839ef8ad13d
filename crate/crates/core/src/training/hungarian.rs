//! Minimum-cost bipartite assignment between queries (rows) and targets
//! (columns), with a deterministic choice among equal-cost optima.

use serde::Serialize;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    /// `(query, target)` sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    /// Total assigned cost, summed in ascending query order.
    pub fn total_cost<T: Scalar>(&self, cost: &Tensor<T>) -> f64 {
        self.pairs.iter().map(|&(q, t)| cost.get(q, t).as_f64()).sum()
    }
}

/// Potential-based assignment for `rows <= cols`. Returns the column of each
/// row.
fn assign(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Optimal cost of a maximum-cardinality matching restricted to `rows x cols`.
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let (sub, transposed) = if rows.len() <= cols.len() {
        (rows.iter().map(|&r| cols.iter().map(|&c| cost[r][c]).collect()).collect::<Vec<Vec<f64>>>(), false)
    } else {
        (cols.iter().map(|&c| rows.iter().map(|&r| cost[r][c]).collect()).collect(), true)
    };
    let a = assign(&sub);
    let mut terms: Vec<(usize, f64)> = a
        .iter()
        .enumerate()
        .map(|(i, &j)| if transposed { (rows[j], sub[i][j]) } else { (rows[i], sub[i][j]) })
        .collect();
    terms.sort_by_key(|t| t.0);
    terms.iter().map(|t| t.1).sum()
}

/// Minimum-cost injective assignment of `min(K, T)` pairs. Among optimal
/// assignments the lexicographically smallest pair list is returned.
pub fn hungarian_match<T: Scalar>(cost: &Tensor<T>) -> MatchResult {
    let (k, t) = cost.shape();
    let c: Vec<Vec<f64>> = (0..k).map(|r| cost.row(r).iter().map(|v| v.as_f64()).collect()).collect();
    let size = k.min(t);
    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..t).collect();
    let best = optimum(&c, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut fixed_cost = 0.0;
    let mut pairs = Vec::with_capacity(size);
    let mut unmatched = Vec::new();
    let mut free_cols: Vec<usize> = all_cols.clone();
    for q in 0..k {
        let rest: Vec<usize> = (q + 1..k).collect();
        let mut chosen = None;
        if pairs.len() < size {
            for (pos, &col) in free_cols.iter().enumerate() {
                let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != col).collect();
                if pairs.len() + 1 + rest.len().min(cols.len()) != size {
                    continue;
                }
                let total = fixed_cost + c[q][col] + optimum(&c, &rest, &cols);
                if total <= best + tol {
                    chosen = Some((pos, col));
                    break;
                }
            }
        }
        match chosen {
            Some((pos, col)) => {
                fixed_cost += c[q][col];
                pairs.push((q, col));
                free_cols.remove(pos);
            }
            None => unmatched.push(q),
        }
    }
    MatchResult { pairs, unmatched_queries: unmatched }
}
