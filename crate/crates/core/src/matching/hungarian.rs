//! Minimum-cost rectangular assignment (Kuhn–Munkres with potentials).

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Injective map from rows (ground truths) to columns (predictions).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Checks that every row in `0..rows` appears exactly once and no column repeats.
    pub fn new(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Result<Self> {
        pairs.sort_unstable();
        if pairs.len() != rows || pairs.iter().enumerate().any(|(i, &(r, _))| r != i) {
            return Err(Error::InvalidArgument(format!(
                "assignment must cover rows 0..{rows} exactly once"
            )));
        }
        let mut used = vec![false; cols];
        for &(_, c) in &pairs {
            if c >= cols || std::mem::replace(&mut used[c], true) {
                return Err(Error::InvalidArgument(format!(
                    "assignment column {c} out of range or reused"
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// `(gt_index, pred_index)` sorted by ground truth.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Ground-truth index matched to each prediction, `None` when unmatched.
    pub fn inverse(&self, cols: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; cols];
        for &(r, c) in &self.pairs {
            inv[c] = Some(r);
        }
        inv
    }

    /// Sum of the selected costs, accumulated in ground-truth order.
    pub fn total_cost(&self, cost: &Matrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
    }
}

/// Potentials-based O(R²·C) solver; returns the column for each row.
fn solve_min(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    if rows == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // p[j]: row (1-based) assigned to column j; way[j]: previous column on the path
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal total for the sub-problem with `fixed` rows pinned to their columns.
fn constrained_total(cost: &Matrix, fixed: &[(usize, usize)]) -> f64 {
    complete(cost, fixed)
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[(r, c)])
        .sum()
}

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`).
///
/// Among optimal assignments the lexicographically smallest pair sequence is
/// returned: row 0 takes the smallest column compatible with the optimum, then
/// row 1, and so on. Totals within `1e-10·(1 + |optimum|)` count as ties.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let (rows, cols) = cost.shape();
    if rows > cols {
        return Err(Error::InvalidArgument(format!(
            "cost matrix has more rows ({rows}) than columns ({cols})"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::InvalidArgument("cost matrix contains non-finite values".into()));
    }
    if rows == 0 {
        return Ok(Assignment::empty());
    }
    let first = solve_min(cost.as_slice(), rows, cols);
    let optimum: f64 = first.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
    let tol = 1e-10 * (1.0 + optimum.abs());

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(rows);
    let mut current = first;
    for r in 0..rows {
        let mut chosen = current[r];
        for c in 0..current[r] {
            if fixed.iter().any(|&(_, fc)| fc == c) {
                continue;
            }
            let mut trial = fixed.clone();
            trial.push((r, c));
            if constrained_total(cost, &trial) <= optimum + tol {
                chosen = c;
                break;
            }
        }
        fixed.push((r, chosen));
        if chosen != current[r] {
            // re-solve the remaining rows under the new pins
            current = complete(cost, &fixed);
        }
    }
    Assignment::new(fixed, rows, cols)
}

fn complete(cost: &Matrix, fixed: &[(usize, usize)]) -> Vec<usize> {
    let (rows, cols) = cost.shape();
    let free_rows: Vec<usize> = (0..rows).filter(|&r| fixed.iter().all(|&(fr, _)| fr != r)).collect();
    let free_cols: Vec<usize> = (0..cols).filter(|&c| fixed.iter().all(|&(_, fc)| fc != c)).collect();
    let mut sub = Vec::with_capacity(free_rows.len() * free_cols.len());
    for &r in &free_rows {
        for &c in &free_cols {
            sub.push(cost[(r, c)]);
        }
    }
    let assign = solve_min(&sub, free_rows.len(), free_cols.len());
    let mut out = vec![0; rows];
    for &(r, c) in fixed {
        out[r] = c;
    }
    for (i, &r) in free_rows.iter().enumerate() {
        out[r] = free_cols[assign[i]];
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over all injections, lexicographic order, first strict minimum kept.
    pub(crate) fn brute_force(cost: &Matrix) -> (f64, Vec<usize>) {
        fn rec(cost: &Matrix, r: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            if r == cost.rows() {
                let total: f64 = cur.iter().enumerate().map(|(i, &c)| cost[(i, c)]).sum();
                if total < best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            for c in 0..cost.cols() {
                if !used[c] {
                    used[c] = true;
                    cur.push(c);
                    rec(cost, r + 1, used, cur, best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(cost, 0, &mut vec![false; cost.cols()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn small_fixtures() {
        let a = hungarian(&Matrix::scalar(4.2)).unwrap();
        assert_eq!(a.pairs(), &[(0, 0)]);
        let a = hungarian(&Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(a.pairs(), &[(0, 0), (1, 1)]);
        let a = hungarian(&Matrix::from_rows(&[vec![5.0, 1.0, 3.0]])).unwrap();
        assert_eq!(a.pairs(), &[(0, 1)]);
        assert!(hungarian(&Matrix::zeros(3, 2)).is_err());
        assert!(hungarian(&Matrix::zeros(0, 4)).unwrap().is_empty());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let a = hungarian(&Matrix::filled(3, 5, 1.0)).unwrap();
        assert_eq!(a.pairs(), &[(0, 0), (1, 1), (2, 2)]);
        let cost = Matrix::from_rows(&[vec![2.0, 1.0, 1.0], vec![1.0, 2.0, 1.0]]);
        // optima: (0,1)(1,0), (0,1)(1,2), (0,2)(1,0) — all total 2
        assert_eq!(hungarian(&cost).unwrap().pairs(), &[(0, 1), (1, 0)]);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let r = rng.random_range(1..=6);
            let c = rng.random_range(r..=7);
            let integer = rng.random_bool(0.5);
            let cost = Matrix::from_fn(r, c, |_, _| {
                if integer {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random_range(-3.0..3.0)
                }
            });
            let a = hungarian(&cost).unwrap();
            let (best, seq) = brute_force(&cost);
            assert_eq!(a.total_cost(&cost), best);
            if integer {
                let got: Vec<usize> = a.pairs().iter().map(|p| p.1).collect();
                assert_eq!(got, seq);
            }
        }
    }

    #[test]
    fn dominated_column_never_chosen_and_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let c = rng.random_range(2..8);
            let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..10.0)).collect();
            let cost = Matrix::from_vec(1, c, row.clone());
            let best = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let a = hungarian(&cost).unwrap();
            assert_eq!(row[a.pairs()[0].1], best);

            let r = rng.random_range(1..=c);
            let m = Matrix::from_fn(r, c, |_, _| rng.random_range(0.0..1.0));
            let k = rng.random_range(0.01..100.0);
            let scaled = m.map(|v| v * k);
            assert_eq!(hungarian(&m).unwrap(), hungarian(&scaled).unwrap());
        }
    }

    #[test]
    fn assignment_validation() {
        assert!(Assignment::new(vec![(0, 1), (1, 1)], 2, 3).is_err());
        assert!(Assignment::new(vec![(0, 1)], 2, 3).is_err());
        assert!(Assignment::new(vec![(0, 3)], 1, 3).is_err());
        let a = Assignment::new(vec![(1, 0), (0, 2)], 2, 3).unwrap();
        assert_eq!(a.pairs(), &[(0, 2), (1, 0)]);
        assert_eq!(a.inverse(3), vec![Some(1), None, Some(0)]);
    }
}
