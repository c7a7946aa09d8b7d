//! Gated linear assignment.
//!
//! Forbidden entries (cost above the gate, or non-finite) are never matched.
//! Among the matchings that use only admissible entries the solver returns one
//! of maximum cardinality, and among those one of minimum total cost.
//!
//! The gated `rows x cols` problem is embedded in a square problem of size
//! `rows + cols`: every row and every column gets a private "unmatched" slot
//! priced above the total admissible cost, and the dummy-dummy block is free.
//! The square problem always has a finite perfect matching, which the
//! shortest-augmenting-path Hungarian method below finds in `O(n^3)`.

use crate::error::{Error, Result};

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::malformed(format!(
                "cost matrix: {} entries for {rows}x{cols}",
                data.len()
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CostMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::malformed("cost matrix rows differ in length"));
        }
        Ok(CostMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    /// Sum of matched costs, accumulated in row order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.matches.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }
}

/// Solves the gated assignment problem; see the module docs for the objective.
pub fn assign(cost: &CostMatrix, gate: f64) -> Assignment {
    let (n, m) = (cost.rows, cost.cols);
    let admissible = |r: usize, c: usize| {
        let v = cost.get(r, c);
        v.is_finite() && v >= 0.0 && v <= gate
    };

    let admissible_sum: f64 = (0..n)
        .flat_map(|r| (0..m).map(move |c| (r, c)))
        .filter(|&(r, c)| admissible(r, c))
        .map(|(r, c)| cost.get(r, c))
        .sum();
    let slot = admissible_sum + 1.0;

    let size = n + m;
    let entry = |i: usize, j: usize| -> f64 {
        match (i < n, j < m) {
            (true, true) => {
                if admissible(i, j) {
                    cost.get(i, j)
                } else {
                    f64::INFINITY
                }
            }
            (true, false) => {
                if j - m == i {
                    slot
                } else {
                    f64::INFINITY
                }
            }
            (false, true) => {
                if i - n == j {
                    slot
                } else {
                    f64::INFINITY
                }
            }
            (false, false) => 0.0,
        }
    };

    let col_of_row = hungarian_square(size, entry);

    let mut out = Assignment::default();
    let mut col_used = vec![false; m];
    for (r, &c) in col_of_row.iter().enumerate().take(n) {
        if c < m {
            out.matches.push((r, c));
            col_used[c] = true;
        } else {
            out.unmatched_rows.push(r);
        }
    }
    out.unmatched_cols = (0..m).filter(|&c| !col_used[c]).collect();
    out
}

/// Minimum-cost perfect matching on a square matrix that is guaranteed to have
/// a finite one. Returns the column assigned to each row.
fn hungarian_square(size: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0f64; size + 1];
    let mut v = vec![0.0f64; size + 1];
    let mut row_of_col = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];

    for i in 1..=size {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            debug_assert!(delta.is_finite(), "square problem has a finite matching");
            for j in 0..=size {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![0usize; size];
    for j in 1..=size {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over all partial injections rows -> cols using only
    /// admissible entries. Returns (max cardinality, min cost at that cardinality).
    fn brute_force(cost: &CostMatrix, gate: f64) -> (usize, f64) {
        fn go(
            cost: &CostMatrix,
            gate: f64,
            r: usize,
            used: &mut Vec<bool>,
            k: usize,
            acc: f64,
            best: &mut (usize, f64),
        ) {
            if r == cost.rows() {
                if k > best.0 || (k == best.0 && acc < best.1) {
                    *best = (k, acc);
                }
                return;
            }
            go(cost, gate, r + 1, used, k, acc, best);
            for c in 0..cost.cols() {
                let v = cost.get(r, c);
                if !used[c] && v <= gate {
                    used[c] = true;
                    go(cost, gate, r + 1, used, k + 1, acc + v, best);
                    used[c] = false;
                }
            }
        }
        let mut best = (0, 0.0);
        go(
            cost,
            gate,
            0,
            &mut vec![false; cost.cols()],
            0,
            0.0,
            &mut best,
        );
        best
    }

    #[test]
    fn diagonal_optimum() {
        let c = CostMatrix::from_rows(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        let a = assign(&c, 5.0);
        assert_eq!(a.matches, vec![(0, 0), (1, 1)]);
        assert!(a.unmatched_rows.is_empty() && a.unmatched_cols.is_empty());
    }

    #[test]
    fn everything_gated() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = assign(&c, 0.5);
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_rows, vec![0, 1]);
        assert_eq!(a.unmatched_cols, vec![0, 1]);
    }

    #[test]
    fn competing_rows_pick_cheaper() {
        // both rows can only take column 0
        let c = CostMatrix::from_rows(&[vec![5.0, 99.0], vec![1.0, 99.0]]).unwrap();
        let a = assign(&c, 10.0);
        assert_eq!(a.matches, vec![(1, 0)]);
        assert_eq!(a.unmatched_rows, vec![0]);
        assert_eq!(a.unmatched_cols, vec![1]);
    }

    #[test]
    fn rectangular_and_empty() {
        let c = CostMatrix::from_rows(&[vec![3.0, 1.0, 2.0]]).unwrap();
        assert_eq!(assign(&c, 10.0).matches, vec![(0, 1)]);
        let empty = CostMatrix::new(0, 3, vec![]).unwrap();
        assert_eq!(assign(&empty, 1.0).unmatched_cols, vec![0, 1, 2]);
        let none = CostMatrix::new(2, 0, vec![]).unwrap();
        assert_eq!(assign(&none, 1.0).unmatched_rows, vec![0, 1]);
    }

    #[test]
    fn ties_are_deterministic() {
        let c = CostMatrix::from_fn(4, 4, |_, _| 1.0);
        let a = assign(&c, 2.0);
        assert_eq!(a, assign(&c, 2.0));
        assert_eq!(a.matches.len(), 4);
    }

    fn matrix() -> impl Strategy<Value = CostMatrix> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(0.0f64..10.0, r * c)
                .prop_map(move |d| CostMatrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(cost in matrix(), gate in 0.0f64..12.0) {
            let a = assign(&cost, gate);
            let (k, best) = brute_force(&cost, gate);
            prop_assert_eq!(a.matches.len(), k);
            prop_assert!((a.total_cost(&cost) - best).abs() < 1e-9);
            for &(r, c) in &a.matches {
                prop_assert!(cost.get(r, c) <= gate);
            }
            prop_assert_eq!(a.matches.len() + a.unmatched_rows.len(), cost.rows());
            prop_assert_eq!(a.matches.len() + a.unmatched_cols.len(), cost.cols());
        }
    }
}
