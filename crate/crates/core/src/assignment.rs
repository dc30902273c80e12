//! Exact one-to-one assignment over rectangular `pixels x points` costs.
//!
//! [`hungarian_assign`] is the shortest-augmenting-path form of the
//! Kuhn-Munkres algorithm, `O(n m^2)` for `n` pixels and `m <= n` points.
//! [`brute_force_assign`] enumerates every ordered selection of distinct rows
//! and serves as the reference for small instances.

use crate::error::{Error, Result};
use crate::types::MatchMatrix;

/// Dense `n x m` cost matrix, row-major. Entries can be marked forbidden.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    admissible: Option<Vec<bool>>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("cost matrix", rows * cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(Self {
            rows,
            cols,
            values,
            admissible: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Attaches an admissibility mask; entries with `false` are forbidden.
    /// Values under forbidden entries are ignored.
    pub fn with_admissible(mut self, admissible: Vec<bool>) -> Result<Self> {
        if admissible.len() != self.values.len() {
            return Err(Error::shape("admissibility mask", self.values.len(), admissible.len()));
        }
        self.admissible = Some(admissible);
        Ok(self)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `Some(cost)` for admissible entries, `None` for forbidden ones.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.cols + j;
        match &self.admissible {
            Some(mask) if !mask[k] => None,
            _ => Some(self.values[k]),
        }
    }

    pub fn has_forbidden(&self) -> bool {
        self.admissible
            .as_ref()
            .is_some_and(|m| m.iter().any(|&a| !a))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Canonical total of a per-column row choice, summed in column order.
    pub fn total(&self, column_rows: &[usize]) -> f64 {
        column_rows
            .iter()
            .enumerate()
            .fold(0.0, |acc, (j, &i)| acc + self.values[i * self.cols + j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub matrix: MatchMatrix,
    /// Row chosen for each column.
    pub column_rows: Vec<usize>,
    pub total: f64,
}

fn check_solvable(cost: &CostMatrix) -> Result<()> {
    if cost.rows < cost.cols {
        return Err(Error::TooFewRows {
            rows: cost.rows,
            cols: cost.cols,
        });
    }
    if cost.has_forbidden() {
        return Err(Error::InvalidParameter(
            "assignment solvers need a fully admissible cost matrix".into(),
        ));
    }
    Ok(())
}

/// Minimum-cost assignment of every column to a distinct row.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<Assignment> {
    check_solvable(cost)?;
    let (n, m) = (cost.rows, cost.cols);
    if m == 0 {
        return Ok(Assignment {
            matrix: MatchMatrix::zeros(n, 0),
            column_rows: Vec::new(),
            total: 0.0,
        });
    }

    // Solve the transposed problem: points are the "left" side, pixels the
    // "right" side. Transposing makes the inner scan contiguous.
    let mut by_point = vec![0.0; m * n];
    for i in 0..n {
        for j in 0..m {
            by_point[j * n + i] = cost.values[i * m + j];
        }
    }

    let inf = f64::INFINITY;
    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for point in 1..=m {
        owner[0] = point;
        let mut j0 = 0usize;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &by_point[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut column_rows = vec![usize::MAX; m];
    for pixel in 1..=n {
        if owner[pixel] != 0 {
            column_rows[owner[pixel] - 1] = pixel - 1;
        }
    }
    debug_assert!(column_rows.iter().all(|&r| r < n));
    let total = cost.total(&column_rows);
    Ok(Assignment {
        matrix: MatchMatrix::from_column_rows(n, &column_rows)?,
        column_rows,
        total,
    })
}

pub const BRUTE_FORCE_MAX_ROWS: usize = 10;
pub const BRUTE_FORCE_MAX_COLS: usize = 7;

/// Exhaustive search over all ordered selections of `m` distinct rows.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows > BRUTE_FORCE_MAX_ROWS || cost.cols > BRUTE_FORCE_MAX_COLS {
        return Err(Error::EnumerationBudget {
            rows: cost.rows,
            cols: cost.cols,
        });
    }
    check_solvable(cost)?;

    struct Search<'a> {
        cost: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn descend(&mut self, j: usize, partial: f64) {
            if j == self.cost.cols {
                if self.best.as_ref().is_none_or(|(b, _)| partial < *b) {
                    self.best = Some((partial, self.current.clone()));
                }
                return;
            }
            for i in 0..self.cost.rows {
                if self.used[i] {
                    continue;
                }
                self.used[i] = true;
                self.current.push(i);
                let c = self.cost.values[i * self.cost.cols + j];
                self.descend(j + 1, partial + c);
                self.current.pop();
                self.used[i] = false;
            }
        }
    }

    let mut search = Search {
        cost,
        used: vec![false; cost.rows],
        current: Vec::with_capacity(cost.cols),
        best: None,
    };
    search.descend(0, 0.0);
    let (_, column_rows) = search.best.unwrap_or_default();
    let total = cost.total(&column_rows);
    Ok(Assignment {
        matrix: MatchMatrix::from_column_rows(cost.rows, &column_rows)?,
        column_rows,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> CostMatrix {
        let values = (0..n * m).map(|_| rng.random_range(0.0..100.0)).collect();
        CostMatrix::new(n, m, values).unwrap()
    }

    #[test]
    fn two_by_two() {
        let cost = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let h = hungarian_assign(&cost).unwrap();
        assert_eq!(h.column_rows, vec![0, 1]);
        assert_eq!(h.total, 2.0);
        assert_eq!(brute_force_assign(&cost).unwrap().total, 2.0);
    }

    #[test]
    fn one_by_one() {
        let cost = CostMatrix::from_rows(&[vec![5.0]]).unwrap();
        let h = hungarian_assign(&cost).unwrap();
        assert_eq!(h.column_rows, vec![0]);
        assert_eq!(h.total, 5.0);
        assert_eq!(brute_force_assign(&cost).unwrap().column_rows, vec![0]);
    }

    #[test]
    fn degenerate_zero_costs() {
        let cost = CostMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let h = hungarian_assign(&cost).unwrap();
        assert_eq!(h.total, 0.0);
        assert_ne!(h.column_rows[0], h.column_rows[1]);
        assert!(h.column_rows.iter().all(|&r| r < 3));
    }

    #[test]
    fn rejects_more_columns_than_rows() {
        let cost = CostMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(hungarian_assign(&cost), Err(Error::TooFewRows { rows: 1, cols: 2 })));
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn brute_force_budget() {
        let cost = CostMatrix::new(11, 1, vec![0.0; 11]).unwrap();
        assert!(matches!(brute_force_assign(&cost), Err(Error::EnumerationBudget { .. })));
    }

    #[test]
    fn empty_columns() {
        let cost = CostMatrix::new(3, 0, vec![]).unwrap();
        let h = hungarian_assign(&cost).unwrap();
        assert!(h.column_rows.is_empty());
        assert_eq!(h.matrix.row_indicator(), vec![0.0; 3]);
    }

    #[test]
    fn five_by_four_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let cost = random_matrix(&mut rng, 5, 4);
        let h = hungarian_assign(&cost).unwrap();
        let b = brute_force_assign(&cost).unwrap();
        assert_eq!(h.total, b.total);
        assert_eq!(h.column_rows, b.column_rows);
    }

    #[test]
    fn large_rectangular_is_one_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost = random_matrix(&mut rng, 400, 60);
        let h = hungarian_assign(&cost).unwrap();
        let mut seen = std::collections::HashSet::new();
        assert!(h.column_rows.iter().all(|r| seen.insert(*r)));
        assert_eq!(h.matrix.row_indicator().iter().sum::<f64>(), 60.0);
    }

    proptest! {
        #[test]
        fn oracle_equivalence(seed in any::<u64>(), n in 1usize..=8, m_frac in 0.0f64..1.0) {
            let m = ((n.min(6) as f64) * m_frac).ceil() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = random_matrix(&mut rng, n, m);
            prop_assert_eq!(hungarian_assign(&cost).unwrap().total, brute_force_assign(&cost).unwrap().total);
        }

        // Adding a constant to one column shifts every complete assignment's
        // total by that constant, so the optimum stays optimal.
        #[test]
        fn column_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, m) = (6, 4);
            let cost = random_matrix(&mut rng, n, m);
            let col = rng.random_range(0..m);
            let shifted: Vec<f64> = cost
                .values()
                .iter()
                .enumerate()
                .map(|(k, v)| if k % m == col { v + shift } else { *v })
                .collect();
            let shifted = CostMatrix::new(n, m, shifted).unwrap();
            let a = brute_force_assign(&cost).unwrap();
            let b = hungarian_assign(&shifted).unwrap();
            prop_assert!((cost.total(&b.column_rows) - a.total).abs() < 1e-9);
        }
    }
}
