//! Entropic optimal transport between equal-size point sets, the exact
//! assignment it approximates, and the projection of a transport plan onto
//! the nearest permutation.
//!
//! Conventions: rows of a cost matrix index target points `x_i`, columns
//! index chart samples `v_j`, and `C[i][j] = ‖φ(v_j) - x_i‖²`. Plans have
//! unit row and column sums, so reported transport costs are sums over
//! points rather than means.

mod hungarian;
mod sinkhorn;

pub use hungarian::exact_assignment;
pub use sinkhorn::{sinkhorn, sinkhorn_with, Potentials, SinkhornOptions};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Square, finite, non-negative cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(c: Array2<f64>) -> Result<Self> {
        let (r, k) = c.dim();
        if r != k {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix is {r}x{k}, not square"
            )));
        }
        if r == 0 {
            return Err(Error::invalid("cost matrix is empty"));
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
        if c.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("cost matrix has negative entries"));
        }
        Ok(Self(c))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let cols = flat.len().checked_div(n).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged cost matrix".into()));
        }
        let a = Array2::from_shape_vec((n, cols), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(a)
    }

    /// Squared distances `C[i][j] = ‖outputs[j] - targets[i]‖²` between
    /// `n x 3` arrays.
    pub fn squared_distances(targets: ArrayView2<f64>, outputs: ArrayView2<f64>) -> Result<Self> {
        let n = targets.nrows();
        if outputs.nrows() != n || targets.ncols() != outputs.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} targets vs {:?} outputs",
                targets.dim(),
                outputs.dim()
            )));
        }
        let mut c = Array2::zeros((n, n));
        for i in 0..n {
            let x = targets.row(i);
            for j in 0..n {
                let y = outputs.row(j);
                c[[i, j]] = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        Self::new(c)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// A coupling matrix together with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest deviation of any row or column sum from one.
    pub marginal_residual: f64,
    /// Dual potentials, reusable as a warm start.
    pub potentials: Potentials,
}

impl TransportPlan {
    /// Wraps an explicit matrix (no solver diagnostics).
    pub fn from_matrix(plan: Array2<f64>) -> Result<Self> {
        let (r, c) = plan.dim();
        if r != c {
            return Err(Error::ShapeMismatch(format!("plan is {r}x{c}, not square")));
        }
        let residual = marginal_residual(plan.view());
        Ok(Self {
            converged: residual.is_finite(),
            iterations: 0,
            marginal_residual: residual,
            potentials: Potentials::zeros(r),
            plan,
        })
    }

    pub fn n(&self) -> usize {
        self.plan.nrows()
    }
}

/// Largest `|row sum - 1|` or `|column sum - 1|`.
pub fn marginal_residual(p: ArrayView2<f64>) -> f64 {
    let rows = p.rows().into_iter().map(|r| (r.sum() - 1.0).abs());
    let cols = p.columns().into_iter().map(|c| (c.sum() - 1.0).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// A bijection between chart samples (columns) and targets (rows):
/// column `j` is matched to row `perm[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Builds an assignment and evaluates `Σ_j C[perm[j]][j]`.
    pub fn with_cost(perm: Vec<usize>, cost: &CostMatrix) -> Result<Self> {
        if perm.len() != cost.n() || !is_permutation(&perm) {
            return Err(Error::invalid("assignment is not a permutation"));
        }
        let c = cost.view();
        let total = perm.iter().enumerate().map(|(j, &i)| c[[i, j]]).sum();
        Ok(Self { perm, cost: total })
    }

    /// Inverse map: row `i` is matched to column `inverse()[i]`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (j, &i) in self.perm.iter().enumerate() {
            inv[i] = j;
        }
        inv
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// `H(P) = -Σ P_ij log P_ij` with `0 log 0 = 0`.
pub fn entropy(plan: ArrayView2<f64>) -> Result<f64> {
    let mut h = 0.0;
    for &p in plan.iter() {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::invalid("plan has negative or non-finite entries"));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Frobenius inner product `⟨P, C⟩`.
pub fn plan_cost(plan: ArrayView2<f64>, cost: &CostMatrix) -> Result<f64> {
    if plan.dim() != cost.view().dim() {
        return Err(Error::ShapeMismatch(format!(
            "plan {:?} vs cost {:?}",
            plan.dim(),
            cost.view().dim()
        )));
    }
    Ok(plan
        .iter()
        .zip(cost.view().iter())
        .map(|(p, c)| p * c)
        .sum())
}

/// Rounds a plan to a permutation by taking the maximum entry of each row.
/// When two rows pick the same column the conflict is resolved by a
/// maximum-weight matching on the plan, which coincides with the row-max
/// rule whenever the row maxima are distinct.
///
/// The returned cost is `Σ_j P[perm[j]][j]`, the matched plan mass.
pub fn project_to_permutation(plan: ArrayView2<f64>) -> Result<Assignment> {
    let (n, m) = plan.dim();
    if n != m || n == 0 {
        return Err(Error::ShapeMismatch(format!("plan is {n}x{m}")));
    }
    let mut column_of_row = Vec::with_capacity(n);
    for row in plan.rows() {
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        column_of_row.push(best);
    }
    let mut perm = vec![usize::MAX; n];
    let mut conflict = false;
    for (i, &j) in column_of_row.iter().enumerate() {
        if perm[j] != usize::MAX {
            conflict = true;
            break;
        }
        perm[j] = i;
    }
    if conflict {
        // maximize Σ P  <=>  minimize Σ (max P - P), which keeps costs non-negative
        let top = plan.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted = CostMatrix::new(plan.mapv(|p| top - p))?;
        perm = exact_assignment(&shifted)?.perm;
    }
    let mass = perm.iter().enumerate().map(|(j, &i)| plan[[i, j]]).sum();
    Ok(Assignment { perm, cost: mass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn entropy_closed_forms() {
        let perm = arr2(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(entropy(perm.view()).unwrap(), 0.0);
        let half = arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        assert!((entropy(half.view()).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        for n in [3usize, 5, 8] {
            let u = Array2::from_elem((n, n), 1.0 / n as f64);
            let h = entropy(u.view()).unwrap();
            assert!((h - n as f64 * (n as f64).ln()).abs() < 1e-12);
        }
        assert!(entropy(arr2(&[[-0.1]]).view()).is_err());
    }

    #[test]
    fn plan_cost_special_cases() {
        let c = CostMatrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        let eye = Array2::eye(3);
        assert_eq!(plan_cost(eye.view(), &c).unwrap(), 15.0);
        let u = Array2::from_elem((3, 3), 1.0 / 3.0);
        assert!((plan_cost(u.view(), &c).unwrap() - 5.0 * 3.0).abs() < 1e-12);
        assert!(plan_cost(Array2::eye(2).view(), &c).is_err());
    }

    #[test]
    fn cost_matrix_validation() {
        assert!(CostMatrix::new(Array2::zeros((2, 3))).is_err());
        assert!(CostMatrix::new(arr2(&[[1.0, -1.0], [0.0, 0.0]])).is_err());
        assert!(CostMatrix::new(arr2(&[[f64::NAN]])).is_err());
        assert!(CostMatrix::new(Array2::zeros((0, 0))).is_err());
    }

    #[test]
    fn squared_distance_layout() {
        let targets = arr2(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let outputs = arr2(&[[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]]);
        let c = CostMatrix::squared_distances(targets.view(), outputs.view()).unwrap();
        assert_eq!(c.view(), arr2(&[[1.0, 4.0], [0.0, 5.0]]));
    }

    #[test]
    fn projection_of_distinct_row_maxima() {
        let p = arr2(&[[0.1, 0.7, 0.2], [0.6, 0.3, 0.1], [0.3, 0.0, 0.7]]);
        let a = project_to_permutation(p.view()).unwrap();
        // column 0 <- row 1, column 1 <- row 0, column 2 <- row 2
        assert_eq!(a.perm, vec![1, 0, 2]);
    }

    #[test]
    fn projection_resolves_conflicts() {
        // rows 0 and 1 both peak in column 0
        let p = arr2(&[[0.5, 0.4, 0.1], [0.45, 0.1, 0.45], [0.05, 0.5, 0.45]]);
        let a = project_to_permutation(p.view()).unwrap();
        assert!(is_permutation(&a.perm));
        // max-weight matching by enumeration
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let best = perms
            .iter()
            .map(|q| q.iter().enumerate().map(|(j, &i)| p[[i, j]]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((a.cost - best).abs() < 1e-12);
    }
}
