use ndarray::{Array2, ArrayView2};

use super::{marginal_residual, CostMatrix, TransportPlan};
use crate::error::{Error, Result};

/// Terms of a log-sum-exp more than this many multiples of `eps` below the
/// maximum are below `exp(-50)` relative to it and cannot change the sum.
const LSE_CUTOFF: f64 = 50.0;

/// Scalings are folded back into the potentials once any of them leaves
/// `[exp(-15), exp(15)]`. Kernel entries dropped by `LSE_CUTOFF` then stay
/// below `exp(-20)` relative to the plan.
const ABSORB_THRESHOLD: f64 = 15.0;

/// Below this exponent `exp` underflows to zero.
const EXP_UNDERFLOW: f64 = -745.2;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SinkhornOptions {
    /// Weight of the entropy term in `⟨P, C⟩ - eps H(P)`.
    pub eps: f64,
    pub max_iters: usize,
    /// Convergence threshold on the largest marginal deviation.
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

/// Dual potentials `(f, g)`; the plan is `P_ij = exp((f_i + g_j - C_ij) / eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl Potentials {
    pub fn zeros(n: usize) -> Self {
        Self {
            f: vec![0.0; n],
            g: vec![0.0; n],
        }
    }
}

/// Entropic transport plan with unit marginals by log-domain Sinkhorn
/// iterations from zero potentials.
pub fn sinkhorn(cost: &CostMatrix, eps: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    sinkhorn_with(
        cost,
        &SinkhornOptions {
            eps,
            max_iters,
            tol,
        },
        None,
    )
}

/// `out_i = -eps * log Σ_j exp((other_j - rows[i][j]) / eps)`.
fn soft_min_update(rows: ArrayView2<f64>, other: &[f64], eps: f64, out: &mut [f64]) {
    let cutoff = LSE_CUTOFF * eps;
    for (row, o) in rows.rows().into_iter().zip(out.iter_mut()) {
        let row = row.as_slice().expect("standard layout");
        let mut m = f64::NEG_INFINITY;
        for (c, g) in row.iter().zip(other) {
            let a = g - c;
            if a > m {
                m = a;
            }
        }
        let mut s = 0.0;
        for (c, g) in row.iter().zip(other) {
            let a = g - c - m;
            if a > -cutoff {
                s += (a / eps).exp();
            }
        }
        *o = -(m + eps * s.ln());
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "non-finite Sinkhorn potential {what}"
        )))
    }
}

/// `K_ij = exp((f_i + g_j - C_ij) / eps)` with entries below
/// `exp(-LSE_CUTOFF)` dropped, stored by rows.
#[derive(Default)]
struct SparseKernel {
    rows: Compressed,
}

#[derive(Default)]
struct Compressed {
    start: Vec<usize>,
    index: Vec<u32>,
    values: Vec<f64>,
}

impl Compressed {
    fn fill(&mut self, cost: ArrayView2<f64>, a: &[f64], b: &[f64], eps: f64) {
        self.start.clear();
        self.index.clear();
        self.values.clear();
        self.start.push(0);
        for (row, ai) in cost.rows().into_iter().zip(a) {
            for (j, (c, bj)) in row.iter().zip(b).enumerate() {
                let e = (ai + bj - c) / eps;
                if e > -LSE_CUTOFF {
                    self.index.push(j as u32);
                    self.values.push(e.exp());
                }
            }
            self.start.push(self.index.len());
        }
    }

    /// `out_j += Σ_i K_ij x_i`.
    fn mul_transpose(&self, x: &[f64], out: &mut [f64]) {
        for (xi, w) in x.iter().zip(self.start.windows(2)) {
            let r = w[0]..w[1];
            for (&j, k) in self.index[r.clone()].iter().zip(&self.values[r]) {
                out[j as usize] += xi * k;
            }
        }
    }

    /// `out_i = Σ_j K_ij x_j`.
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(self.start.windows(2)) {
            let r = w[0]..w[1];
            *o = self.index[r.clone()]
                .iter()
                .zip(&self.values[r])
                .map(|(&j, k)| k * x[j as usize])
                .sum();
        }
    }
}

impl SparseKernel {
    fn fill(&mut self, cost: ArrayView2<f64>, pot: &Potentials, eps: f64) {
        self.rows.fill(cost, &pot.f, &pot.g, eps);
    }
}

fn absorb(pot: &mut Potentials, u: &[f64], v: &[f64], eps: f64) {
    pot.f
        .iter_mut()
        .zip(u)
        .for_each(|(f, ui)| *f += eps * ui.ln());
    pot.g
        .iter_mut()
        .zip(v)
        .for_each(|(g, vj)| *g += eps * vj.ln());
}

/// Plan from potentials.
pub(crate) fn plan_from_potentials(
    cost: ArrayView2<f64>,
    pot: &Potentials,
    eps: f64,
) -> Array2<f64> {
    let n = cost.nrows();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let e = (pot.f[i] + pot.g[j] - cost[[i, j]]) / eps;
            if e > EXP_UNDERFLOW {
                p[[i, j]] = e.exp();
            }
        }
    }
    p
}

/// Log-domain Sinkhorn with an optional warm start.
///
/// Each iteration alternates an exact row-marginal update of `f` and an
/// exact column-marginal update of `g`; the plan is declared converged once
/// the row sums are within `tol` of one after a column update. Most
/// iterations run as multiplicative scalings of a fixed kernel, which is
/// rebuilt from log-domain potentials whenever the scalings drift too far.
pub fn sinkhorn_with(
    cost: &CostMatrix,
    opts: &SinkhornOptions,
    warm: Option<&Potentials>,
) -> Result<TransportPlan> {
    if !(opts.eps > 0.0) || !opts.eps.is_finite() {
        return Err(Error::invalid(format!(
            "Sinkhorn eps must be positive, got {}",
            opts.eps
        )));
    }
    let n = cost.n();
    let eps = opts.eps;
    let c = cost.view();
    let mut c_std = None;
    let rows = if c.is_standard_layout() {
        c
    } else {
        c_std = Some(c.to_owned());
        c_std.as_ref().unwrap().view()
    };
    let cols = c.t().as_standard_layout().into_owned();

    let mut pot = match warm {
        Some(w) if w.f.len() == n && w.g.len() == n => w.clone(),
        Some(_) => {
            return Err(Error::ShapeMismatch(
                "warm-start potentials have the wrong size".into(),
            ))
        }
        None => Potentials::zeros(n),
    };
    let mut f_new = vec![0.0; n];
    let mut iterations = 0;
    let mut converged;
    let mut kernel = SparseKernel::default();
    let (mut u, mut v) = (vec![1.0; n], vec![1.0; n]);
    let (mut s, mut t) = (vec![0.0; n], vec![0.0; n]);
    let (lo, hi) = ((-ABSORB_THRESHOLD).exp(), ABSORB_THRESHOLD.exp());
    // The plan rebuilt from the potentials can miss `tol` by rounding when the
    // iteration crawls; tighten the internal target and continue in that case.
    let mut target = opts.tol;
    let (plan, residual) = loop {
        converged = false;
        'outer: loop {
            // exact log-domain sweep
            soft_min_update(rows, &pot.g, eps, &mut f_new);
            check_finite(&f_new, "f")?;
            if iterations > 0 {
                // row sums of the current plan are exp((f - f_new) / eps)
                let row_residual = pot
                    .f
                    .iter()
                    .zip(&f_new)
                    .map(|(f, fnew)| (((f - fnew) / eps).exp() - 1.0).abs())
                    .fold(0.0, f64::max);
                if row_residual < target {
                    converged = true;
                    break;
                }
            }
            if iterations >= opts.max_iters {
                break;
            }
            pot.f.copy_from_slice(&f_new);
            soft_min_update(cols.view(), &pot.f, eps, &mut pot.g);
            check_finite(&pot.g, "g")?;
            iterations += 1;

            // scaling sweeps against the kernel of the current potentials
            kernel.fill(rows, &pot, eps);
            u.fill(1.0);
            v.fill(1.0);
            loop {
                kernel.rows.mul(&v, &mut s);
                let residual = u
                    .iter()
                    .zip(&s)
                    .map(|(ui, si)| (ui * si - 1.0).abs())
                    .fold(0.0, f64::max);
                if residual < target {
                    converged = true;
                    absorb(&mut pot, &u, &v, eps);
                    break 'outer;
                }
                if iterations >= opts.max_iters || s.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    absorb(&mut pot, &u, &v, eps);
                    continue 'outer;
                }
                u.iter_mut().zip(&s).for_each(|(ui, si)| *ui = 1.0 / si);
                t.fill(0.0);
                kernel.rows.mul_transpose(&u, &mut t);
                if t.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    absorb(&mut pot, &u, &v, eps);
                    continue 'outer;
                }
                v.iter_mut().zip(&t).for_each(|(vj, tj)| *vj = 1.0 / tj);
                iterations += 1;
                if u.iter().chain(&v).any(|&x| x < lo || x > hi) {
                    absorb(&mut pot, &u, &v, eps);
                    continue 'outer;
                }
            }
        }
        let plan = plan_from_potentials(c, &pot, eps);
        let residual = marginal_residual(plan.view());
        if !converged || residual < opts.tol || iterations >= opts.max_iters {
            break (plan, residual);
        }
        target *= 0.5;
    };
    drop(c_std);
    Ok(TransportPlan {
        plan,
        converged: converged && residual < opts.tol,
        iterations,
        marginal_residual: residual,
        potentials: pot,
    })
}
