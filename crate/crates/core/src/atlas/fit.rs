use log::debug;
use ndarray::{Array2, ArrayView2, Axis};

use super::Patch;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::nn::{adam_step, samples_to_array, AdamConfig, AdamState, ChartNet, LayerSpec};
use crate::sampling::{derive_seed, poisson_disk_square, ParamSample};
use crate::transport::{
    plan_cost, project_to_permutation, sinkhorn_with, CostMatrix, Potentials, SinkhornOptions,
};

pub(crate) const SAMPLE_STREAM: u64 = 1;
pub(crate) const INIT_STREAM: u64 = 2;

/// Phase-one optimization settings for a single chart.
#[derive(Debug, Clone, PartialEq)]
pub struct FitParams {
    pub layers: LayerSpec,
    pub sinkhorn: SinkhornOptions,
    pub adam: AdamConfig,
    pub max_iters: usize,
    /// Stop once the best loss improved by less than `plateau_tol` (relative)
    /// over the last `plateau_window` iterations.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Stop once the transport cost per point falls below this value.
    pub loss_floor: f64,
    /// Re-solve the transport plan every this many gradient steps.
    pub plan_refresh_interval: usize,
    /// Warm-started Sinkhorn iterations per plan refresh during descent.
    /// The final matching runs up to `sinkhorn.max_iters`.
    pub step_sinkhorn_iters: usize,
    /// Marginal tolerance of those per-step solves.
    pub step_sinkhorn_tol: f64,
    pub seed: u64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            layers: LayerSpec::default_chart(),
            sinkhorn: SinkhornOptions::default(),
            adam: AdamConfig::default(),
            max_iters: 2000,
            plateau_window: 100,
            plateau_tol: 1e-6,
            loss_floor: 1e-12,
            plan_refresh_interval: 1,
            step_sinkhorn_iters: 1000,
            step_sinkhorn_tol: 1e-3,
            seed: 0,
        }
    }
}

impl FitParams {
    pub fn validate(&self) -> Result<()> {
        if self.plan_refresh_interval == 0 {
            return Err(Error::invalid("plan refresh interval must be at least 1"));
        }
        if self.step_sinkhorn_iters == 0 {
            return Err(Error::invalid(
                "at least one Sinkhorn iteration per step is needed",
            ));
        }
        if !(self.step_sinkhorn_tol > 0.0) {
            return Err(Error::invalid(format!(
                "per-step Sinkhorn tolerance must be positive, got {}",
                self.step_sinkhorn_tol
            )));
        }
        if self.plateau_window == 0 {
            return Err(Error::invalid("plateau window must be at least 1"));
        }
        if !(self.sinkhorn.eps > 0.0) {
            return Err(Error::invalid(format!(
                "eps must be positive, got {}",
                self.sinkhorn.eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Plateau,
    LossFloor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    /// Transport cost `⟨P, C⟩` per iteration, in the chart's local frame.
    pub loss_log: Vec<f64>,
    /// Final `Σ_j ‖φ(v_j) - x_{π(j)}‖²` in normalized coordinates.
    pub emd: f64,
    /// Number of per-step plan solves that hit their iteration cap.
    pub unconverged_plans: usize,
    /// Sinkhorn iterations summed over all plan solves.
    pub sinkhorn_iterations: usize,
    /// Largest marginal deviation of the plans used for the last gradient
    /// steps.
    pub marginal_residual: f64,
    pub stop: StopReason,
}

impl FitReport {
    pub fn emd_per_point(&self, n: usize) -> f64 {
        self.emd / n as f64
    }
}

/// A patch together with its fitted chart and the sample-to-point matching.
#[derive(Debug, Clone)]
pub struct FittedPatch {
    pub patch: Patch,
    pub net: ChartNet,
    pub samples: ParamSample,
    /// Sample `j` is matched to fit point `patch.fit[pi[j]]`.
    pub pi: Vec<usize>,
    pub potentials: Option<Potentials>,
    pub report: FitReport,
}

impl FittedPatch {
    /// Cloud index matched to sample `j`.
    pub fn matched_point(&self, j: usize) -> usize {
        self.patch.fit[self.pi[j]]
    }

    /// Chart outputs at `inputs` (`n x 2`) in normalized coordinates.
    pub fn eval_batch(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = self.net.forward_batch(inputs);
        to_global(&mut out, &self.patch);
        out
    }

    /// Chart outputs at its own samples, in normalized coordinates.
    pub fn sample_outputs(&self) -> Array2<f64> {
        self.eval_batch(samples_to_array(&self.samples.points).view())
    }

    pub fn eval(&self, v: [f64; 2]) -> Point3 {
        let y = self.net.forward(v);
        self.patch.local.invert(&Point3::new(y[0], y[1], y[2]))
    }

    /// Jacobian in normalized coordinates.
    pub fn jacobian(&self, v: [f64; 2]) -> [[f64; 2]; 3] {
        let s = self.patch.local.scale;
        self.net.jacobian(v).map(|r| r.map(|x| x * s))
    }

    /// `Σ_j ‖Φ(v_j) - x_{π(j)}‖²` in normalized coordinates.
    pub fn data_loss(&self, cloud: &PointCloud) -> f64 {
        let out = self.sample_outputs();
        data_residuals(&out, self, cloud).iter().sum()
    }
}

/// Squared residuals `‖Φ(v_j) - x_{π(j)}‖²` for every sample.
pub(crate) fn data_residuals(
    outputs: &Array2<f64>,
    fp: &FittedPatch,
    cloud: &PointCloud,
) -> Vec<f64> {
    outputs
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, y)| {
            let x = cloud.points()[fp.matched_point(j)];
            (y[0] - x.x).powi(2) + (y[1] - x.y).powi(2) + (y[2] - x.z).powi(2)
        })
        .collect()
}

pub(crate) fn to_global(out: &mut Array2<f64>, patch: &Patch) {
    let s = patch.local.scale;
    let c = patch.local.center;
    for mut row in out.rows_mut() {
        for k in 0..3 {
            row[k] = row[k] * s + c[k];
        }
    }
}

/// Fit points of a patch in its local frame, as an `n x 3` array.
pub(crate) fn local_targets(patch: &Patch, cloud: &PointCloud) -> Array2<f64> {
    let mut t = Array2::zeros((patch.fit.len(), 3));
    for (r, &i) in patch.fit.iter().enumerate() {
        let p = patch.local.apply(&cloud.points()[i]);
        t[[r, 0]] = p.x;
        t[[r, 1]] = p.y;
        t[[r, 2]] = p.z;
    }
    t
}

/// Solves the entropic plan for the current chart, mapping divergence to a
/// per-patch numerical error.
pub(crate) fn solve_plan(
    patch_id: usize,
    cost: &CostMatrix,
    opts: &SinkhornOptions,
    warm: Option<&Potentials>,
) -> Result<crate::transport::TransportPlan> {
    sinkhorn_with(cost, opts, warm).map_err(|e| match e {
        Error::Diverged(message) => Error::Numerical {
            patch: patch_id,
            message,
        },
        other => other,
    })
}

/// Transport cost between fit points and chart outputs; non-finite outputs
/// mean the chart diverged.
fn chart_cost(
    patch_id: usize,
    targets: ArrayView2<f64>,
    out: ArrayView2<f64>,
) -> Result<CostMatrix> {
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical {
            patch: patch_id,
            message: "chart outputs are not finite".into(),
        });
    }
    CostMatrix::squared_distances(targets, out)
}

/// Matching of the chart samples to the fit points from the current chart
/// outputs, as the projection of the entropic plan.
pub(crate) fn match_samples(
    patch_id: usize,
    net: &ChartNet,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    opts: &SinkhornOptions,
    warm: Option<&Potentials>,
) -> Result<(Vec<usize>, Potentials)> {
    let out = net.forward_batch(inputs);
    let cost = chart_cost(patch_id, targets, out.view())?;
    let plan = solve_plan(patch_id, &cost, opts, warm)?;
    let a = project_to_permutation(plan.plan.view())?;
    Ok((a.perm, plan.potentials))
}

/// `∂⟨P, C⟩/∂φ(v_j) = 2 (colsum_j φ(v_j) - Σ_i P_ij x_i)`.
fn transport_gradient(
    plan: &Array2<f64>,
    outputs: &Array2<f64>,
    targets: &Array2<f64>,
) -> Array2<f64> {
    let colsum = plan.sum_axis(Axis(0));
    let pulled = plan.t().dot(targets);
    let mut g = outputs.clone();
    for (j, mut row) in g.rows_mut().into_iter().enumerate() {
        for k in 0..3 {
            row[k] = 2.0 * (colsum[j] * row[k] - pulled[[j, k]]);
        }
    }
    g
}

pub(crate) fn plateaued(log: &[f64], window: usize, tol: f64) -> bool {
    let n = log.len();
    if n <= window {
        return false;
    }
    let before = log[..n - window]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let recent = log[n - window..]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    before - recent <= tol * before.abs()
}

/// Phase one: overfits a fresh chart to the patch's fit points by minimizing
/// the entropic transport cost between chart samples and points.
pub fn fit_chart(patch: &Patch, cloud: &PointCloud, params: &FitParams) -> Result<FittedPatch> {
    params.validate()?;
    let n = patch.fit.len();
    let id = patch.id as u64;
    let samples = poisson_disk_square(n, derive_seed(params.seed, SAMPLE_STREAM, id))?;
    let mut net = ChartNet::init_chart(
        params.layers.clone(),
        derive_seed(params.seed, INIT_STREAM, id),
    )?;
    net.check_overparametrized(n)?;
    fit_chart_from(patch, cloud, params, &samples, &mut net).map(|(pi, potentials, report)| {
        FittedPatch {
            patch: patch.clone(),
            net,
            samples,
            pi,
            potentials: Some(potentials),
            report,
        }
    })
}

fn fit_chart_from(
    patch: &Patch,
    cloud: &PointCloud,
    params: &FitParams,
    samples: &ParamSample,
    net: &mut ChartNet,
) -> Result<(Vec<usize>, Potentials, FitReport)> {
    let n = patch.fit.len();
    let inputs = samples_to_array(&samples.points);
    let targets = local_targets(patch, cloud);
    let mut adam = AdamState::new(net, params.adam);
    let mut potentials: Option<Potentials> = None;
    let mut plan: Option<Array2<f64>> = None;
    let mut log = Vec::with_capacity(params.max_iters);
    let mut unconverged = 0;
    let mut residual = 0.0;
    let mut sinkhorn_iterations = 0;
    let mut stop = StopReason::MaxIterations;
    let step_opts = SinkhornOptions {
        max_iters: params.step_sinkhorn_iters,
        tol: params.step_sinkhorn_tol,
        ..params.sinkhorn
    };

    for it in 0..params.max_iters {
        let refresh = it % params.plan_refresh_interval == 0;
        let (loss, grad) = net.loss_and_gradient(inputs.view(), |out| {
            let cost = chart_cost(patch.id, targets.view(), out.view())?;
            if refresh || plan.is_none() {
                let tp = solve_plan(patch.id, &cost, &step_opts, potentials.as_ref())?;
                if !tp.converged {
                    unconverged += 1;
                }
                residual = tp.marginal_residual;
                sinkhorn_iterations += tp.iterations;
                potentials = Some(tp.potentials);
                plan = Some(tp.plan);
            }
            let p = plan.as_ref().expect("plan solved above");
            let loss = plan_cost(p.view(), &cost)?;
            Ok((loss, transport_gradient(p, out, &targets)))
        })?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Numerical {
                patch: patch.id,
                message: format!("non-finite loss or gradient at iteration {it}"),
            });
        }
        log.push(loss);
        if loss / n as f64 <= params.loss_floor {
            stop = StopReason::LossFloor;
            break;
        }
        if plateaued(&log, params.plateau_window, params.plateau_tol) {
            stop = StopReason::Plateau;
            break;
        }
        adam_step(net, &mut adam, &grad)?;
    }

    let (pi, potentials) = match_samples(
        patch.id,
        net,
        inputs.view(),
        targets.view(),
        &params.sinkhorn,
        potentials.as_ref(),
    )?;
    let out = net.forward_batch(inputs.view());
    let local_emd: f64 = pi
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            (0..3)
                .map(|k| (out[[j, k]] - targets[[r, k]]).powi(2))
                .sum::<f64>()
        })
        .sum();
    let emd = local_emd * patch.local.scale * patch.local.scale;
    debug!(
        "patch {}: {} iterations, {:?}, emd/point {:.3e}",
        patch.id,
        log.len(),
        stop,
        emd / n as f64
    );
    let report = FitReport {
        iterations: log.len(),
        loss_log: log,
        emd,
        unconverged_plans: unconverged,
        sinkhorn_iterations,
        marginal_residual: residual,
        stop,
    };
    Ok((pi, potentials, report))
}
