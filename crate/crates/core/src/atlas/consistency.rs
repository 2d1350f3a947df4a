use ndarray::Array2;
use rayon::prelude::*;

use super::fit::{data_residuals, local_targets, match_samples};
use super::FittedPatch;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::{adam_step, samples_to_array, AdamConfig, AdamState, Gradient};
use crate::transport::{is_permutation, SinkhornOptions};

/// Correspondences between two charts on the shared part of their core sets.
///
/// `samples_p[k]` (a sample of chart `p`) and `samples_q[k]` (a sample of
/// chart `q`) are matched to the same cloud point. Entries are sorted by
/// `samples_p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlap {
    pub p: usize,
    pub q: usize,
    pub samples_p: Vec<usize>,
    pub samples_q: Vec<usize>,
}

impl Overlap {
    pub fn len(&self) -> usize {
        self.samples_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples_p.is_empty()
    }
}

/// Overlaps for every ordered pair of charts (positions in the patch slice)
/// whose core sets intersect.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverlapTable {
    pub entries: Vec<Overlap>,
}

impl OverlapTable {
    pub fn get(&self, p: usize, q: usize) -> Option<&Overlap> {
        self.entries.iter().find(|e| e.p == p && e.q == q)
    }

    pub fn correspondences(&self) -> usize {
        self.entries.iter().map(Overlap::len).sum()
    }
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn check_fitted(fp: &FittedPatch, position: usize) -> Result<()> {
    if fp.pi.len() != fp.patch.fit.len()
        || !is_permutation(&fp.pi)
        || fp.samples.len() != fp.pi.len()
    {
        return Err(Error::invalid(format!(
            "patch {position} has no valid sample-to-point matching; fit it first"
        )));
    }
    Ok(())
}

/// Extracts `T_pq` and `π_{p→q} = π_q⁻¹ ∘ π_p` for all overlapping pairs.
pub fn build_overlaps(patches: &[FittedPatch], cloud: &PointCloud) -> Result<OverlapTable> {
    for (k, fp) in patches.iter().enumerate() {
        check_fitted(fp, k)?;
    }
    // generous bounding radius per core set, to skip far-apart pairs cheaply
    let reach: Vec<f64> = patches
        .iter()
        .map(|fp| {
            fp.patch
                .core
                .iter()
                .map(|&i| (cloud.points()[i] - fp.patch.center).norm())
                .fold(0.0, f64::max)
        })
        .collect();
    // sample of chart q matched to each fit position
    let inverse: Vec<Vec<usize>> = patches
        .iter()
        .map(|fp| {
            let mut inv = vec![0; fp.pi.len()];
            for (j, &r) in fp.pi.iter().enumerate() {
                inv[r] = j;
            }
            inv
        })
        .collect();

    let mut entries = Vec::new();
    for (p, a) in patches.iter().enumerate() {
        for (q, b) in patches.iter().enumerate() {
            if p == q || (a.patch.center - b.patch.center).norm() > reach[p] + reach[q] {
                continue;
            }
            let shared = sorted_intersection(&a.patch.core, &b.patch.core);
            if shared.is_empty() {
                continue;
            }
            let mut samples_p = Vec::with_capacity(shared.len());
            let mut samples_q = Vec::with_capacity(shared.len());
            for i in 0..a.samples.len() {
                let x = a.matched_point(i);
                if shared.binary_search(&x).is_ok() {
                    let pos = b.patch.fit_position(x).expect("core is inside the fit set");
                    samples_p.push(i);
                    samples_q.push(inverse[q][pos]);
                }
            }
            entries.push(Overlap {
                p,
                q,
                samples_p,
                samples_q,
            });
        }
    }
    Ok(OverlapTable { entries })
}

/// Chart outputs at their own samples, in normalized coordinates.
fn all_outputs(patches: &[FittedPatch]) -> Vec<Array2<f64>> {
    patches
        .par_iter()
        .map(FittedPatch::sample_outputs)
        .collect()
}

fn sq_dist(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    (0..3).map(|k| (a[[i, k]] - b[[j, k]]).powi(2)).sum()
}

fn consistency_from_outputs(outputs: &[Array2<f64>], overlaps: &OverlapTable) -> f64 {
    overlaps
        .entries
        .iter()
        .map(|e| {
            e.samples_p
                .iter()
                .zip(&e.samples_q)
                .map(|(&i, &j)| sq_dist(&outputs[e.p], i, &outputs[e.q], j))
                .sum::<f64>()
        })
        .sum()
}

/// `Σ_(p,q) Σ_{i ∈ T_pq} ‖Φ_p(v_i) - Φ_q(v_{π_{p→q}(i)})‖²` over ordered
/// pairs, in normalized coordinates.
pub fn consistency_loss(patches: &[FittedPatch], overlaps: &OverlapTable) -> Result<f64> {
    if overlaps
        .entries
        .iter()
        .any(|e| e.p >= patches.len() || e.q >= patches.len())
    {
        return Err(Error::invalid("overlap table refers to missing patches"));
    }
    Ok(consistency_from_outputs(&all_outputs(patches), overlaps))
}

/// One correspondence of an overlap with its distances (not squared).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondenceTerm {
    pub p: usize,
    pub q: usize,
    pub sample_p: usize,
    pub sample_q: usize,
    pub point: usize,
    /// `‖Φ_p(v_i) - Φ_q(v_j)‖`
    pub gap: f64,
    /// `‖Φ_p(v_i) - x‖`
    pub residual_p: f64,
    /// `‖Φ_q(v_j) - x‖`
    pub residual_q: f64,
}

/// Every correspondence in the table with the distances that bound it.
pub fn correspondence_terms(
    patches: &[FittedPatch],
    overlaps: &OverlapTable,
    cloud: &PointCloud,
) -> Vec<CorrespondenceTerm> {
    let outputs = all_outputs(patches);
    let residual = |p: usize, i: usize, x: usize| {
        let y = outputs[p].row(i);
        let x = cloud.points()[x];
        ((y[0] - x.x).powi(2) + (y[1] - x.y).powi(2) + (y[2] - x.z).powi(2)).sqrt()
    };
    let mut out = Vec::new();
    for e in &overlaps.entries {
        for (&i, &j) in e.samples_p.iter().zip(&e.samples_q) {
            let point = patches[e.p].matched_point(i);
            out.push(CorrespondenceTerm {
                p: e.p,
                q: e.q,
                sample_p: i,
                sample_q: j,
                point,
                gap: sq_dist(&outputs[e.p], i, &outputs[e.q], j).sqrt(),
                residual_p: residual(e.p, i, point),
                residual_q: residual(e.q, j, point),
            });
        }
    }
    out
}

/// Phase-two settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyParams {
    /// Weight of the per-chart data term.
    pub w_fit: f64,
    pub max_sweeps: usize,
    /// Re-match samples to points and rebuild overlaps every this many
    /// sweeps; 0 keeps the phase-one matching throughout.
    pub refresh_interval: usize,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub adam: AdamConfig,
    /// Used for re-matching.
    pub sinkhorn: SinkhornOptions,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            w_fit: 1.0,
            max_sweeps: 1000,
            refresh_interval: 250,
            plateau_window: 100,
            plateau_tol: 1e-6,
            adam: AdamConfig::default(),
            sinkhorn: SinkhornOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub sweeps: usize,
    /// `(consistency, data)` before each sweep.
    pub loss_log: Vec<(f64, f64)>,
    pub initial_consistency: f64,
    pub final_consistency: f64,
    pub refreshes: usize,
}

/// Output-space gradient of the phase-two objective for chart `p`, already
/// scaled into the chart's local frame.
fn chart_output_gradient(
    p: usize,
    patches: &[FittedPatch],
    outputs: &[Array2<f64>],
    overlaps: &OverlapTable,
    touching: &[usize],
    cloud: &PointCloud,
    w_fit: f64,
) -> Array2<f64> {
    let fp = &patches[p];
    let out = &outputs[p];
    let mut g = Array2::zeros(out.dim());
    if w_fit != 0.0 {
        for j in 0..out.nrows() {
            let x = cloud.points()[fp.matched_point(j)];
            for (k, xk) in [x.x, x.y, x.z].into_iter().enumerate() {
                g[[j, k]] += 2.0 * w_fit * (out[[j, k]] - xk);
            }
        }
    }
    for &e in touching {
        let e = &overlaps.entries[e];
        let (mine, theirs, other) = if e.p == p {
            (&e.samples_p, &e.samples_q, e.q)
        } else {
            (&e.samples_q, &e.samples_p, e.p)
        };
        for (&i, &j) in mine.iter().zip(theirs) {
            for k in 0..3 {
                g[[i, k]] += 2.0 * (out[[i, k]] - outputs[other][[j, k]]);
            }
        }
    }
    g *= fp.patch.local.scale;
    g
}

/// Phase two: joint descent on the consistency loss plus `w_fit` times the
/// data terms. Every sweep computes all chart gradients against the same
/// snapshot of parameters and then applies them, so the result does not
/// depend on scheduling.
pub fn fit_consistency(
    patches: &mut [FittedPatch],
    overlaps: &mut OverlapTable,
    cloud: &PointCloud,
    params: &ConsistencyParams,
) -> Result<ConsistencyReport> {
    if !(params.w_fit >= 0.0) {
        return Err(Error::invalid("w_fit must be non-negative"));
    }
    for (k, fp) in patches.iter().enumerate() {
        check_fitted(fp, k)?;
    }
    let mut adam: Vec<AdamState> = patches
        .iter()
        .map(|fp| AdamState::new(&fp.net, params.adam))
        .collect();
    let inputs: Vec<Array2<f64>> = patches
        .iter()
        .map(|fp| samples_to_array(&fp.samples.points))
        .collect();
    let mut log: Vec<(f64, f64)> = Vec::new();
    let mut totals: Vec<f64> = Vec::new();
    let mut refreshes = 0;

    let mut touching = touching_entries(patches.len(), overlaps);
    let mut outputs = all_outputs(patches);
    let initial = consistency_from_outputs(&outputs, overlaps);
    for sweep in 0..params.max_sweeps {
        if params.refresh_interval > 0 && sweep > 0 && sweep % params.refresh_interval == 0 {
            rematch(patches, &params.sinkhorn, cloud)?;
            *overlaps = build_overlaps(patches, cloud)?;
            touching = touching_entries(patches.len(), overlaps);
            refreshes += 1;
        }
        let consistency = consistency_from_outputs(&outputs, overlaps);
        let data: f64 = patches
            .iter()
            .zip(&outputs)
            .map(|(fp, out)| data_residuals(out, fp, cloud).iter().sum::<f64>())
            .sum();
        log.push((consistency, data));
        totals.push(consistency + params.w_fit * data);
        if super::fit::plateaued(&totals, params.plateau_window, params.plateau_tol) {
            break;
        }

        let snapshot: &[FittedPatch] = patches;
        let grads: Vec<Result<Gradient>> = (0..snapshot.len())
            .into_par_iter()
            .map(|p| {
                let og = chart_output_gradient(
                    p,
                    snapshot,
                    &outputs,
                    overlaps,
                    &touching[p],
                    cloud,
                    params.w_fit,
                );
                snapshot[p].net.backward(inputs[p].view(), og.view())
            })
            .collect();
        let grads: Vec<Gradient> = grads.into_iter().collect::<Result<_>>()?;
        patches
            .par_iter_mut()
            .zip(adam.par_iter_mut())
            .zip(grads.par_iter())
            .enumerate()
            .try_for_each(|(k, ((fp, st), g))| {
                if !g.is_finite() {
                    return Err(Error::Numerical {
                        patch: k,
                        message: format!("non-finite consistency gradient at sweep {sweep}"),
                    });
                }
                adam_step(&mut fp.net, st, g)
            })?;
        outputs = all_outputs(patches);
    }
    let final_consistency = consistency_from_outputs(&outputs, overlaps);
    Ok(ConsistencyReport {
        sweeps: log.len(),
        loss_log: log,
        initial_consistency: initial,
        final_consistency,
        refreshes,
    })
}

fn touching_entries(n: usize, overlaps: &OverlapTable) -> Vec<Vec<usize>> {
    let mut t = vec![Vec::new(); n];
    for (k, e) in overlaps.entries.iter().enumerate() {
        t[e.p].push(k);
        t[e.q].push(k);
    }
    t
}

/// Recomputes every chart's sample-to-point matching from its current
/// outputs.
fn rematch(patches: &mut [FittedPatch], opts: &SinkhornOptions, cloud: &PointCloud) -> Result<()> {
    patches.par_iter_mut().try_for_each(|fp| {
        let inputs = samples_to_array(&fp.samples.points);
        let targets = local_targets(&fp.patch, cloud);
        let (pi, pot) = match_samples(
            fp.patch.id,
            &fp.net,
            inputs.view(),
            targets.view(),
            opts,
            fp.potentials.as_ref(),
        )?;
        fp.pi = pi;
        fp.potentials = Some(pot);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::fit::{FitReport, StopReason};
    use crate::atlas::Patch;
    use crate::geometry::{Point3, Vector3};
    use crate::nn::{ChartNet, LayerSpec};
    use crate::sampling::poisson_disk_square;

    fn strip_cloud() -> PointCloud {
        let pts: Vec<Point3> = (0..30)
            .map(|i| Point3::new(i as f64 / 30.0, 0.0, 0.0))
            .collect();
        PointCloud::new(pts, Some(vec![Vector3::z(); 30])).unwrap()
    }

    fn fitted(
        cloud: &PointCloud,
        id: usize,
        core: Vec<usize>,
        fit: Vec<usize>,
        seed: u64,
    ) -> FittedPatch {
        let patch = Patch::new(id, cloud, fit[0], core, fit).unwrap();
        let n = patch.fit.len();
        let samples = poisson_disk_square(n, seed).unwrap();
        // a scrambled matching
        let pi: Vec<usize> = (0..n).map(|j| (j * 5 + seed as usize) % n).collect();
        assert!(is_permutation(&pi), "pick n coprime with 5");
        FittedPatch {
            patch,
            net: ChartNet::init_chart(LayerSpec::chart(vec![2, 8, 3]).unwrap(), seed).unwrap(),
            samples,
            pi,
            potentials: None,
            report: FitReport {
                iterations: 0,
                loss_log: vec![],
                emd: 0.0,
                unconverged_plans: 0,
                sinkhorn_iterations: 0,
                marginal_residual: 0.0,
                stop: StopReason::MaxIterations,
            },
        }
    }

    #[test]
    fn three_patch_strip_correspondences_are_sound() {
        let cloud = strip_cloud();
        let patches = vec![
            fitted(&cloud, 0, (0..10).collect(), (0..12).collect(), 1),
            fitted(&cloud, 1, (8..20).collect(), (6..22).collect(), 2),
            fitted(&cloud, 2, (18..30).collect(), (16..30).collect(), 3),
        ];
        let table = build_overlaps(&patches, &cloud).unwrap();
        // 0-1, 1-0, 1-2, 2-1; 0 and 2 share nothing
        assert_eq!(table.entries.len(), 4);
        assert!(table.get(0, 2).is_none());
        for e in &table.entries {
            let (a, b) = (&patches[e.p], &patches[e.q]);
            for (&i, &j) in e.samples_p.iter().zip(&e.samples_q) {
                assert_eq!(a.matched_point(i), b.matched_point(j));
                assert!(a.patch.core.contains(&a.matched_point(i)));
                assert!(b.patch.core.contains(&a.matched_point(i)));
            }
            // inverse map is the reverse entry
            let back = table.get(e.q, e.p).unwrap();
            let mut fwd: Vec<(usize, usize)> = e
                .samples_p
                .iter()
                .copied()
                .zip(e.samples_q.iter().copied())
                .collect();
            let mut rev: Vec<(usize, usize)> = back
                .samples_q
                .iter()
                .copied()
                .zip(back.samples_p.iter().copied())
                .collect();
            fwd.sort_unstable();
            rev.sort_unstable();
            assert_eq!(fwd, rev);
        }
        assert_eq!(table.get(0, 1).unwrap().len(), 2);
        assert_eq!(table.get(1, 2).unwrap().len(), 2);
    }

    #[test]
    fn identical_patches_map_by_identity() {
        let cloud = strip_cloud();
        let a = fitted(&cloud, 0, (0..10).collect(), (0..12).collect(), 1);
        let patches = vec![a.clone(), a];
        let table = build_overlaps(&patches, &cloud).unwrap();
        let e = table.get(0, 1).unwrap();
        assert_eq!(e.samples_p, e.samples_q);
        assert_eq!(e.len(), 10);
        assert_eq!(consistency_loss(&patches, &table).unwrap(), 0.0);
    }

    #[test]
    fn single_patch_and_disjoint_patches() {
        let cloud = strip_cloud();
        let a = fitted(&cloud, 0, (0..10).collect(), (0..12).collect(), 1);
        let b = fitted(&cloud, 1, (20..30).collect(), (18..30).collect(), 2);
        let single = build_overlaps(std::slice::from_ref(&a), &cloud).unwrap();
        assert!(single.entries.is_empty());
        assert_eq!(
            consistency_loss(std::slice::from_ref(&a), &single).unwrap(),
            0.0
        );
        let pair = build_overlaps(&[a, b], &cloud).unwrap();
        assert!(pair.entries.is_empty());
    }

    #[test]
    fn unfitted_patch_is_rejected() {
        let cloud = strip_cloud();
        let mut a = fitted(&cloud, 0, (0..10).collect(), (0..12).collect(), 1);
        a.pi.clear();
        assert!(build_overlaps(&[a], &cloud).is_err());
    }

    #[test]
    fn triangle_bound_holds_termwise() {
        let cloud = strip_cloud();
        let patches = vec![
            fitted(&cloud, 0, (0..14).collect(), (0..16).collect(), 5),
            fitted(&cloud, 1, (8..20).collect(), (6..22).collect(), 6),
        ];
        let table = build_overlaps(&patches, &cloud).unwrap();
        let terms = correspondence_terms(&patches, &table, &cloud);
        assert!(!terms.is_empty());
        for t in terms {
            assert!(t.gap <= t.residual_p + t.residual_q + 1e-9);
        }
    }

    #[test]
    fn phase_two_reduces_the_gap_and_is_deterministic() {
        let cloud = strip_cloud();
        let make = || {
            vec![
                fitted(&cloud, 0, (0..14).collect(), (0..16).collect(), 5),
                fitted(&cloud, 1, (8..20).collect(), (6..22).collect(), 6),
            ]
        };
        let params = ConsistencyParams {
            max_sweeps: 200,
            refresh_interval: 0,
            ..ConsistencyParams::default()
        };
        let mut a = make();
        let mut ta = build_overlaps(&a, &cloud).unwrap();
        let before = consistency_loss(&a, &ta).unwrap();
        let report = fit_consistency(&mut a, &mut ta, &cloud, &params).unwrap();
        assert!(before > 0.0);
        assert_eq!(report.initial_consistency, before);
        assert!(report.final_consistency < before);
        let mut b = make();
        let mut tb = build_overlaps(&b, &cloud).unwrap();
        fit_consistency(&mut b, &mut tb, &cloud, &params).unwrap();
        assert_eq!(a[0].net, b[0].net);
        assert_eq!(a[1].net, b[1].net);
    }

    #[test]
    fn without_overlaps_only_the_data_term_acts() {
        let cloud = strip_cloud();
        let mut patches = vec![fitted(&cloud, 0, (0..10).collect(), (0..12).collect(), 1)];
        let mut table = build_overlaps(&patches, &cloud).unwrap();
        let before = patches[0].data_loss(&cloud);
        let params = ConsistencyParams {
            max_sweeps: 100,
            refresh_interval: 0,
            ..ConsistencyParams::default()
        };
        let r = fit_consistency(&mut patches, &mut table, &cloud, &params).unwrap();
        assert!(r.loss_log.iter().all(|&(c, _)| c == 0.0));
        assert!(patches[0].data_loss(&cloud) < before);
    }

    #[test]
    fn coincident_charts_only_move_under_the_data_term() {
        let cloud = strip_cloud();
        let a = fitted(&cloud, 0, (0..10).collect(), (0..12).collect(), 1);
        let patches = vec![a.clone(), a];
        let table = build_overlaps(&patches, &cloud).unwrap();
        let outputs = all_outputs(&patches);
        let touching = touching_entries(2, &table);
        let with = chart_output_gradient(0, &patches, &outputs, &table, &touching[0], &cloud, 1.0);
        let without = chart_output_gradient(0, &patches, &outputs, &table, &[], &cloud, 1.0);
        assert_eq!(with, without);
    }
}
