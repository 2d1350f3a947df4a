use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{
    angle_between, NormalizationTransform, Point3, PointCloud, SpatialIndex, Vector3,
};
use crate::sampling::poisson_disk_cloud;

/// Smallest fit set a chart is fitted to.
pub const MIN_FIT_POINTS: usize = 4;

/// Patch-construction hyperparameters, in normalized coordinates (unit
/// bounding-box diagonal), so `r` is literally a fraction of the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchParams {
    pub r: f64,
    /// Core-set ball radius is `c * r`.
    pub c: f64,
    /// Fit-set ball radius is `c_tilde * r`.
    pub c_tilde: f64,
    /// Normal-angle filter threshold in degrees.
    pub alpha_deg: f64,
    pub seed: u64,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self {
            r: 0.025,
            c: 1.5,
            c_tilde: 1.5,
            alpha_deg: 100.0,
            seed: 0,
        }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::invalid(format!(
                "patch radius r must be positive, got {}",
                self.r
            )));
        }
        if !(self.c > 0.0) || !(self.c_tilde > 0.0) {
            return Err(Error::invalid("c and c_tilde must be positive"));
        }
        if self.c_tilde < self.c {
            return Err(Error::invalid(format!(
                "c_tilde ({}) must be at least c ({})",
                self.c_tilde, self.c
            )));
        }
        if !(self.alpha_deg >= 0.0) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        Ok(())
    }
}

/// One neighborhood of the cloud to be covered by a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Index of the patch among all sampled centers (stable across drops).
    pub id: usize,
    pub center_index: usize,
    pub center: Point3,
    pub center_normal: Option<Vector3>,
    /// Cloud indices in the `c r` ball that pass the normal filter, sorted.
    pub core: Vec<usize>,
    /// Cloud indices in the `c̃ r` ball that pass the normal filter, sorted.
    pub fit: Vec<usize>,
    /// Maps normalized coordinates to the chart's local frame.
    pub local: NormalizationTransform,
}

impl Patch {
    /// A patch over explicit index sets. `core` must be a subset of `fit`.
    pub fn new(
        id: usize,
        cloud: &PointCloud,
        center_index: usize,
        mut core: Vec<usize>,
        mut fit: Vec<usize>,
    ) -> Result<Self> {
        core.sort_unstable();
        core.dedup();
        fit.sort_unstable();
        fit.dedup();
        if center_index >= cloud.len() || fit.iter().chain(&core).any(|&i| i >= cloud.len()) {
            return Err(Error::invalid("patch index out of range"));
        }
        if core.iter().any(|i| fit.binary_search(i).is_err()) {
            return Err(Error::invalid("core set must be contained in the fit set"));
        }
        if fit.is_empty() {
            return Err(Error::invalid("patch fit set is empty"));
        }
        let fit_points: Vec<Point3> = fit.iter().map(|&i| cloud.points()[i]).collect();
        let local = local_frame(&fit_points);
        Ok(Self {
            id,
            center_index,
            center: cloud.points()[center_index],
            center_normal: cloud.normals().map(|n| n[center_index]),
            core,
            fit,
            local,
        })
    }

    /// Position of a cloud index within the fit set.
    pub fn fit_position(&self, cloud_index: usize) -> Option<usize> {
        self.fit.binary_search(&cloud_index).ok()
    }
}

/// Centroid/diagonal frame of the fit points; a pure translation when the
/// points coincide.
fn local_frame(points: &[Point3]) -> NormalizationTransform {
    NormalizationTransform::fit(points).unwrap_or_else(|_| {
        let c = points[0];
        NormalizationTransform {
            center: [c.x, c.y, c.z],
            scale: 1.0,
        }
    })
}

/// A center that did not yield a usable patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedPatch {
    pub id: usize,
    pub center_index: usize,
    pub fit_size: usize,
}

/// Accounting of how input points are covered by kept patches:
/// `covered + filtered_out + uncovered == total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageReport {
    pub total: usize,
    /// In the core set of at least one kept patch.
    pub covered: usize,
    /// Inside some kept patch's core ball but rejected by the normal filter
    /// at every such patch.
    pub filtered_out: usize,
    /// Inside no kept patch's core ball.
    pub uncovered: usize,
}

#[derive(Debug, Clone)]
pub struct PatchLayout {
    pub patches: Vec<Patch>,
    pub dropped: Vec<DroppedPatch>,
    pub coverage: CoverageReport,
}

fn normal_filter(
    cloud: &PointCloud,
    center_normal: &Vector3,
    alpha_deg: f64,
    candidates: Vec<usize>,
) -> Vec<usize> {
    if alpha_deg >= 180.0 {
        return candidates;
    }
    let normals = cloud.normals().expect("caller checked normals");
    candidates
        .into_iter()
        .filter(|&i| angle_between(&normals[i], center_normal).to_degrees() <= alpha_deg)
        .collect()
}

/// Samples patch centers and extracts their core and fit sets. The cloud is
/// expected in normalized coordinates and must carry normals.
pub fn build_patches(cloud: &PointCloud, params: &PatchParams) -> Result<PatchLayout> {
    params.validate()?;
    let normals = cloud
        .normals()
        .ok_or_else(|| Error::invalid("building patches requires normals; estimate them first"))?;
    let centers = poisson_disk_cloud(cloud.points(), params.r, params.seed)?;
    let index = SpatialIndex::new(cloud.points());

    let mut patches = Vec::new();
    let mut dropped = Vec::new();
    let mut in_ball = vec![false; cloud.len()];
    let mut in_core = vec![false; cloud.len()];
    for (id, &ci) in centers.indices.iter().enumerate() {
        let q = cloud.points()[ci];
        let nq = normals[ci];
        let core_ball = index.radius_query(&q, params.c * params.r);
        let fit_ball = index.radius_query(&q, params.c_tilde * params.r);
        let core = normal_filter(cloud, &nq, params.alpha_deg, core_ball.clone());
        let fit = normal_filter(cloud, &nq, params.alpha_deg, fit_ball);
        if fit.len() < MIN_FIT_POINTS || core.is_empty() {
            warn!(
                "dropping patch {id} at point {ci}: {} points after normal filtering",
                fit.len()
            );
            dropped.push(DroppedPatch {
                id,
                center_index: ci,
                fit_size: fit.len(),
            });
            continue;
        }
        for &i in &core_ball {
            in_ball[i] = true;
        }
        for &i in &core {
            in_core[i] = true;
        }
        patches.push(Patch::new(id, cloud, ci, core, fit)?);
    }
    let covered = in_core.iter().filter(|&&b| b).count();
    let balls = in_ball.iter().filter(|&&b| b).count();
    let coverage = CoverageReport {
        total: cloud.len(),
        covered,
        filtered_out: balls - covered,
        uncovered: cloud.len() - balls,
    };
    Ok(PatchLayout {
        patches,
        dropped,
        coverage,
    })
}
