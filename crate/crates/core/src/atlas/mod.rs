//! Patch layout, per-chart fitting, overlap consistency and resampling.

mod consistency;
mod fit;
mod patch;
mod resample;
mod store;

pub use consistency::{
    build_overlaps, consistency_loss, correspondence_terms, fit_consistency, ConsistencyParams,
    ConsistencyReport, CorrespondenceTerm, Overlap, OverlapTable,
};
pub use fit::{fit_chart, FitParams, FitReport, FittedPatch, StopReason};
pub use patch::{
    build_patches, CoverageReport, DroppedPatch, Patch, PatchLayout, PatchParams, MIN_FIT_POINTS,
};
pub use resample::{resample, uv_grid, DenseSample};
pub use store::{chart_file_name, load_atlas, save_atlas, MANIFEST_NAME};

use serde::{Deserialize, Serialize};

use crate::geometry::NormalizationTransform;

/// Settings an atlas was built with, kept alongside it for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasHyperparams {
    pub r: f64,
    pub c: f64,
    pub c_tilde: f64,
    pub alpha_deg: f64,
    pub eps: f64,
    pub layers: Vec<usize>,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub w_fit: f64,
    pub seed: u64,
}

/// Fitted charts over a normalized cloud, with their overlaps and the
/// transform back to world coordinates.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub patches: Vec<FittedPatch>,
    pub overlaps: OverlapTable,
    /// World to normalized coordinates.
    pub transform: NormalizationTransform,
    pub hyperparams: AtlasHyperparams,
}
