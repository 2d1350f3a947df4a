use ndarray::Array2;
use rayon::prelude::*;

use super::FittedPatch;
use crate::error::{Error, Result};
use crate::geometry::{NormalizationTransform, Point3, Vector3};
use crate::nn::normal_and_area;

/// Dense oriented samples of an atlas, in world coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenseSample {
    pub points: Vec<Point3>,
    pub normals: Vec<Vector3>,
    pub uv: Vec<[f64; 2]>,
    pub patch_id: Vec<u32>,
    /// Area element `‖∂φ/∂u × ∂φ/∂v‖` in world units.
    pub area: Vec<f64>,
}

impl DenseSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn append(&mut self, mut other: DenseSample) {
        self.points.append(&mut other.points);
        self.normals.append(&mut other.normals);
        self.uv.append(&mut other.uv);
        self.patch_id.append(&mut other.patch_id);
        self.area.append(&mut other.area);
    }
}

/// `m x m` grid over `[margin, 1 - margin]²`, row-major in `v`.
pub fn uv_grid(grid_m: usize, margin: f64) -> Vec<[f64; 2]> {
    let step = (1.0 - 2.0 * margin) / (grid_m - 1) as f64;
    let mut out = Vec::with_capacity(grid_m * grid_m);
    for b in 0..grid_m {
        for a in 0..grid_m {
            out.push([margin + a as f64 * step, margin + b as f64 * step]);
        }
    }
    out
}

fn resample_patch(
    fp: &FittedPatch,
    world: &NormalizationTransform,
    grid: &[[f64; 2]],
) -> DenseSample {
    // world -> normalized -> chart frame, inverted
    let to_chart = world.then(&fp.patch.local);
    let s = to_chart.scale;
    let mut inputs = Array2::zeros((grid.len(), 2));
    for (k, uv) in grid.iter().enumerate() {
        inputs[[k, 0]] = uv[0];
        inputs[[k, 1]] = uv[1];
    }
    let out = fp.net.forward_batch(inputs.view());
    let mut dense = DenseSample::default();
    for (k, uv) in grid.iter().enumerate() {
        let (n, a) = normal_and_area(&fp.net.jacobian(*uv));
        if a == 0.0 {
            continue;
        }
        let y = out.row(k);
        dense
            .points
            .push(to_chart.invert(&Point3::new(y[0], y[1], y[2])));
        dense.normals.push(Vector3::new(n[0], n[1], n[2]));
        dense.uv.push(*uv);
        dense.patch_id.push(fp.patch.id as u32);
        dense.area.push(a * s * s);
    }
    // orient the chart like the normal at its center point
    if let Some(nc) = fp.patch.center_normal {
        let agreement: f64 = dense.normals.iter().map(|n| n.dot(&nc)).sum();
        if agreement < 0.0 {
            dense.normals.iter_mut().for_each(|n| *n = -*n);
        }
    }
    dense
}

/// Evaluates every chart on an `m x m` parameter grid and returns world-space
/// points with analytic normals. Points where the Jacobian is degenerate are
/// dropped.
pub fn resample(
    patches: &[FittedPatch],
    world: &NormalizationTransform,
    grid_m: usize,
    margin: f64,
) -> Result<DenseSample> {
    if grid_m < 2 {
        return Err(Error::invalid(format!(
            "grid size must be at least 2, got {grid_m}"
        )));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(Error::invalid(format!(
            "margin must lie in [0, 0.5), got {margin}"
        )));
    }
    let grid = uv_grid(grid_m, margin);
    let parts: Vec<DenseSample> = patches
        .par_iter()
        .map(|fp| resample_patch(fp, world, &grid))
        .collect();
    let mut dense = DenseSample::default();
    for p in parts {
        dense.append(p);
    }
    Ok(dense)
}
