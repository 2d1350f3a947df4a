//! Poisson-disk sampling of the unit square and of point clouds.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point3, SpatialIndex};

/// Per-round radius relaxation when dart throwing falls short.
const RELAXATION: f64 = 0.98;
/// Dart-throwing attempts per requested sample in one round.
const ATTEMPTS_PER_SAMPLE: usize = 60;

/// Points in the open unit square, pairwise at least `radius` apart.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSample {
    pub points: Vec<[f64; 2]>,
    pub radius: f64,
}

impl ParamSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Indices of selected cloud points, pairwise at least `radius` apart and
/// covering the cloud (every point lies within `radius` of a selection).
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    pub indices: Vec<usize>,
    pub radius: f64,
}

/// Mixes a base seed with a stream tag and an id (SplitMix64 finalizer), so
/// each patch gets a decorrelated but reproducible seed.
pub fn derive_seed(seed: u64, stream: u64, id: u64) -> u64 {
    let mut z =
        seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Exactly `n_target` Poisson-disk samples in `(0,1)²`.
///
/// Dart throwing starts at radius `sqrt(1 / (2 n))` and shrinks the radius
/// by 2% after every round that fails to place all samples.
pub fn poisson_disk_square(n_target: usize, seed: u64) -> Result<ParamSample> {
    if n_target == 0 {
        return Err(Error::invalid(
            "Poisson-disk sampling needs at least one sample",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radius = (1.0 / (2.0 * n_target as f64)).sqrt();
    loop {
        if let Some(points) = dart_throw(n_target, radius, &mut rng) {
            return Ok(ParamSample { points, radius });
        }
        radius *= RELAXATION;
    }
}

fn dart_throw(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> Option<Vec<[f64; 2]>> {
    // cells of side r/√2 hold at most one sample
    let cell = radius / std::f64::consts::SQRT_2;
    let dim = (1.0 / cell).ceil() as usize;
    let mut grid: Vec<Option<usize>> = vec![None; dim * dim];
    let cell_of = |x: f64| ((x / cell) as usize).min(dim - 1);
    let mut points: Vec<[f64; 2]> = Vec::with_capacity(n);
    let r2 = radius * radius;
    for _ in 0..ATTEMPTS_PER_SAMPLE * n {
        let p = [rng.random::<f64>(), rng.random::<f64>()];
        if p[0] <= 0.0 || p[1] <= 0.0 {
            continue;
        }
        let (cx, cy) = (cell_of(p[0]), cell_of(p[1]));
        let mut ok = true;
        'scan: for gy in cy.saturating_sub(2)..(cy + 3).min(dim) {
            for gx in cx.saturating_sub(2)..(cx + 3).min(dim) {
                if let Some(k) = grid[gy * dim + gx] {
                    let q = points[k];
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if d2 < r2 {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            grid[cy * dim + cx] = Some(points.len());
            points.push(p);
            if points.len() == n {
                return Some(points);
            }
        }
    }
    None
}

/// Greedy Poisson-disk subsampling of a cloud: visit points in a seeded
/// random order and keep each one that has no kept point closer than `r`.
pub fn poisson_disk_cloud(points: &[Point3], r: f64, seed: u64) -> Result<CenterSet> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!(
            "Poisson-disk radius must be positive, got {r}"
        )));
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = SpatialIndex::new(points);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut covered = vec![false; points.len()];
    let mut indices = Vec::new();
    for i in order {
        if covered[i] {
            continue;
        }
        indices.push(i);
        for j in index.radius_query(&points[i], r) {
            if (points[j] - points[i]).norm() < r {
                covered[j] = true;
            }
        }
    }
    Ok(CenterSet { indices, radius: r })
}
