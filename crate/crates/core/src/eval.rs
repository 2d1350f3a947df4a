//! One-sided point-set distances, cumulative error histograms and summary
//! statistics.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, SpatialIndex};
use crate::io::TriangleMesh;

/// Default number of area-uniform samples drawn from a ground-truth mesh.
pub const DEFAULT_MESH_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// From the input cloud to the reconstruction (recall).
    #[serde(rename = "inp->rec")]
    InputToReconstruction,
    /// From the reconstruction to the ground truth (precision).
    #[serde(rename = "rec->gt")]
    ReconstructionToGroundTruth,
    /// From the reconstruction back to the input, when no ground truth is
    /// available.
    #[serde(rename = "rec->inp")]
    ReconstructionToInput,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::InputToReconstruction => "inp->rec",
            Direction::ReconstructionToGroundTruth => "rec->gt",
            Direction::ReconstructionToInput => "rec->inp",
        }
    }

    /// Label usable in file names.
    pub fn file_tag(self) -> &'static str {
        match self {
            Direction::InputToReconstruction => "inp_to_rec",
            Direction::ReconstructionToGroundTruth => "rec_to_gt",
            Direction::ReconstructionToInput => "rec_to_inp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneSidedDistances {
    pub direction: Direction,
    pub distances: Vec<f64>,
}

/// Distance from every source point to its nearest target point.
pub fn one_sided(
    source: &[Point3],
    target: &[Point3],
    direction: Direction,
) -> Result<OneSidedDistances> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = SpatialIndex::new(target);
    let distances = source
        .par_iter()
        .map(|p| index.nearest(p).map(|(_, d)| d).unwrap_or(f64::INFINITY))
        .collect();
    Ok(OneSidedDistances {
        direction,
        distances,
    })
}

/// [`one_sided`] for point clouds.
pub fn one_sided_clouds(
    source: &PointCloud,
    target: &PointCloud,
    direction: Direction,
) -> Result<OneSidedDistances> {
    one_sided(source.points(), target.points(), direction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeHistogram {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

/// Fraction of distances at or below each of the given sorted thresholds.
pub fn histogram_at(d: &[f64], thresholds: &[f64]) -> Result<CumulativeHistogram> {
    if d.is_empty() {
        return Err(Error::invalid("no distances"));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("thresholds must be sorted"));
    }
    let mut sorted = d.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let fractions = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|&x| x <= t) as f64 / n)
        .collect();
    Ok(CumulativeHistogram {
        thresholds: thresholds.to_vec(),
        fractions,
    })
}

/// Cumulative histogram over `n_bins` thresholds spaced evenly from 0 to the
/// largest distance.
pub fn cumulative_histogram(d: &[f64], n_bins: usize) -> Result<CumulativeHistogram> {
    if n_bins < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 bins, got {n_bins}"
        )));
    }
    let max = d.iter().copied().fold(0.0, f64::max);
    let mut thresholds: Vec<f64> = (0..n_bins)
        .map(|i| i as f64 * max / (n_bins - 1) as f64)
        .collect();
    // the last threshold is exactly the maximum so the curve ends at 1
    thresholds[n_bins - 1] = max;
    histogram_at(d, &thresholds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatsRow {
    pub min: f64,
    pub avg: f64,
    pub std: f64,
    pub max: f64,
}

/// Minimum, mean, population standard deviation and maximum.
pub fn stats(d: &[f64]) -> Result<StatsRow> {
    if d.is_empty() {
        return Err(Error::invalid("no distances"));
    }
    let n = d.len() as f64;
    let avg = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / n;
    Ok(StatsRow {
        min: d.iter().copied().fold(f64::INFINITY, f64::min),
        avg,
        std: var.sqrt(),
        max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Draws `n` points uniformly with respect to surface area.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Point3>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let tri = |t: &[usize; 3]| {
        (
            mesh.vertices[t[0]],
            mesh.vertices[t[1]],
            mesh.vertices[t[2]],
        )
    };
    let areas: Vec<f64> = mesh
        .triangles
        .iter()
        .map(|t| {
            let (a, b, c) = tri(t);
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .collect();
    let pick = WeightedIndex::new(&areas)
        .map_err(|_| Error::Degenerate("mesh has zero total area".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (a, b, c) = tri(&mesh.triangles[pick.sample(&mut rng)]);
            let r1: f64 = rng.random::<f64>().sqrt();
            let r2: f64 = rng.random();
            Point3::from(
                a.coords * (1.0 - r1) + b.coords * (r1 * (1.0 - r2)) + c.coords * (r1 * r2),
            )
        })
        .collect())
}

pub fn write_histogram_csv<W: Write>(w: W, h: &CumulativeHistogram) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    out.write_record(["threshold", "fraction"])
        .map_err(csv_err)?;
    for (t, f) in h.thresholds.iter().zip(&h.fractions) {
        out.write_record([t.to_string(), f.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()
        .map_err(|e| Error::invalid(format!("csv write failed: {e}")))
}

/// One line of a statistics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRecord {
    pub model: String,
    pub method: String,
    pub direction: Direction,
    pub min: f64,
    pub avg: f64,
    pub std: f64,
    pub max: f64,
}

impl StatsRecord {
    pub fn new(model: &str, method: &str, direction: Direction, s: StatsRow) -> Self {
        Self {
            model: model.into(),
            method: method.into(),
            direction,
            min: s.min,
            avg: s.avg,
            std: s.std,
            max: s.max,
        }
    }
}

pub fn write_stats_csv<W: Write>(w: W, rows: &[StatsRecord]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let csv_err = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    out.write_record(["model", "method", "direction", "min", "avg", "std", "max"])
        .map_err(csv_err)?;
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()
        .map_err(|e| Error::invalid(format!("csv write failed: {e}")))
}
