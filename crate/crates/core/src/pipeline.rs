//! End-to-end commands: each reads its inputs, runs the algorithm and writes
//! its outputs (PLY, CSV, config echo) under `RunConfig::out`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::atlas::{
    build_overlaps, build_patches, consistency_loss, fit_chart, fit_consistency, resample,
    save_atlas, Atlas, ConsistencyReport, DenseSample, FittedPatch, Patch, StopReason,
};
use crate::config::{RunConfig, CONFIG_ECHO_NAME};
use crate::error::{Error, Result};
use crate::eval::{
    cumulative_histogram, one_sided, sample_mesh, stats, write_histogram_csv, write_stats_csv,
    Direction, OneSidedDistances, StatsRecord,
};
use crate::geometry::{estimate_normals, normalize, NormalizationTransform, PointCloud};
use crate::io::{read_cloud, read_mesh, write_cloud, PlyEncoding};

pub const DENSE_NAME: &str = "dense.ply";
pub const ATLAS_DIR: &str = "atlas";
pub const REPORT_NAME: &str = "report.csv";
pub const SUMMARY_NAME: &str = "summary.csv";
pub const LOSS_LOG_NAME: &str = "loss_log.csv";
pub const LAMBDA_SWEEP_NAME: &str = "lambda_sweep.csv";
pub const STATS_NAME: &str = "stats.csv";
pub const NORMALS_NAME: &str = "normals.ply";

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, format!("csv write failed: {e}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_error(path))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn prepare_out(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let path = config.out.join(CONFIG_ECHO_NAME);
    fs::write(&path, config.echo()).map_err(|e| Error::io(&path, e))
}

fn input_path(config: &RunConfig) -> Result<&Path> {
    config
        .input
        .as_deref()
        .ok_or_else(|| Error::invalid("no input file given"))
}

/// Runs `f` on a thread pool sized by the configuration.
fn with_threads<T: Send>(config: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start thread pool: {e}")))?;
    pool.install(f)
}

/// Reads the input cloud, estimating normals when the file has none.
pub fn load_input(config: &RunConfig) -> Result<PointCloud> {
    let cloud = read_cloud(input_path(config)?)?;
    if cloud.has_normals() {
        Ok(cloud)
    } else {
        log::info!(
            "input has no normals; estimating with k = {}",
            config.normals_k
        );
        estimate_normals(&cloud, config.normals_k.min(cloud.len()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchRow {
    pub patch_id: usize,
    pub status: &'static str,
    pub center_index: usize,
    pub core_points: usize,
    pub fit_points: usize,
    pub phase1_iterations: usize,
    pub stop: String,
    /// Exact-matching transport cost per point after phase one.
    pub emd_per_point: f64,
    /// Data term per point after phase two.
    pub data_loss_per_point: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SummaryRow {
    key: &'static str,
    value: String,
}

#[derive(Debug, Clone)]
pub struct ReconstructOutcome {
    pub atlas: Atlas,
    pub dense: DenseSample,
    pub patches: Vec<PatchRow>,
    pub consistency_before: f64,
    pub consistency_after: f64,
    pub phase2: Option<ConsistencyReport>,
}

fn stop_label(s: StopReason) -> String {
    match s {
        StopReason::MaxIterations => "max_iterations",
        StopReason::Plateau => "plateau",
        StopReason::LossFloor => "loss_floor",
    }
    .to_string()
}

fn patch_row(fp: &FittedPatch, cloud: &PointCloud) -> PatchRow {
    let n = fp.patch.fit.len();
    PatchRow {
        patch_id: fp.patch.id,
        status: "fitted",
        center_index: fp.patch.center_index,
        core_points: fp.patch.core.len(),
        fit_points: n,
        phase1_iterations: fp.report.iterations,
        stop: stop_label(fp.report.stop),
        emd_per_point: fp.report.emd_per_point(n),
        data_loss_per_point: fp.data_loss(cloud) / n as f64,
    }
}

/// Full reconstruction: patches, phase-one fits, overlaps, phase two and
/// dense resampling. Writes the dense PLY, the atlas directory, a per-patch
/// report, a run summary and the phase-two loss log.
pub fn reconstruct(config: &RunConfig) -> Result<ReconstructOutcome> {
    config.validate()?;
    let world = load_input(config)?;
    prepare_out(config)?;
    with_threads(config, || reconstruct_cloud(config, &world))
}

fn reconstruct_cloud(config: &RunConfig, world: &PointCloud) -> Result<ReconstructOutcome> {
    let t0 = Instant::now();
    let (cloud, transform) = normalize(world)?;
    let layout = build_patches(&cloud, &config.patch_params())?;
    if layout.patches.is_empty() {
        return Err(Error::Degenerate("no usable patches".into()));
    }
    log::info!(
        "{} patches ({} dropped), {} of {} points covered",
        layout.patches.len(),
        layout.dropped.len(),
        layout.coverage.covered,
        layout.coverage.total
    );
    let fit_params = config.fit_params()?;
    let mut fitted: Vec<FittedPatch> = layout
        .patches
        .par_iter()
        .map(|p| fit_chart(p, &cloud, &fit_params))
        .collect::<Result<_>>()?;
    let phase1_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut overlaps = build_overlaps(&fitted, &cloud)?;
    let before = consistency_loss(&fitted, &overlaps)?;
    let phase2 = if config.phase2_iters > 0 {
        Some(fit_consistency(
            &mut fitted,
            &mut overlaps,
            &cloud,
            &config.consistency_params(),
        )?)
    } else {
        None
    };
    let after = consistency_loss(&fitted, &overlaps)?;
    let phase2_secs = t1.elapsed().as_secs_f64();

    let dense = resample(&fitted, &transform, config.grid_m, config.margin)?;

    let mut rows: Vec<PatchRow> = fitted.iter().map(|fp| patch_row(fp, &cloud)).collect();
    rows.extend(layout.dropped.iter().map(|d| PatchRow {
        patch_id: d.id,
        status: "dropped",
        center_index: d.center_index,
        core_points: 0,
        fit_points: d.fit_size,
        phase1_iterations: 0,
        stop: String::new(),
        emd_per_point: f64::NAN,
        data_loss_per_point: f64::NAN,
    }));
    rows.sort_by_key(|r| r.patch_id);

    let atlas = Atlas {
        patches: fitted,
        overlaps,
        transform,
        hyperparams: config.hyperparams(),
    };
    let out = &config.out;
    write_cloud(
        &dense,
        &out.join(DENSE_NAME),
        PlyEncoding::BinaryLittleEndian,
    )?;
    save_atlas(&atlas, &out.join(ATLAS_DIR))?;
    write_rows(&out.join(REPORT_NAME), &rows)?;
    write_phase2_log(&out.join(LOSS_LOG_NAME), phase2.as_ref())?;
    let summary = [
        ("points", world.len().to_string()),
        ("patches", atlas.patches.len().to_string()),
        ("dropped_patches", layout.dropped.len().to_string()),
        ("covered_points", layout.coverage.covered.to_string()),
        (
            "filtered_out_points",
            layout.coverage.filtered_out.to_string(),
        ),
        ("uncovered_points", layout.coverage.uncovered.to_string()),
        (
            "overlap_correspondences",
            atlas.overlaps.correspondences().to_string(),
        ),
        ("consistency_loss_before", format!("{before:e}")),
        ("consistency_loss_after", format!("{after:e}")),
        (
            "phase2_sweeps",
            phase2.as_ref().map_or(0, |r| r.sweeps).to_string(),
        ),
        ("dense_points", dense.len().to_string()),
        ("phase1_seconds", format!("{phase1_secs:.3}")),
        ("phase2_seconds", format!("{phase2_secs:.3}")),
    ];
    write_summary(&out.join(SUMMARY_NAME), &summary)?;
    Ok(ReconstructOutcome {
        atlas,
        dense,
        patches: rows,
        consistency_before: before,
        consistency_after: after,
        phase2,
    })
}

fn write_summary(path: &Path, rows: &[(&'static str, String)]) -> Result<()> {
    let rows: Vec<SummaryRow> = rows
        .iter()
        .map(|(key, value)| SummaryRow {
            key,
            value: value.clone(),
        })
        .collect();
    write_rows(path, &rows)
}

fn write_phase2_log(path: &Path, report: Option<&ConsistencyReport>) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        sweep: usize,
        consistency: f64,
        data: f64,
    }
    let rows: Vec<Row> = report
        .map(|r| {
            r.loss_log
                .iter()
                .enumerate()
                .map(|(sweep, &(consistency, data))| Row {
                    sweep,
                    consistency,
                    data,
                })
                .collect()
        })
        .unwrap_or_default();
    if rows.is_empty() {
        let mut w = csv_writer(path)?;
        w.write_record(["sweep", "consistency", "data"])
            .map_err(csv_error(path))?;
        return w.flush().map_err(|e| Error::io(path, e));
    }
    write_rows(path, &rows)
}

#[derive(Debug, Clone)]
pub struct FitPatchOutcome {
    pub fitted: FittedPatch,
    pub dense: DenseSample,
    pub transform: NormalizationTransform,
}

impl FitPatchOutcome {
    pub fn emd_per_point(&self) -> f64 {
        self.fitted
            .report
            .emd_per_point(self.fitted.patch.fit.len())
    }
}

/// Fits a single chart to the whole input cloud.
fn fit_single(config: &RunConfig, world: &PointCloud) -> Result<FitPatchOutcome> {
    let (cloud, transform) = normalize(world)?;
    let all: Vec<usize> = (0..cloud.len()).collect();
    let patch = Patch::new(0, &cloud, 0, all.clone(), all)?;
    let fitted = fit_chart(&patch, &cloud, &config.fit_params()?)?;
    let dense = resample(
        std::slice::from_ref(&fitted),
        &transform,
        config.grid_m,
        config.margin,
    )?;
    Ok(FitPatchOutcome {
        fitted,
        dense,
        transform,
    })
}

/// Overfits one chart to the entire input and writes the dense sample with
/// its texture coordinates and the phase-one loss log.
pub fn fit_patch(config: &RunConfig) -> Result<FitPatchOutcome> {
    config.validate()?;
    let world = read_cloud(input_path(config)?)?;
    prepare_out(config)?;
    let t0 = Instant::now();
    let outcome = with_threads(config, || fit_single(config, &world))?;
    let out = &config.out;
    write_cloud(
        &outcome.dense,
        &out.join(DENSE_NAME),
        PlyEncoding::BinaryLittleEndian,
    )?;

    #[derive(Serialize)]
    struct Row {
        iteration: usize,
        loss_per_point: f64,
    }
    let n = world.len() as f64;
    let rows: Vec<Row> = outcome
        .fitted
        .report
        .loss_log
        .iter()
        .enumerate()
        .map(|(iteration, l)| Row {
            iteration,
            loss_per_point: l / n,
        })
        .collect();
    write_rows(&out.join(LOSS_LOG_NAME), &rows)?;
    let r = &outcome.fitted.report;
    write_summary(
        &out.join(SUMMARY_NAME),
        &[
            ("points", world.len().to_string()),
            ("iterations", r.iterations.to_string()),
            ("stop", stop_label(r.stop)),
            ("emd_per_point", format!("{:e}", outcome.emd_per_point())),
            ("unconverged_plans", r.unconverged_plans.to_string()),
            ("dense_points", outcome.dense.len().to_string()),
            ("seconds", format!("{:.3}", t0.elapsed().as_secs_f64())),
        ],
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub eps: f64,
    pub iterations: usize,
    pub emd: f64,
    pub emd_per_point: f64,
}

/// Repeats the single-chart fit for every `lambda` and tabulates the final
/// exact-matching transport cost.
pub fn lambda_sweep(config: &RunConfig, lambdas: &[f64]) -> Result<Vec<LambdaRow>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda list is empty"));
    }
    config.validate()?;
    let world = read_cloud(input_path(config)?)?;
    prepare_out(config)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut c = config.clone();
        c.lambda = lambda;
        c.validate()?;
        let outcome = with_threads(&c, || fit_single(&c, &world))?;
        log::info!(
            "lambda {lambda}: emd per point {:e}",
            outcome.emd_per_point()
        );
        rows.push(LambdaRow {
            lambda,
            eps: c.eps(),
            iterations: outcome.fitted.report.iterations,
            emd: outcome.fitted.report.emd,
            emd_per_point: outcome.emd_per_point(),
        });
    }
    write_rows(&config.out.join(LAMBDA_SWEEP_NAME), &rows)?;
    Ok(rows)
}

/// Distances between a reconstruction, its input and optionally a ground
/// truth.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub distances: Vec<OneSidedDistances>,
    pub stats: Vec<StatsRecord>,
}

fn read_ground_truth(path: &Path, samples: usize, seed: u64) -> Result<PointCloud> {
    let is_mesh = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
        && {
            // a PLY with a non-empty face element is treated as a mesh
            read_mesh(path).is_ok()
        };
    if is_mesh {
        PointCloud::from_points(sample_mesh(&read_mesh(path)?, samples, seed)?)
    } else {
        read_cloud(path)
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// Measures `input -> reconstruction` and either `reconstruction -> ground
/// truth` or, without a ground truth, `reconstruction -> input`. Writes the
/// per-point distances, cumulative histograms and a statistics table.
pub fn evaluate(
    config: &RunConfig,
    reconstruction: &Path,
    ground_truth: Option<&Path>,
    method: &str,
) -> Result<Evaluation> {
    config.validate()?;
    let input_path = input_path(config)?;
    let input = read_cloud(input_path)?;
    let rec = read_cloud(reconstruction)?;
    prepare_out(config)?;
    with_threads(config, || {
        let mut distances = vec![one_sided(
            input.points(),
            rec.points(),
            Direction::InputToReconstruction,
        )?];
        match ground_truth {
            Some(gt) => {
                let gt = read_ground_truth(gt, config.gt_samples, config.seed)?;
                distances.push(one_sided(
                    rec.points(),
                    gt.points(),
                    Direction::ReconstructionToGroundTruth,
                )?);
            }
            None => distances.push(one_sided(
                rec.points(),
                input.points(),
                Direction::ReconstructionToInput,
            )?),
        }
        let model = file_stem(input_path);
        let mut rows = Vec::new();
        for d in &distances {
            let tag = d.direction.file_tag();
            write_distances(
                &config.out.join(format!("distances_{tag}.csv")),
                &d.distances,
            )?;
            let h = cumulative_histogram(&d.distances, config.n_bins)?;
            let path = config.out.join(format!("histogram_{tag}.csv"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_histogram_csv(BufWriter::new(file), &h)?;
            rows.push(StatsRecord::new(
                &model,
                method,
                d.direction,
                stats(&d.distances)?,
            ));
        }
        let path = config.out.join(STATS_NAME);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_stats_csv(BufWriter::new(file), &rows)?;
        Ok(Evaluation {
            distances,
            stats: rows,
        })
    })
}

fn write_distances(path: &Path, d: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["index", "distance"])
        .map_err(csv_error(path))?;
    for (i, x) in d.iter().enumerate() {
        w.write_record([i.to_string(), x.to_string()])
            .map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Estimates oriented normals for the input and writes them as PLY, to
/// `output` or `<out>/normals.ply`.
pub fn estimate_input_normals(config: &RunConfig, output: Option<&Path>) -> Result<PathBuf> {
    config.validate()?;
    let cloud = read_cloud(input_path(config)?)?;
    prepare_out(config)?;
    let with_normals = estimate_normals(&cloud, config.normals_k)?;
    let path = output.map_or_else(|| config.out.join(NORMALS_NAME), Path::to_path_buf);
    write_cloud(&with_normals, &path, PlyEncoding::BinaryLittleEndian)?;
    Ok(path)
}
