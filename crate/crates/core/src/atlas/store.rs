use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::{FitReport, StopReason};
use super::{Atlas, AtlasHyperparams, FittedPatch, Overlap, OverlapTable, Patch};
use crate::error::{Error, Result};
use crate::geometry::{NormalizationTransform, Point3, Vector3};
use crate::nn::{read_chartnet, write_chartnet};
use crate::sampling::ParamSample;

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "chartatlas-manifest-1";

#[derive(Serialize, Deserialize)]
struct PatchRecord {
    id: usize,
    center_index: usize,
    center: [f64; 3],
    center_normal: Option<[f64; 3]>,
    core: Vec<usize>,
    fit: Vec<usize>,
    local: NormalizationTransform,
    sample_radius: f64,
    samples: Vec<[f64; 2]>,
    pi: Vec<usize>,
    emd: f64,
    iterations: usize,
    stop: StopReason,
    chart: String,
}

#[derive(Serialize, Deserialize)]
struct OverlapRecord {
    p: usize,
    q: usize,
    samples_p: Vec<usize>,
    samples_q: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    transform: NormalizationTransform,
    hyperparams: AtlasHyperparams,
    patches: Vec<PatchRecord>,
    overlaps: Vec<OverlapRecord>,
}

pub fn chart_file_name(position: usize) -> String {
    format!("chart_{position:04}.bin")
}

/// Writes `manifest.json` and one chart file per patch into `dir`.
pub fn save_atlas(atlas: &Atlas, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut patches = Vec::with_capacity(atlas.patches.len());
    for (k, fp) in atlas.patches.iter().enumerate() {
        let name = chart_file_name(k);
        let path = dir.join(&name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_chartnet(&fp.net, &mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        let p = &fp.patch;
        patches.push(PatchRecord {
            id: p.id,
            center_index: p.center_index,
            center: [p.center.x, p.center.y, p.center.z],
            center_normal: p.center_normal.map(|n| [n.x, n.y, n.z]),
            core: p.core.clone(),
            fit: p.fit.clone(),
            local: p.local,
            sample_radius: fp.samples.radius,
            samples: fp.samples.points.clone(),
            pi: fp.pi.clone(),
            emd: fp.report.emd,
            iterations: fp.report.iterations,
            stop: fp.report.stop,
            chart: name,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        transform: atlas.transform,
        hyperparams: atlas.hyperparams.clone(),
        patches,
        overlaps: atlas
            .overlaps
            .entries
            .iter()
            .map(|e| OverlapRecord {
                p: e.p,
                q: e.q,
                samples_p: e.samples_p.clone(),
                samples_q: e.samples_q.clone(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST_NAME);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads an atlas written by [`save_atlas`]. Loss logs are not stored.
pub fn load_atlas(dir: &Path) -> Result<Atlas> {
    let path = dir.join(MANIFEST_NAME);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::format(
            &path,
            format!("unknown manifest format {:?}", manifest.format),
        ));
    }
    let mut patches = Vec::with_capacity(manifest.patches.len());
    for rec in manifest.patches {
        let chart_path = dir.join(&rec.chart);
        let file = File::open(&chart_path).map_err(|e| Error::io(&chart_path, e))?;
        let net = read_chartnet(BufReader::new(file)).map_err(|e| match e {
            Error::InvalidArgument(message) => Error::format(&chart_path, message),
            other => other,
        })?;
        if rec.samples.len() != rec.fit.len() || rec.pi.len() != rec.fit.len() {
            return Err(Error::format(
                &path,
                format!("patch {} has inconsistent sizes", rec.id),
            ));
        }
        let patch = Patch {
            id: rec.id,
            center_index: rec.center_index,
            center: Point3::from(rec.center),
            center_normal: rec.center_normal.map(Vector3::from),
            core: rec.core,
            fit: rec.fit,
            local: rec.local,
        };
        patches.push(FittedPatch {
            patch,
            net,
            samples: ParamSample {
                points: rec.samples,
                radius: rec.sample_radius,
            },
            pi: rec.pi,
            potentials: None,
            report: FitReport {
                iterations: rec.iterations,
                loss_log: Vec::new(),
                emd: rec.emd,
                unconverged_plans: 0,
                sinkhorn_iterations: 0,
                marginal_residual: 0.0,
                stop: rec.stop,
            },
        });
    }
    let overlaps = OverlapTable {
        entries: manifest
            .overlaps
            .into_iter()
            .map(|o| Overlap {
                p: o.p,
                q: o.q,
                samples_p: o.samples_p,
                samples_q: o.samples_q,
            })
            .collect(),
    };
    if overlaps.entries.iter().any(|e| {
        e.p >= patches.len() || e.q >= patches.len() || e.samples_p.len() != e.samples_q.len()
    }) {
        return Err(Error::format(
            &path,
            "overlap table is inconsistent with the patches",
        ));
    }
    Ok(Atlas {
        patches,
        overlaps,
        transform: manifest.transform,
        hyperparams: manifest.hyperparams,
    })
}
