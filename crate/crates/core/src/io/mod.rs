//! Reading and writing point clouds (`.xyz`, `.ply`) and triangle meshes
//! (`.ply`).

mod ply;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::atlas::DenseSample;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vector3};

pub use ply::PlyEncoding;
use ply::{double, Column, Scalar};

/// Triangle soup with shared vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Xyz,
    Ply,
}

fn kind(path: &Path) -> Result<Kind> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("xyz") => Ok(Kind::Xyz),
        Some("ply") => Ok(Kind::Ply),
        _ => Err(Error::format(
            path,
            "unsupported extension; expected .xyz or .ply",
        )),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a point cloud. The format is chosen by extension; normals are loaded
/// when present and rescaled to unit length.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match kind(path)? {
        Kind::Xyz => read_xyz(open(path)?, path),
        Kind::Ply => read_ply_cloud(open(path)?, path),
    }
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn assemble(points: Vec<Point3>, normals: Option<Vec<Vector3>>, path: &Path) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::format(path, "file contains no points"));
    }
    let cloud = match normals {
        Some(ns) => PointCloud::with_raw_normals(points, ns),
        None => PointCloud::from_points(points),
    };
    cloud.map_err(|e| Error::format(path, e.to_string()))
}

fn read_xyz<R: BufRead>(r: R, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (k, line) in r.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::format(
                        path,
                        format!("line {lineno}: cannot parse {t:?} as a number"),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != 3 && values.len() != 6 {
            return Err(Error::format(
                path,
                format!(
                    "line {lineno}: expected 3 or 6 values, found {}",
                    values.len()
                ),
            ));
        }
        if *width.get_or_insert(values.len()) != values.len() {
            return Err(Error::format(
                path,
                format!("line {lineno}: mixes lines with and without normals"),
            ));
        }
        if !finite(&values) {
            return Err(Error::format(
                path,
                format!("line {lineno}: non-finite value"),
            ));
        }
        points.push(Point3::new(values[0], values[1], values[2]));
        if values.len() == 6 {
            normals.push(Vector3::new(values[3], values[4], values[5]));
        }
    }
    let normals = (width == Some(6)).then_some(normals);
    assemble(points, normals, path)
}

/// Vertex data with the indices of the x,y,z and (optional) nx,ny,nz columns.
type VertexColumns<'a> = (&'a ply::ElementData, [usize; 3], Option<[usize; 3]>);

fn vertex_columns<'a>(file: &'a ply::PlyFile, path: &Path) -> Result<VertexColumns<'a>> {
    let (el, data) = file
        .element("vertex")
        .ok_or_else(|| Error::format(path, "PLY has no vertex element"))?;
    let xyz = ["x", "y", "z"].map(|n| el.scalar_index(n));
    let [Some(x), Some(y), Some(z)] = xyz else {
        return Err(Error::format(
            path,
            format!(
                "vertex element lacks x, y, z properties (has {:?})",
                ply::property_names(el)
            ),
        ));
    };
    let nrm = ["nx", "ny", "nz"].map(|n| el.scalar_index(n));
    let normals = match nrm {
        [Some(a), Some(b), Some(c)] => Some([a, b, c]),
        [None, None, None] => None,
        _ => {
            return Err(Error::format(
                path,
                "vertex element has only some of nx, ny, nz",
            ))
        }
    };
    Ok((data, [x, y, z], normals))
}

fn read_ply_cloud<R: BufRead>(r: R, path: &Path) -> Result<PointCloud> {
    let file = ply::read_ply(r, path)?;
    if file
        .header
        .elements
        .iter()
        .any(|e| e.name == "face" && e.count > 0)
    {
        log::warn!(
            "{}: face element ignored, reading vertices only",
            path.display()
        );
    }
    let (data, [x, y, z], nrm) = vertex_columns(&file, path)?;
    let mut points = Vec::with_capacity(data.scalars.len());
    let mut normals = Vec::new();
    for (k, row) in data.scalars.iter().enumerate() {
        let mut vals = vec![row[x], row[y], row[z]];
        if let Some([a, b, c]) = nrm {
            vals.extend([row[a], row[b], row[c]]);
        }
        if !finite(&vals) {
            return Err(Error::format(path, format!("vertex {k}: non-finite value")));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        if nrm.is_some() {
            normals.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
    }
    assemble(points, nrm.map(|_| normals), path)
}

/// Reads a triangle mesh from PLY. Polygon faces are fan-triangulated.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    if kind(path)? != Kind::Ply {
        return Err(Error::format(path, "meshes must be PLY files"));
    }
    let file = ply::read_ply(open(path)?, path)?;
    let (data, [x, y, z], _) = vertex_columns(&file, path)?;
    let mut vertices = Vec::with_capacity(data.scalars.len());
    for (k, row) in data.scalars.iter().enumerate() {
        let p = [row[x], row[y], row[z]];
        if !finite(&p) {
            return Err(Error::format(path, format!("vertex {k}: non-finite value")));
        }
        vertices.push(Point3::new(p[0], p[1], p[2]));
    }
    let (_, faces) = file
        .element("face")
        .ok_or_else(|| Error::format(path, "PLY has no face element"))?;
    let mut triangles = Vec::new();
    for (k, lists) in faces.lists.iter().enumerate() {
        let idx = lists
            .first()
            .ok_or_else(|| Error::format(path, format!("face {k}: no vertex index list")))?;
        if idx.len() < 3 {
            return Err(Error::format(
                path,
                format!("face {k}: fewer than 3 vertices"),
            ));
        }
        let idx = idx
            .iter()
            .map(|&i| {
                if i >= 0.0 && (i as usize) < vertices.len() {
                    Ok(i as usize)
                } else {
                    Err(Error::format(
                        path,
                        format!("face {k}: vertex index {i} out of range"),
                    ))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for w in 1..idx.len() - 1 {
            triangles.push([idx[0], idx[w], idx[w + 1]]);
        }
    }
    if triangles.is_empty() {
        return Err(Error::format(path, "mesh has no faces"));
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
    })
}

/// Anything that can be written as a vertex-only PLY.
#[derive(Clone, Copy)]
pub enum CloudRef<'a> {
    Cloud(&'a PointCloud),
    Dense(&'a DenseSample),
}

impl<'a> From<&'a PointCloud> for CloudRef<'a> {
    fn from(c: &'a PointCloud) -> Self {
        CloudRef::Cloud(c)
    }
}

impl<'a> From<&'a DenseSample> for CloudRef<'a> {
    fn from(d: &'a DenseSample) -> Self {
        CloudRef::Dense(d)
    }
}

fn xyz_columns<'a>(points: &[Point3], names: [&'a str; 3]) -> [Column<'a>; 3] {
    [0, 1, 2].map(|k| double(names[k], points.iter().map(|p| p[k]).collect()))
}

fn vector_columns<'a>(vs: &[Vector3], names: [&'a str; 3]) -> [Column<'a>; 3] {
    [0, 1, 2].map(|k| double(names[k], vs.iter().map(|v| v[k]).collect()))
}

fn columns(data: CloudRef<'_>) -> Result<Vec<Column<'static>>> {
    let mut cols = Vec::new();
    match data {
        CloudRef::Cloud(c) => {
            cols.extend(xyz_columns(c.points(), ["x", "y", "z"]));
            if let Some(ns) = c.normals() {
                cols.extend(vector_columns(ns, ["nx", "ny", "nz"]));
            }
        }
        CloudRef::Dense(d) => {
            if d.is_empty() {
                return Err(Error::invalid("dense sample is empty; nothing to write"));
            }
            cols.extend(xyz_columns(&d.points, ["x", "y", "z"]));
            cols.extend(vector_columns(&d.normals, ["nx", "ny", "nz"]));
            cols.push(double("u", d.uv.iter().map(|t| t[0]).collect()));
            cols.push(double("v", d.uv.iter().map(|t| t[1]).collect()));
            cols.push(double("area", d.area.clone()));
            cols.push(Column {
                name: "patch_id",
                ty: Scalar::I32,
                values: d.patch_id.iter().map(|&i| i as f64).collect(),
            });
        }
    }
    Ok(cols)
}

/// Writes a cloud or dense sample as PLY, or a cloud as `.xyz`.
pub fn write_cloud<'a>(
    data: impl Into<CloudRef<'a>>,
    path: &Path,
    encoding: PlyEncoding,
) -> Result<()> {
    let data = data.into();
    let kind = kind(path)?;
    let cols = columns(data)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match kind {
        Kind::Ply => ply::write_vertices(w, encoding, &cols, path),
        Kind::Xyz => {
            let width = if matches!(data, CloudRef::Dense(_)) {
                6
            } else {
                cols.len()
            };
            let n = cols[0].values.len();
            for row in 0..n {
                let line: Vec<String> = cols[..width]
                    .iter()
                    .map(|c| format!("{:.8e}", c.values[row]))
                    .collect();
                writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn dense4() -> DenseSample {
        DenseSample {
            points: (0..4)
                .map(|i| Point3::new(i as f64 * 0.1, 1.0 / 3.0, -2.5e-7))
                .collect(),
            normals: vec![Vector3::new(0.6, 0.0, 0.8); 4],
            uv: (0..4).map(|i| [i as f64 / 3.0, 0.5]).collect(),
            patch_id: vec![0, 0, 3, 3],
            area: vec![0.25, 0.5, 1.0 / 7.0, 2.0],
        }
    }

    #[test]
    fn three_line_xyz() {
        let d = tmp();
        let p = d.path().join("a.xyz");
        fs::write(&p, "0 0 0\n1 0 0\n\n0 1 0.5\n").unwrap();
        let c = read_cloud(&p).unwrap();
        assert_eq!(c.len(), 3);
        assert!(!c.has_normals());
        assert_eq!(c.points()[2], Point3::new(0.0, 1.0, 0.5));
    }

    #[test]
    fn xyz_errors_name_the_line() {
        let d = tmp();
        let p = d.path().join("a.xyz");
        fs::write(&p, "0 0 0\n1 0\n").unwrap();
        assert!(read_cloud(&p).unwrap_err().to_string().contains("line 2"));
        fs::write(&p, "0 0 0\n1 0 nan\n").unwrap();
        assert!(read_cloud(&p).unwrap_err().to_string().contains("line 2"));
        fs::write(&p, "0 0 0 0 0 1\n1 0 0\n").unwrap();
        assert!(read_cloud(&p).is_err());
        fs::write(&p, "").unwrap();
        assert!(read_cloud(&p).is_err());
    }

    #[test]
    fn ascii_ply_normals_are_renormalized() {
        let d = tmp();
        let p = d.path().join("a.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\n\
             property float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n\
             0 0 0 0 0 2\n1 1 1 3 4 0\n",
        )
        .unwrap();
        let c = read_cloud(&p).unwrap();
        let n = c.normals().unwrap();
        assert_eq!(n[0], Vector3::z());
        assert!((n[1] - Vector3::new(0.6, 0.8, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn ply_count_mismatch_and_bad_headers() {
        let d = tmp();
        let p = d.path().join("a.ply");
        let head = "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
        fs::write(&p, format!("{head}0 0 0\n1 1 1\n")).unwrap();
        assert!(read_cloud(&p)
            .unwrap_err()
            .to_string()
            .contains("declares 3 rows"));
        fs::write(
            &p,
            "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n",
        )
        .unwrap();
        assert!(read_cloud(&p)
            .unwrap_err()
            .to_string()
            .contains("big-endian"));
        fs::write(&p, "plx\n").unwrap();
        assert!(read_cloud(&p).is_err());
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nend_header\n1\n",
        )
        .unwrap();
        assert!(read_cloud(&p)
            .unwrap_err()
            .to_string()
            .contains("lacks x, y, z"));
    }

    #[test]
    fn binary_truncation_reports_offset() {
        let d = tmp();
        let p = d.path().join("a.ply");
        let c =
            PointCloud::from_points(vec![Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.0)])
                .unwrap();
        write_cloud(&c, &p, PlyEncoding::BinaryLittleEndian).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_cloud(&p).unwrap_err().to_string().contains("offset"));
    }

    #[test]
    fn binary_cloud_round_trip_is_exact() {
        let d = tmp();
        let p = d.path().join("a.ply");
        let pts = vec![
            Point3::new(0.1, -1e-300, 1e300),
            Point3::new(1.0 / 3.0, 2.0, f64::EPSILON),
        ];
        let ns = vec![Vector3::z(), Vector3::new(0.6, 0.8, 0.0)];
        let c = PointCloud::new(pts, Some(ns)).unwrap();
        write_cloud(&c, &p, PlyEncoding::BinaryLittleEndian).unwrap();
        let back = read_cloud(&p).unwrap();
        assert_eq!(back.points(), c.points());
        assert!(back.normals().is_some());
    }

    #[test]
    fn dense_sample_layout() {
        let d = tmp();
        let p = d.path().join("dense.ply");
        write_cloud(&dense4(), &p, PlyEncoding::Ascii).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 4"));
        assert_eq!(text.matches("property double").count(), 9);
        assert_eq!(text.matches("property int").count(), 1);
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 4);
        assert!(body[2].ends_with(" 3"));
    }

    #[test]
    fn empty_dense_sample_is_rejected() {
        let d = tmp();
        let err = write_cloud(
            &DenseSample::default(),
            &d.path().join("e.ply"),
            PlyEncoding::BinaryLittleEndian,
        );
        assert!(err.is_err());
    }

    #[test]
    fn dense_binary_reread_is_exact() {
        let d = tmp();
        let p = d.path().join("dense.ply");
        let ds = dense4();
        write_cloud(&ds, &p, PlyEncoding::BinaryLittleEndian).unwrap();
        let file = ply::read_ply(open(&p).unwrap(), &p).unwrap();
        let (el, data) = file.element("vertex").unwrap();
        let col = |n: &str| el.scalar_index(n).unwrap();
        for (k, row) in data.scalars.iter().enumerate() {
            assert_eq!(row[col("x")], ds.points[k].x);
            assert_eq!(row[col("nz")], ds.normals[k].z);
            assert_eq!(row[col("u")], ds.uv[k][0]);
            assert_eq!(row[col("area")], ds.area[k]);
            assert_eq!(row[col("patch_id")], ds.patch_id[k] as f64);
        }
        let cloud = read_cloud(&p).unwrap();
        assert_eq!(cloud.points(), &ds.points[..]);
    }

    #[test]
    fn ascii_round_trip_within_printed_precision() {
        let d = tmp();
        let p = d.path().join("a.ply");
        let c =
            PointCloud::from_points(vec![Point3::new(0.123456789123, -98.7654321, 1e-9)]).unwrap();
        write_cloud(&c, &p, PlyEncoding::Ascii).unwrap();
        let back = read_cloud(&p).unwrap();
        let (a, b) = (back.points()[0], c.points()[0]);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-6 * b[k].abs().max(1e-12));
        }
        let q = d.path().join("a.xyz");
        write_cloud(&c, &q, PlyEncoding::Ascii).unwrap();
        assert!((read_cloud(&q).unwrap().points()[0].y + 98.7654321).abs() < 1e-6);
    }

    #[test]
    fn faces_are_skipped_for_clouds_and_fanned_for_meshes() {
        let d = tmp();
        let p = d.path().join("quad.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n",
        )
        .unwrap();
        assert_eq!(read_cloud(&p).unwrap().len(), 4);
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn unknown_extension() {
        assert!(read_cloud(Path::new("cloud.obj")).is_err());
    }
}
