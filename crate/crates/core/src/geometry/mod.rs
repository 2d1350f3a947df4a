//! Point clouds, bounding boxes, normalization and spatial queries.

mod kdtree;
mod normals;

pub use kdtree::SpatialIndex;
pub use normals::{estimate_normals, DEFAULT_NORMAL_NEIGHBORS};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// Tolerance on the Euclidean norm of stored unit normals.
pub const UNIT_NORMAL_TOL: f64 = 1e-6;

/// Positions with optional per-point unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Vector3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, normals: Option<Vec<Vector3>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::invalid(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some(ns) = &normals {
            if ns.len() != points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} normals for {} points",
                    ns.len(),
                    points.len()
                )));
            }
            if let Some(i) = ns
                .iter()
                .position(|n| !((n.norm() - 1.0).abs() <= UNIT_NORMAL_TOL))
            {
                return Err(Error::invalid(format!("normal {i} is not unit length")));
            }
        }
        Ok(Self { points, normals })
    }

    /// Builds a cloud from raw normals, rescaling each to unit length.
    pub fn with_raw_normals(points: Vec<Point3>, normals: Vec<Vector3>) -> Result<Self> {
        let mut unit = Vec::with_capacity(normals.len());
        for (i, n) in normals.into_iter().enumerate() {
            let len = n.norm();
            if !(len.is_finite() && len > 0.0) {
                return Err(Error::invalid(format!(
                    "normal {i} has zero or non-finite length"
                )));
            }
            unit.push(n / len);
        }
        Self::new(points, Some(unit))
    }

    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn into_parts(self) -> (Vec<Point3>, Option<Vec<Vector3>>) {
        (self.points, self.normals)
    }

    /// Replaces the normals, validating them as in [`PointCloud::new`].
    pub fn set_normals(self, normals: Vec<Vector3>) -> Result<Self> {
        Self::new(self.points, Some(normals))
    }

    pub fn centroid(&self) -> Point3 {
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / self.points.len() as f64)
    }

    /// Cloud made of the points at `indices`, carrying normals along.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|ns| indices.iter().map(|&i| ns[i]).collect());
        Self::new(points, normals)
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }
}

pub fn bounding_box(points: &[Point3]) -> Result<Aabb> {
    let first = points.first().ok_or(Error::EmptyCloud)?;
    let (min, max) = points
        .iter()
        .fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    Ok(Aabb { min, max })
}

/// Similarity transform `p -> (p - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Transform that centers `points` on their centroid and scales the
    /// bounding-box diagonal to one.
    pub fn fit(points: &[Point3]) -> Result<Self> {
        let bbox = bounding_box(points)?;
        let diag = bbox.diagonal();
        if !(diag > 0.0) {
            return Err(Error::Degenerate("bounding-box diagonal is zero".into()));
        }
        let sum = points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        let c = sum / points.len() as f64;
        Ok(Self {
            center: [c.x, c.y, c.z],
            scale: diag,
        })
    }

    fn center_vec(&self) -> Vector3 {
        Vector3::new(self.center[0], self.center[1], self.center[2])
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from((p.coords - self.center_vec()) / self.scale)
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        Point3::from(p.coords * self.scale + self.center_vec())
    }

    /// `self` followed by `inner`, i.e. `inner.apply(self.apply(p))`.
    pub fn then(&self, inner: &NormalizationTransform) -> NormalizationTransform {
        // (p - c1)/s1 - c2 = (p - (c1 + s1 c2)) / s1  then / s2
        let c = self.center_vec() + inner.center_vec() * self.scale;
        Self {
            center: [c.x, c.y, c.z],
            scale: self.scale * inner.scale,
        }
    }
}

/// Maps the cloud to unit bounding-box diagonal centered at its centroid.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, NormalizationTransform)> {
    let t = NormalizationTransform::fit(cloud.points())?;
    let points = cloud.points().iter().map(|p| t.apply(p)).collect();
    let out = PointCloud::new(points, cloud.normals.clone())?;
    Ok((out, t))
}

pub fn denormalize(cloud: &PointCloud, t: &NormalizationTransform) -> Result<PointCloud> {
    let points = cloud.points().iter().map(|p| t.invert(p)).collect();
    PointCloud::new(points, cloud.normals.clone())
}

/// Angle in radians between two (not necessarily unit) vectors.
pub fn angle_between(a: &Vector3, b: &Vector3) -> f64 {
    let denom = a.norm() * b.norm();
    (a.dot(b) / denom).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn two_point_box() {
        let b = bounding_box(&[Point3::origin(), Point3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(b.min, Point3::origin());
        assert_eq!(b.max, Point3::new(1.0, 2.0, 3.0));
        assert!((b.diagonal() - 14f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_point_box_is_degenerate() {
        let p = Point3::new(0.3, -1.0, 2.0);
        let b = bounding_box(&[p]).unwrap();
        assert_eq!(b.min, p);
        assert_eq!(b.max, p);
        assert_eq!(b.diagonal(), 0.0);
        let cloud = PointCloud::from_points(vec![p]).unwrap();
        assert!(matches!(normalize(&cloud), Err(Error::Degenerate(_))));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(bounding_box(&[]), Err(Error::EmptyCloud)));
        assert!(matches!(
            PointCloud::from_points(vec![]),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn uniform_cube_box_is_tight() {
        let pts = random_points(1000, 7);
        let b = bounding_box(&pts).unwrap();
        let d = b.diagonal();
        assert!(d >= 3f64.sqrt() * 0.9 && d <= 3f64.sqrt());
        assert!(pts.iter().all(|p| b.contains(p)));
        for k in 0..3 {
            assert!(pts.iter().any(|p| p[k] == b.min[k]));
            assert!(pts.iter().any(|p| p[k] == b.max[k]));
        }
    }

    #[test]
    fn normalized_cube_corners() {
        let mut pts = Vec::new();
        for &x in &[0.0, 2.0] {
            for &y in &[0.0, 2.0] {
                for &z in &[0.0, 2.0] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        let cloud = PointCloud::from_points(pts).unwrap();
        let (n, t) = normalize(&cloud).unwrap();
        let b = bounding_box(n.points()).unwrap();
        assert!((b.diagonal() - 1.0).abs() < 1e-12);
        assert!(n.centroid().coords.norm() < 1e-12);
        assert!((t.scale - 12f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let cloud = PointCloud::from_points(random_points(200, 3)).unwrap();
        let (once, _) = normalize(&cloud).unwrap();
        let (_, t) = normalize(&once).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-9);
        assert!(t.center.iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn normalize_round_trip() {
        let pts: Vec<_> = random_points(300, 11)
            .into_iter()
            .map(|p| Point3::from(p.coords * 37.0 + Vector3::new(-5.0, 100.0, 2.5)))
            .collect();
        let cloud = PointCloud::from_points(pts).unwrap();
        let (n, t) = normalize(&cloud).unwrap();
        let b = bounding_box(n.points()).unwrap();
        assert!((b.diagonal() - 1.0).abs() < 1e-9);
        assert!(n.centroid().coords.norm() < 1e-9);
        let back = denormalize(&n, &t).unwrap();
        for (a, b) in back.points().iter().zip(cloud.points()) {
            assert!((a - b).norm() <= 1e-9 * b.coords.norm().max(1.0));
        }
    }

    #[test]
    fn composed_transform_matches_sequential() {
        let a = NormalizationTransform {
            center: [1.0, 2.0, 3.0],
            scale: 4.0,
        };
        let b = NormalizationTransform {
            center: [-0.5, 0.25, 0.0],
            scale: 0.1,
        };
        let ab = a.then(&b);
        let p = Point3::new(7.0, -3.0, 0.5);
        let seq = b.apply(&a.apply(&p));
        assert!((ab.apply(&p) - seq).norm() < 1e-12);
        assert!((ab.invert(&seq) - p).norm() < 1e-12);
    }

    #[test]
    fn normals_must_be_unit() {
        let pts = vec![Point3::origin()];
        assert!(PointCloud::new(pts.clone(), Some(vec![Vector3::new(0.0, 0.0, 2.0)])).is_err());
        let c = PointCloud::with_raw_normals(pts, vec![Vector3::new(0.0, 0.0, 2.0)]).unwrap();
        assert_eq!(c.normals().unwrap()[0], Vector3::z());
    }
}
