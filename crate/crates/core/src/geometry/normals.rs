use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SymmetricEigen};
use ordered::OrdF64;

use super::{PointCloud, SpatialIndex, Vector3};
use crate::error::{Error, Result};

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 16;

mod ordered {
    /// Total-ordered f64 for heap keys.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct OrdF64(pub f64);
    impl Eq for OrdF64 {}
    impl PartialOrd for OrdF64 {
        fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for OrdF64 {
        fn cmp(&self, o: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&o.0)
        }
    }
}

/// PCA normals over the `k` nearest neighbors (the point itself included),
/// oriented consistently by propagation along a minimum spanning tree of the
/// neighbor graph. Each connected component is rooted at its highest point,
/// whose normal is made to point towards +z.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::invalid(format!(
            "normal estimation needs k >= 3, got {k}"
        )));
    }
    let n = cloud.len();
    if n < k {
        return Err(Error::invalid(format!(
            "normal estimation with k = {k} needs at least {k} points, got {n}"
        )));
    }
    let pts = cloud.points();
    let index = SpatialIndex::new(pts);

    let mut neighbors = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for p in pts {
        let nn: Vec<usize> = index.knn(p, k).into_iter().map(|(i, _)| i).collect();
        let mean = nn.iter().fold(Vector3::zeros(), |a, &i| a + pts[i].coords) / nn.len() as f64;
        let mut cov = Matrix3::zeros();
        for &i in &nn {
            let d = pts[i].coords - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let smallest = eig.eigenvalues.imin();
        let mut normal: Vector3 = eig.eigenvectors.column(smallest).into_owned();
        let len = normal.norm();
        if !(len > 0.0) {
            return Err(Error::Degenerate(
                "normal estimation produced a zero eigenvector".into(),
            ));
        }
        normal /= len;
        normals.push(normal);
        neighbors.push(nn);
    }

    // symmetric neighbor graph
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, nn) in neighbors.iter().enumerate() {
        for &j in nn {
            if j != i {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    for a in &mut adjacency {
        a.sort_unstable();
        a.dedup();
    }

    let mut visited = vec![false; n];
    let mut roots: Vec<usize> = (0..n).collect();
    roots.sort_by(|&a, &b| pts[b].z.total_cmp(&pts[a].z).then(a.cmp(&b)));
    for root in roots {
        if visited[root] {
            continue;
        }
        if normals[root].z < 0.0 {
            normals[root] = -normals[root];
        }
        visited[root] = true;
        // Prim's algorithm with weight 1 - |n_i . n_j|
        let mut heap = BinaryHeap::new();
        let push_edges =
            |heap: &mut BinaryHeap<_>, i: usize, normals: &[Vector3], visited: &[bool]| {
                for &j in &adjacency[i] {
                    if !visited[j] {
                        let w = 1.0 - normals[i].dot(&normals[j]).abs();
                        heap.push(Reverse((OrdF64(w), j, i)));
                    }
                }
            };
        push_edges(&mut heap, root, &normals, &visited);
        while let Some(Reverse((_, j, parent))) = heap.pop() {
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if normals[parent].dot(&normals[j]) < 0.0 {
                normals[j] = -normals[j];
            }
            push_edges(&mut heap, j, &normals, &visited);
        }
    }

    PointCloud::new(cloud.points().to_vec(), Some(normals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_small_k() {
        let pts = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::from_points(pts).unwrap();
        assert!(estimate_normals(&cloud, 2).is_err());
        assert!(estimate_normals(&cloud, 11).is_err());
    }

    #[test]
    fn plane_normals_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = (0..400)
            .map(|_| Point3::new(rng.random(), rng.random(), 0.0))
            .collect();
        let cloud = PointCloud::from_points(pts).unwrap();
        let out = estimate_normals(&cloud, 10).unwrap();
        for n in out.normals().unwrap() {
            let ang = n.dot(&Vector3::z()).clamp(-1.0, 1.0).acos();
            assert!(ang < 1e-6, "angle {ang}");
        }
    }

    #[test]
    fn sphere_normals_are_radial_and_outward() {
        // Fibonacci lattice: evenly spread samples of the unit sphere
        let n = 2000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Point3> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                Point3::new(r * t.cos(), r * t.sin(), z)
            })
            .collect();
        let cloud = PointCloud::from_points(pts.clone()).unwrap();
        let out = estimate_normals(&cloud, 10).unwrap();
        for (p, n) in pts.iter().zip(out.normals().unwrap()) {
            let ang = n.dot(&p.coords).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(ang < 5.0, "angle {ang} deg at {p}");
        }
    }
}
