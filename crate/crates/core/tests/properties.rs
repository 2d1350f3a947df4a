use chartatlas::eval::{cumulative_histogram, one_sided, Direction};
use chartatlas::io::{read_cloud, write_cloud, PlyEncoding};
use chartatlas::nn::{adam_step, samples_to_array, AdamConfig, AdamState, ChartNet, LayerSpec};
use chartatlas::sampling::{poisson_disk_cloud, poisson_disk_square};
use chartatlas::transport::{
    exact_assignment, is_permutation, marginal_residual, plan_cost, project_to_permutation,
    sinkhorn, CostMatrix,
};
use chartatlas::{
    bounding_box, denormalize, estimate_normals, normalize, Point3, PointCloud, Vector3,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cost(n: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CostMatrix::new(Array2::from_shape_fn((n, n), |_| rng.random::<f64>())).unwrap()
}

fn random_points(n: usize, seed: u64, scale: f64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ) * scale
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalize_round_trip(seed in 0u64..1000, scale in 1e-3f64..1e3, n in 2usize..200) {
        let pts = random_points(n, seed, scale);
        let cloud = PointCloud::from_points(pts.clone()).unwrap();
        let (unit, t) = normalize(&cloud).unwrap();
        prop_assert!((bounding_box(unit.points()).unwrap().diagonal() - 1.0).abs() < 1e-12);
        let back = denormalize(&unit, &t).unwrap();
        for (a, b) in pts.iter().zip(back.points()) {
            prop_assert!((a - b).norm() <= 1e-9 * scale.max(a.coords.norm()));
        }
    }

    #[test]
    fn plane_normals_are_exact(seed in 0u64..1000, tilt in 0.0f64..1.5) {
        let normal = Vector3::new(tilt.sin(), 0.0, tilt.cos());
        let u = Vector3::new(tilt.cos(), 0.0, -tilt.sin());
        let v = Vector3::y();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3> = (0..300)
            .map(|_| Point3::origin() + u * rng.random::<f64>() + v * rng.random::<f64>())
            .collect();
        let est = estimate_normals(&PointCloud::from_points(pts).unwrap(), 10).unwrap();
        for n in est.normals().unwrap() {
            prop_assert!(n.dot(&normal).abs() > (1e-4f64).cos());
        }
    }

    #[test]
    fn sinkhorn_plans_have_unit_marginals(seed in 0u64..10_000, n in 2usize..12, eps in 1e-3f64..1.0) {
        let cost = random_cost(n, seed);
        let plan = sinkhorn(&cost, eps, 10_000_000, 1e-6).unwrap();
        prop_assert!(plan.converged);
        prop_assert!(marginal_residual(plan.plan.view()) < 1e-6);
    }

    #[test]
    fn sinkhorn_cost_decreases_with_eps(seed in 0u64..10_000) {
        let cost = random_cost(5, seed);
        let mut prev = f64::INFINITY;
        for eps in [1.0, 0.1, 0.01] {
            let p = sinkhorn(&cost, eps, 1_000_000, 1e-12).unwrap();
            prop_assume!(p.converged);
            let c = plan_cost(p.plan.view(), &cost).unwrap();
            prop_assert!(c <= prev + 1e-9, "{c} > {prev} at eps {eps}");
            prev = c;
        }
        let p = sinkhorn(&cost, 1e-3, 10_000_000, 1e-6).unwrap();
        let c = plan_cost(p.plan.view(), &cost).unwrap();
        let exact = exact_assignment(&cost).unwrap().cost;
        prop_assert!(c <= prev + 1e-6);
        prop_assert!((c - exact).abs() <= 0.01 * exact);
    }

    #[test]
    fn uniform_cost_shift_leaves_plan(seed in 0u64..10_000, shift in 0.0f64..5.0) {
        let cost = random_cost(5, seed);
        let shifted = CostMatrix::new(cost.view().mapv(|c| c + shift)).unwrap();
        let a = sinkhorn(&cost, 1e-2, 100_000, 1e-12).unwrap();
        let b = sinkhorn(&shifted, 1e-2, 100_000, 1e-12).unwrap();
        for (x, y) in a.plan.iter().zip(b.plan.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let ca = plan_cost(a.plan.view(), &cost).unwrap();
        let cb = plan_cost(b.plan.view(), &shifted).unwrap();
        prop_assert!((cb - ca - 5.0 * shift).abs() < 1e-9);
    }

    #[test]
    fn projection_is_a_bijection(seed in 0u64..10_000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let a = project_to_permutation(m.view()).unwrap();
        prop_assert!(is_permutation(&a.perm));
        prop_assert_eq!(a.perm.len(), n);
    }

    #[test]
    fn forward_is_affine_inside_a_region(seed in 0u64..10_000) {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 16, 16, 3]).unwrap(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let v = [rng.random::<f64>(), rng.random::<f64>()];
        let d = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        let at = |t: f64| net.forward([v[0] + t * d[0], v[1] + t * d[1]]);
        let (a, b, c) = (at(0.0), at(1e-7), at(2e-7));
        for k in 0..3 {
            prop_assert!((c[k] - 2.0 * b[k] + a[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences(seed in 0u64..10_000) {
        let net = ChartNet::init(LayerSpec::chart(vec![2, 16, 16, 3]).unwrap(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
        let v = [rng.random::<f64>(), rng.random::<f64>()];
        let j = net.jacobian(v);
        let h = 1e-6;
        for a in 0..2 {
            let mut hi = v;
            let mut lo = v;
            hi[a] += h;
            lo[a] -= h;
            let (fh, fl) = (net.forward(hi), net.forward(lo));
            // a kink inside [lo, hi] breaks the one-sided slopes; skip those
            let mid = net.forward(v);
            let affine = (0..3).all(|k| (fh[k] - 2.0 * mid[k] + fl[k]).abs() < 1e-12);
            if !affine {
                continue;
            }
            for k in 0..3 {
                let fd = (fh[k] - fl[k]) / (2.0 * h);
                prop_assert!((fd - j[k][a]).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn poisson_square_is_separated(seed in 0u64..10_000, n in 1usize..300) {
        let s = poisson_disk_square(n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        for (i, a) in s.points.iter().enumerate() {
            prop_assert!(a[0] > 0.0 && a[0] < 1.0 && a[1] > 0.0 && a[1] < 1.0);
            for b in &s.points[..i] {
                prop_assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() >= s.radius);
            }
        }
        prop_assert_eq!(&s, &poisson_disk_square(n, seed).unwrap());
    }

    #[test]
    fn poisson_cloud_is_separated_and_maximal(seed in 0u64..10_000, r in 0.05f64..0.5) {
        let pts = random_points(300, seed, 1.0);
        let c = poisson_disk_cloud(&pts, r, seed).unwrap();
        for (k, &i) in c.indices.iter().enumerate() {
            for &j in &c.indices[..k] {
                prop_assert!((pts[i] - pts[j]).norm() >= r);
            }
        }
        for p in &pts {
            prop_assert!(c.indices.iter().any(|&i| (pts[i] - p).norm() < r));
        }
        prop_assert_eq!(&c, &poisson_disk_cloud(&pts, r, seed).unwrap());
    }

    #[test]
    fn one_sided_self_is_zero(seed in 0u64..10_000, n in 1usize..300) {
        let pts = random_points(n, seed, 2.0);
        let d = one_sided(&pts, &pts, Direction::InputToReconstruction).unwrap();
        prop_assert!(d.distances.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn histogram_is_monotone_and_reaches_one(seed in 0u64..10_000, n in 1usize..200, bins in 2usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let h = cumulative_histogram(&d, bins).unwrap();
        prop_assert!(h.fractions.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*h.fractions.last().unwrap(), 1.0);
    }

    #[test]
    fn ply_round_trips(seed in 0u64..10_000, n in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point3> = (0..n)
            .map(|_| Point3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() * 1e3, rng.random::<f64>() * 1e-3))
            .collect();
        let normals: Vec<Vector3> = (0..n)
            .map(|_| Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 1.0).normalize())
            .collect();
        let cloud = PointCloud::new(pts, Some(normals)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_cloud(&cloud, &path, PlyEncoding::BinaryLittleEndian).unwrap();
        let back = read_cloud(&path).unwrap();
        prop_assert_eq!(back.points(), cloud.points());
        for (a, b) in back.normals().unwrap().iter().zip(cloud.normals().unwrap()) {
            prop_assert!((a - b).norm() < 1e-15);
        }
        write_cloud(&cloud, &path, PlyEncoding::Ascii).unwrap();
        let back = read_cloud(&path).unwrap();
        for (a, b) in back.points().iter().zip(cloud.points()) {
            prop_assert!((a - b).norm() <= 1e-6 * b.coords.norm().max(1.0));
        }
    }
}

#[test]
fn adam_is_bit_reproducible() {
    let run = || {
        let spec = LayerSpec::chart(vec![2, 16, 16, 3]).unwrap();
        let mut net = ChartNet::init(spec, 9);
        let mut state = AdamState::new(&net, AdamConfig::default());
        let inputs = samples_to_array(&poisson_disk_square(64, 3).unwrap().points);
        for _ in 0..20 {
            let out = net.forward_batch(inputs.view());
            let grad = net.backward(inputs.view(), out.view()).unwrap();
            adam_step(&mut net, &mut state, &grad).unwrap();
        }
        net.flat_params()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn four_point_square_is_matched_exactly() {
    let targets = ndarray::arr2(&[
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
    ]);
    let outputs = ndarray::arr2(&[
        [1.0, 1.0, 0.0],
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
    ]);
    let cost = CostMatrix::squared_distances(targets.view(), outputs.view()).unwrap();
    let p = sinkhorn(&cost, 1e-3, 10_000, 1e-9).unwrap();
    let emd = project_to_permutation(p.plan.view()).unwrap();
    let matched: f64 = emd
        .perm
        .iter()
        .enumerate()
        .map(|(j, &i)| cost.view()[[i, j]])
        .sum();
    assert!(matched < 1e-5);
    assert!(plan_cost(p.plan.view(), &cost).unwrap() < 1e-5);
}
