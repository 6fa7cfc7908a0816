//! Independent brute-force references shared by the oracle and acceptance
//! suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpm_core::geometry::{farthest_point_sample_from, knn_group, Point, PointCloud};
use tpm_core::loss::chamfer;

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<Point> {
    (0..n)
        .map(|_| {
            if grid {
                // Coarse lattice coordinates force frequent distance ties.
                std::array::from_fn(|_| rng.random_range(0..4) as f32 * 0.5)
            } else {
                std::array::from_fn(|_| rng.random_range(-1.0f32..1.0))
            }
        })
        .collect()
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

/// Max-min selection recomputing every distance from scratch each round.
pub fn fps_reference(pts: &[Point], k: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..pts.len() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen.iter().map(|&c| d2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| m > bd) {
                best = Some((m, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Full stable sort by (distance, index).
pub fn knn_reference(pts: &[Point], center: usize, s: usize) -> Vec<Point> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        d2(&pts[a], &pts[center])
            .partial_cmp(&d2(&pts[b], &pts[center]))
            .unwrap()
            .then(a.cmp(&b))
    });
    idx[..s]
        .iter()
        .map(|&i| std::array::from_fn(|k| pts[i][k] - pts[center][k]))
        .collect()
}

pub fn chamfer_reference(a: &[Point], b: &[Point]) -> f64 {
    let dir = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    dir(a, b) + dir(b, a)
}

/// Mismatching instances out of `cases`, with n ≤ 64 and every third cloud
/// on a lattice.
pub fn fps_mismatches(cases: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|&case| {
            let n = rng.random_range(1..=64);
            let k = rng.random_range(1..=n.min(8));
            let first = rng.random_range(0..n);
            let pts = random_cloud(&mut rng, n, case % 3 == 0);
            let cloud = PointCloud::new(pts.clone(), None).unwrap();
            farthest_point_sample_from(&cloud, k, first).unwrap() != fps_reference(&pts, k, first)
        })
        .collect()
}

pub fn knn_mismatches(cases: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|&case| {
            let n = rng.random_range(1..=64);
            let s = rng.random_range(1..=n);
            let pts = random_cloud(&mut rng, n, case % 3 == 0);
            let cloud = PointCloud::new(pts.clone(), None).unwrap();
            let g = rng.random_range(1..=n.min(6));
            let centers = rand::seq::index::sample(&mut rng, n, g).into_vec();
            let set = knn_group(&cloud, &centers, s).unwrap();
            centers
                .iter()
                .enumerate()
                .any(|(gi, &c)| set.patch(gi) != knn_reference(&pts, c, s).as_slice())
        })
        .collect()
}

/// Largest absolute deviation from the reference.
pub fn chamfer_max_deviation(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let (na, nb) = (rng.random_range(1..=64), rng.random_range(1..=64));
            let a = random_cloud(&mut rng, na, false);
            let b = random_cloud(&mut rng, nb, false);
            (chamfer(&a, &b).unwrap() - chamfer_reference(&a, &b)).abs()
        })
        .fold(0.0, f64::max)
}
