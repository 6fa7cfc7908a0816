//! Procedural labelled shapes standing in for a real object corpus.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::cloud::{normalize, Point, PointCloud};
use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const SHAPE_NAMES: [&str; 8] = [
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "pyramid",
    "plane_with_ridge",
    "two_spheres",
];

pub const NUM_SHAPES: usize = SHAPE_NAMES.len();

/// Per-point jitter standard deviation, in the shape's canonical frame.
pub const JITTER_SIGMA: f64 = 0.01;
/// Jitter displacements are clipped to this norm.
pub const JITTER_CLIP: f64 = 2.0 * JITTER_SIGMA;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

type V3 = [f64; 3];

fn gaussian3(rng: &mut ChaCha8Rng) -> V3 {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

fn unit_vector(rng: &mut ChaCha8Rng) -> V3 {
    loop {
        let v = gaussian3(rng);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

fn lerp3(a: V3, b: V3, t: f64) -> V3 {
    std::array::from_fn(|k| a[k] + (b[k] - a[k]) * t)
}

fn triangle(rng: &mut ChaCha8Rng, a: V3, b: V3, c: V3) -> V3 {
    let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    std::array::from_fn(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]))
}

/// Pick an index with probability proportional to `weights`.
fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

fn sample_surface(class_id: usize, rng: &mut ChaCha8Rng) -> V3 {
    match class_id {
        0 => unit_vector(rng),
        1 => {
            let face = rng.random_range(0..6);
            let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
            let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut p = [0.0; 3];
            p[axis] = sign;
            p[(axis + 1) % 3] = u;
            p[(axis + 2) % 3] = v;
            p
        }
        2 => {
            let theta = rng.random_range(0.0..2.0 * PI);
            // lateral area 4*pi, caps 2*pi
            if pick(rng, &[2.0, 1.0]) == 0 {
                [theta.cos(), theta.sin(), rng.random_range(-1.0..1.0)]
            } else {
                let r = rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { 1.0 } else { -1.0 };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        3 => {
            let theta = rng.random_range(0.0..2.0 * PI);
            // lateral area pi*sqrt(5), base pi
            if pick(rng, &[5f64.sqrt(), 1.0]) == 0 {
                let t = rng.random::<f64>().sqrt();
                [t * theta.cos(), t * theta.sin(), 1.0 - 2.0 * t]
            } else {
                let r = rng.random::<f64>().sqrt();
                [r * theta.cos(), r * theta.sin(), -1.0]
            }
        }
        4 => {
            let (big, small) = (0.7, 0.3);
            loop {
                let theta = rng.random_range(0.0..2.0 * PI);
                let phi = rng.random_range(0.0..2.0 * PI);
                let w = (big + small * phi.cos()) / (big + small);
                if rng.random::<f64>() < w {
                    let ring = big + small * phi.cos();
                    return [ring * theta.cos(), ring * theta.sin(), small * phi.sin()];
                }
            }
        }
        5 => {
            let apex = [0.0, 0.0, 1.0];
            let base = [[-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0]];
            let side = 5f64.sqrt();
            match pick(rng, &[4.0, side, side, side, side]) {
                0 => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0],
                f => triangle(rng, base[f - 1], base[f % 4], apex),
            }
        }
        6 => {
            let (half_width, height): (f64, f64) = (0.25, 0.5);
            let slant = (half_width * half_width + height * height).sqrt();
            let x = rng.random_range(-1.0..1.0);
            match pick(rng, &[4.0, 2.0 * slant, 2.0 * slant]) {
                0 => [x, rng.random_range(-1.0..1.0), 0.0],
                side => {
                    let t: f64 = rng.random();
                    let y0 = if side == 1 { -half_width } else { half_width };
                    lerp3([x, y0, 0.0], [x, 0.0, height], t)
                }
            }
        }
        _ => {
            let v = unit_vector(rng);
            let cx = if rng.random::<bool>() { 0.6 } else { -0.6 };
            [cx + 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]
        }
    }
}

fn rotation(axis: V3, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn clipped_jitter(rng: &mut ChaCha8Rng) -> V3 {
    let j = gaussian3(rng).map(|v| v * JITTER_SIGMA);
    let n = (j[0] * j[0] + j[1] * j[1] + j[2] * j[2]).sqrt();
    if n > JITTER_CLIP {
        j.map(|v| v * JITTER_CLIP / n)
    } else {
        j
    }
}

/// Sample a normalized, labelled cloud from the surface of shape `class_id`.
///
/// Pipeline: canonical surface sample, clipped Gaussian jitter, uniform
/// scale in [`SCALE_RANGE`], rotation about a random axis, normalization.
/// Sphere samples come in antipodal pairs so the centroid sits at the
/// sphere centre.
pub fn generate_shape(class_id: usize, n_points: usize, seed: u64) -> Result<PointCloud> {
    if class_id >= NUM_SHAPES {
        return Err(Error::param(format!(
            "class id {class_id} outside [0, {}]",
            NUM_SHAPES - 1
        )));
    }
    if n_points < 8 {
        return Err(Error::param(format!("need at least 8 points, got {n_points}")));
    }
    let mut rng = rng_for(seed, &[class_id as u64, n_points as u64]);

    let mut canonical = Vec::with_capacity(n_points);
    while canonical.len() < n_points {
        let p = sample_surface(class_id, &mut rng);
        canonical.push(p);
        if class_id == 0 && canonical.len() < n_points {
            canonical.push(p.map(|v| -v));
        }
    }

    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let rot = rotation(unit_vector(&mut rng), rng.random_range(0.0..2.0 * PI));
    let points: Vec<Point> = canonical
        .into_iter()
        .map(|p| {
            let j = clipped_jitter(&mut rng);
            let q: V3 = std::array::from_fn(|k| (p[k] + j[k]) * scale);
            std::array::from_fn(|r| (0..3).map(|k| rot[r][k] * q[k]).sum::<f64>() as f32)
        })
        .collect();
    normalize(&PointCloud::new(points, Some(class_id as u32))?)
}

/// A labelled corpus with `per_class` clouds of each of the first `classes`
/// shapes, ordered by class.
pub fn generate_corpus(classes: usize, per_class: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > NUM_SHAPES {
        return Err(Error::param(format!("classes must be in [1, {NUM_SHAPES}]")));
    }
    let mut clouds = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for i in 0..per_class {
            let s = crate::rng::derive_seed(seed, &[class as u64, i as u64]);
            clouds.push(generate_shape(class, n_points, s)?);
        }
    }
    Dataset::new(n_points, clouds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = generate_shape(0, 256, 42).unwrap();
        let b = generate_shape(0, 256, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_shape(0, 256, 43).unwrap());
    }

    #[test]
    fn sphere_points_sit_on_unit_sphere() {
        for seed in 0..50 {
            let c = generate_shape(0, 256, seed).unwrap();
            let centroid = c.centroid();
            for p in &c.points {
                let d = crate::geometry::cloud::norm(std::array::from_fn(|k| p[k] as f64 - centroid[k]));
                assert!((d - 1.0).abs() <= 0.05, "seed {seed}: distance {d}");
            }
        }
    }

    #[test]
    fn small_cloud_is_normalized() {
        let c = generate_shape(1, 8, 7).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.points.iter().flatten().all(|v| v.is_finite()));
        assert!(c.centroid().iter().all(|v| v.abs() < 1e-6));
        assert_eq!(c.label, Some(1));
    }

    #[test]
    fn every_class_generates() {
        for class in 0..NUM_SHAPES {
            let c = generate_shape(class, 64, 3).unwrap();
            assert!((c.max_norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_shape(8, 256, 0).is_err());
        assert!(generate_shape(0, 7, 0).is_err());
    }
}
