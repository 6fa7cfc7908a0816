use crate::error::{Error, Result};

pub type Point = [f32; 3];

/// An ordered set of 3D points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<u32>,
}

/// The affine map applied by [`normalize`]: `x' = (x - centroid) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, p: Point) -> Point {
        std::array::from_fn(|k| ((p[k] as f64 - self.centroid[k]) / self.scale) as f32)
    }

    pub fn invert(&self, p: Point) -> Point {
        std::array::from_fn(|k| (p[k] as f64 * self.scale + self.centroid[k]) as f32)
    }
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<u32>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::param("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("point cloud contains non-finite coordinates"));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }

    /// Largest distance from the origin.
    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| norm(p.map(f64::from)))
            .fold(0.0, f64::max)
    }

    /// Row-major `n x 3` coordinates.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }
}

pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

/// Centre on the centroid and scale so the farthest point has norm 1.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    normalize_with_transform(cloud).map(|(c, _)| c)
}

pub fn normalize_with_transform(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    if cloud.is_empty() {
        return Err(Error::param("cannot normalize an empty cloud"));
    }
    let centroid = cloud.centroid();
    let scale = cloud
        .points
        .iter()
        .map(|p| norm(std::array::from_fn(|k| p[k] as f64 - centroid[k])))
        .fold(0.0, f64::max);
    if scale <= 1e-12 {
        return Err(Error::DegenerateCloud);
    }
    let t = Normalization { centroid, scale };
    let points = cloud.points.iter().map(|&p| t.apply(p)).collect();
    Ok((
        PointCloud {
            points,
            label: cloud.label,
        },
        t,
    ))
}
