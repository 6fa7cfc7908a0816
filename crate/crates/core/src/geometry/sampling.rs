//! Patch construction: farthest point sampling for centres, kNN for groups.

use rand::Rng;

use super::cloud::{dist2, Point, PointCloud};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Patch centres plus fixed-size neighbourhoods in centre-local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub center_indices: Vec<usize>,
    /// `G * S` points, patch-major; patch `g` occupies `[g*S, (g+1)*S)`.
    pub local: Vec<Point>,
    pub patch_size: usize,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch(&self, g: usize) -> &[Point] {
        &self.local[g * self.patch_size..(g + 1) * self.patch_size]
    }

    /// Flat coordinates of the listed patches, `|patches| * S * 3` values.
    pub fn gather_local(&self, patches: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(patches.len() * self.patch_size * 3);
        for &g in patches {
            out.extend(self.patch(g).iter().flatten());
        }
        out
    }

    pub fn centers_flat(&self) -> Vec<f32> {
        self.centers.iter().flatten().copied().collect()
    }
}

/// Greedy max-min selection of `k` indices starting at a seeded uniform
/// index. Ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::param("farthest point sampling on an empty cloud"));
    }
    let first = rng_for(seed, &[]).random_range(0..cloud.len());
    farthest_point_sample_from(cloud, k, first)
}

pub fn farthest_point_sample_from(cloud: &PointCloud, k: usize, first: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::param(format!("cannot sample {k} centres from {n} points")));
    }
    if first >= n {
        return Err(Error::param(format!("first index {first} out of {n}")));
    }
    let pts = &cloud.points;
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    let mut last = first;
    taken[first] = true;
    out.push(first);
    while out.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&pts[i], &pts[last]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        last = best.1;
        taken[last] = true;
        out.push(last);
    }
    Ok(out)
}

/// Group the `patch_size` nearest points (ties by lowest index) around each
/// centre, expressed relative to that centre. Patches may overlap.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], patch_size: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if patch_size == 0 || patch_size > n {
        return Err(Error::param(format!("patch size {patch_size} with {n} points")));
    }
    let mut seen = vec![false; n];
    for &c in center_indices {
        if c >= n || std::mem::replace(&mut seen[c], true) {
            return Err(Error::param(format!("centre index {c} is out of range or repeated")));
        }
    }
    let pts = &cloud.points;
    let mut local = Vec::with_capacity(center_indices.len() * patch_size);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in center_indices {
        let center = pts[c];
        keyed.clear();
        keyed.extend(pts.iter().enumerate().map(|(i, p)| (dist2(p, &center), i)));
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if patch_size < n {
            keyed.select_nth_unstable_by(patch_size - 1, by_key);
        }
        let nearest = &mut keyed[..patch_size];
        nearest.sort_unstable_by(by_key);
        local.extend(
            nearest
                .iter()
                .map(|&(_, i)| std::array::from_fn(|k| pts[i][k] - center[k])),
        );
    }
    Ok(PatchSet {
        centers: center_indices.iter().map(|&c| pts[c]).collect(),
        center_indices: center_indices.to_vec(),
        local,
        patch_size,
    })
}

/// FPS centres followed by kNN grouping.
pub fn patchify(cloud: &PointCloud, patch_count: usize, patch_size: usize, seed: u64) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, patch_count, seed)?;
    knn_group(cloud, &centers, patch_size)
}
