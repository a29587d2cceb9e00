//! Point clouds, procedural objects with analytically labeled parts,
//! normalization, farthest-point sampling, and partial-view cropping.

pub mod catalog;
mod io;
pub mod primitives;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use catalog::{shape_spec, Affordance, ObjectClass, PartSpec, ShapeSpec};
pub use io::{read_cloud, write_cloud, CLOUD_MAGIC, CLOUD_VERSION};
pub use primitives::{Primitive, V3};

use crate::error::{Error, Result};

/// Smallest cloud the generator and the cropper will produce.
pub const MIN_POINTS: usize = 64;
pub const DEFAULT_POINTS: usize = 512;
/// Dense surface samples drawn per output point before downsampling.
pub const OVERSAMPLE: usize = 4;
/// Fraction of points kept by a partial-view crop.
pub const CROP_KEEP: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Full,
    Partial,
}

impl View {
    pub fn code(self) -> u8 {
        match self {
            View::Full => 0,
            View::Partial => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(View::Full),
            1 => Some(View::Partial),
            _ => None,
        }
    }
}

/// An object point cloud with per-point part labels and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub part_ids: Vec<u8>,
    pub object_class: ObjectClass,
    pub view: View,
    pub seed: u64,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| norm(p)).fold(0.0, f64::max)
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            part_ids: idx.iter().map(|&i| self.part_ids[i]).collect(),
            object_class: self.object_class,
            view: self.view,
            seed: self.seed,
        }
    }

    /// Number of points owned by each part id present.
    pub fn part_census(&self) -> std::collections::BTreeMap<u8, usize> {
        let mut census = std::collections::BTreeMap::new();
        for &id in &self.part_ids {
            *census.entry(id).or_insert(0) += 1;
        }
        census
    }

    /// Binary indicator of points whose part id is in `parts`.
    pub fn mask_for(&self, parts: &[u8]) -> Vec<u8> {
        self.part_ids
            .iter()
            .map(|id| parts.contains(id) as u8)
            .collect()
    }

    /// Rounds coordinates to `f32` precision, matching what the binary format stores.
    pub fn quantized(mut self) -> PointCloud {
        for p in &mut self.points {
            *p = p.map(|v| v as f32 as f64);
        }
        self
    }

    pub fn flat_coords(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Draws `count` points uniformly by surface area over all primitives.
pub fn sample_surface(spec: &ShapeSpec, seed: u64, count: usize) -> Result<PointCloud> {
    let areas: Vec<(u8, &Primitive, f64)> = spec
        .parts
        .iter()
        .flat_map(|part| part.primitives.iter().map(move |p| (part.id, p, p.area())))
        .collect();
    let total: f64 = areas.iter().map(|a| a.2).sum();
    if !(total > 0.0) {
        return Err(Error::Generation(format!(
            "{} has zero surface area",
            spec.object_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut part_ids = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = areas.len() - 1;
        for (i, (_, _, a)) in areas.iter().enumerate() {
            if pick < *a {
                chosen = i;
                break;
            }
            pick -= a;
        }
        let (id, prim, _) = areas[chosen];
        let p = prim.sample(&mut rng);
        points.push([p.x, p.y, p.z]);
        part_ids.push(id);
    }
    Ok(PointCloud {
        points,
        part_ids,
        object_class: spec.object_class,
        view: View::Full,
        seed,
    })
}

/// Full-view cloud of exactly `n_points`: dense area-uniform sampling,
/// farthest-point downsampling, then unit-sphere normalization.
pub fn generate_shape(spec: &ShapeSpec, seed: u64, n_points: usize) -> Result<PointCloud> {
    if n_points < MIN_POINTS {
        return Err(Error::Contract(format!(
            "n_points {n_points} < {MIN_POINTS}"
        )));
    }
    let dense = sample_surface(spec, seed, n_points * OVERSAMPLE)?;
    let idx = farthest_point_sample(&dense, n_points)?;
    normalize_unit_sphere(&dense.select(&idx))
}

/// Translates the centroid to the origin and scales the farthest point to norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::DegenerateCloud);
    }
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered.iter().map(norm).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    Ok(PointCloud {
        points: centered.into_iter().map(|p| p.map(|v| v / scale)).collect(),
        ..cloud.clone()
    })
}

/// Greedy max-min selection of `k` indices, starting from the point nearest
/// the centroid. Ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize) -> Result<Vec<usize>> {
    farthest_point_sample_coords(&cloud.points, k)
}

pub fn farthest_point_sample_coords(points: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!(
            "farthest_point_sample: k = {k}, n = {n}"
        )));
    }
    let mut c = [0.0; 3];
    for p in points {
        for d in 0..3 {
            c[d] += p[d] / n as f64;
        }
    }
    let start = argmin(points.iter().map(|p| dist2(p, &c)));
    let mut chosen = Vec::with_capacity(k);
    chosen.push(start);
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[start])).collect();
    while chosen.len() < k {
        let next = argmax(nearest.iter().copied());
        chosen.push(next);
        let q = points[next];
        for (d, p) in nearest.iter_mut().zip(points) {
            let nd = dist2(p, &q);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Uniform random unit vector.
pub fn random_direction(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        ];
        let n = norm(&v);
        if n > 1e-6 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

/// Indices kept by the crop: points whose projection onto the view
/// direction falls strictly below the 60th percentile.
pub fn crop_indices(cloud: &PointCloud, direction: [f64; 3]) -> Vec<usize> {
    let proj: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| p[0] * direction[0] + p[1] * direction[1] + p[2] * direction[2])
        .collect();
    let mut sorted = proj.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[((cloud.len() as f64 * CROP_KEEP) as usize).min(cloud.len() - 1)];
    (0..cloud.len()).filter(|&i| proj[i] < cut).collect()
}

/// Single-side view: keep the near 60% along a random direction, then
/// re-normalize and farthest-point resample to `n_points`.
///
/// Fails when the crop keeps fewer than `max(64, n_points)` points; callers
/// pass a dense surface sample and retry with another seed if needed.
pub fn partial_view_crop(cloud: &PointCloud, seed: u64, n_points: usize) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = random_direction(&mut rng);
    let kept = crop_indices(cloud, direction);
    let needed = n_points.max(MIN_POINTS);
    if kept.len() < needed {
        return Err(Error::Crop {
            kept: kept.len(),
            needed,
        });
    }
    let cropped = cloud.select(&kept);
    let idx = farthest_point_sample(&cropped, n_points)?;
    let mut out = normalize_unit_sphere(&cropped.select(&idx))?;
    out.view = View::Partial;
    Ok(out)
}

/// Partial-view cloud of `n_points`: crops a dense surface sample of the
/// object rather than the already-downsampled full view, so the budget is
/// met without duplicating points.
pub fn generate_partial(
    spec: &ShapeSpec,
    seed: u64,
    crop_seed: u64,
    n_points: usize,
) -> Result<PointCloud> {
    if n_points < MIN_POINTS {
        return Err(Error::Contract(format!(
            "n_points {n_points} < {MIN_POINTS}"
        )));
    }
    let dense = sample_surface(spec, seed, n_points * OVERSAMPLE)?;
    partial_view_crop(&dense, crop_seed, n_points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud {
            points,
            part_ids: vec![0; n],
            object_class: ObjectClass::Mug,
            view: View::Full,
            seed: 0,
        }
    }

    #[test]
    fn normalize_already_normalized() {
        let c = normalize_unit_sphere(&cloud(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(c.points, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_shift_and_scale() {
        let c = normalize_unit_sphere(&cloud(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]])).unwrap();
        assert_eq!(c.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_degenerate_cloud_errors() {
        let r = normalize_unit_sphere(&cloud(vec![[0.3, 0.3, 0.3]; 5]));
        assert!(matches!(r, Err(Error::DegenerateCloud)));
    }

    #[test]
    fn fps_square_corners_picks_diagonal() {
        let c = cloud(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        let idx = farthest_point_sample(&c, 2).unwrap();
        let (a, b) = (c.points[idx[0]], c.points[idx[1]]);
        assert!((dist2(&a, &b) - 2.0).abs() < 1e-12, "{idx:?}");
    }

    #[test]
    fn fps_k_equals_n_returns_all() {
        let c = cloud((0..10).map(|i| [i as f64, (i * i) as f64, 0.0]).collect());
        let mut idx = farthest_point_sample(&c, 10).unwrap();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fps_k_above_n_errors() {
        let c = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(
            farthest_point_sample(&c, 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn generate_rejects_tiny_budget() {
        let spec = shape_spec(ObjectClass::Mug, 1);
        assert!(generate_shape(&spec, 1, 32).is_err());
    }

    #[test]
    fn zero_area_spec_errors() {
        let mut spec = shape_spec(ObjectClass::Mug, 1);
        for part in &mut spec.parts {
            part.primitives.clear();
        }
        assert!(matches!(
            generate_shape(&spec, 1, 64),
            Err(Error::Generation(_))
        ));
    }
}
