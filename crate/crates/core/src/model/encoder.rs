use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, PointCloud};

use super::{ModelConfig, Weights};

/// Frozen set-abstraction encoder: `m` farthest-point centres, `knn`
/// neighbours each, a shared two-layer perceptron on neighbour offsets and a
/// max-pool per group. Returns `[m, d_point]`.
pub fn encode_points(w: &Weights, cfg: &ModelConfig, cloud: &PointCloud) -> Result<Tensor> {
    let n = cloud.len();
    if n < cfg.m {
        return Err(Error::Contract(format!(
            "cloud has {n} points, encoder needs at least {}",
            cfg.m
        )));
    }
    let k = cfg.knn.min(n);
    let centres = farthest_point_sample(cloud, cfg.m)?;
    let mut offsets = Vec::with_capacity(cfg.m * k * 3);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in &centres {
        let p = cloud.points[c];
        order.clear();
        order.extend(cloud.points.iter().enumerate().map(|(i, q)| {
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
            (d, i)
        }));
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &order[..k] {
            let q = cloud.points[i];
            offsets.extend_from_slice(&[q[0] - p[0], q[1] - p[1], q[2] - p[2]]);
        }
    }
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[cfg.m * k, 3], offsets)?);
    let h = x
        .matmul(g.constant(w.get("f_pe.l1.w")?.clone()))?
        .add_row(g.constant(w.get("f_pe.l1.b")?.clone()))?
        .relu();
    let h = h
        .matmul(g.constant(w.get("f_pe.l2.w")?.clone()))?
        .add_row(g.constant(w.get("f_pe.l2.b")?.clone()))?
        .relu();
    Ok((*h.group_max(k)?.value()).clone())
}
