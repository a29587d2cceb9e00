use crate::autodiff::{AttentionLayout, Segment, Var};
use crate::error::{Error, Result};

use super::{ModelConfig, Params};

/// Dense per-point features `[B·n, d_dense]` for `B` stacked clouds of `n`
/// points: a three-layer per-point perceptron, a global max-pool per cloud,
/// and a linear mixing layer over `[local, global]`.
pub fn point_backbone<'g>(p: &Params<'g>, coords: Var<'g>, n: usize) -> Result<Var<'g>> {
    let rows = coords.shape()[0];
    if coords.shape().len() != 2 || coords.shape()[1] != 3 || n == 0 || rows % n != 0 {
        return Err(Error::dim("point_backbone", &coords.shape(), &[n, 3]));
    }
    let mut h = coords;
    for l in ["l1", "l2", "l3"] {
        h = p.linear(&format!("f_PB.{l}"), h)?.relu();
    }
    let global = h.group_max(n)?;
    h.matmul(p.get("f_PB.mix.wa")?)?
        .add_rows_grouped(global.matmul(p.get("f_PB.mix.wb")?)?, n)?
        .add_row(p.get("f_PB.mix.b")?)
}

/// Two-layer affordance decoder. `query` is `[B, d_dense]` (the projected
/// `<AFF>` embedding, or the text query in stage 1) and joins the learnable
/// queries of `{prefix}.queries`; `feats` is `[B·n, d_dense]`. Returns mask
/// logits `[B·n]` from the updated query and point features.
pub fn affordance_decode<'g>(
    p: &Params<'g>,
    cfg: &ModelConfig,
    prefix: &str,
    query: Var<'g>,
    feats: Var<'g>,
) -> Result<Var<'g>> {
    let c = cfg.d_dense;
    let b = query.shape()[0];
    if query.shape() != [b, c]
        || feats.shape().len() != 2
        || feats.shape()[1] != c
        || b == 0
        || feats.shape()[0] % b != 0
    {
        return Err(Error::dim(
            "affordance_decode",
            &query.shape(),
            &feats.shape(),
        ));
    }
    let n = feats.shape()[0] / b;
    let kq = cfg.n_queries + 1;
    let learned = p.get(&format!("{prefix}.queries"))?;
    let mut parts = Vec::with_capacity(2 * b);
    for i in 0..b {
        parts.push(learned);
        parts.push(query.slice_rows(i, i + 1)?);
    }
    let mut q = Var::concat_rows(&parts)?;
    let mut f = feats;

    let seg = |q_len: usize, k_len: usize| AttentionLayout {
        heads: 1,
        causal: false,
        segments: (0..b)
            .map(|i| Segment {
                q_start: i * q_len,
                q_len,
                k_start: i * k_len,
                k_len,
            })
            .collect(),
    };
    let to_points = seg(kq, n);
    let to_queries = seg(n, kq);
    for l in 0..cfg.decoder_layers {
        let w = |dir: &str, name: &str| p.get(&format!("{prefix}.layer{l}.{dir}.{name}"));
        // Queries read the points. Folding Wq·Wkᵀ into the queries keeps the
        // cost linear in n.
        let qt = q.matmul(w("qp", "wq")?)?.matmul_t(w("qp", "wk")?)?;
        let upd = qt
            .attention(f, f, &to_points)?
            .matmul(w("qp", "wv")?)?
            .matmul(w("qp", "wo")?)?;
        q = p.layer_norm(&format!("{prefix}.layer{l}.qp.ln"), q.add(upd)?)?;
        // Points read the updated queries.
        let keys = q.matmul(w("pq", "wk")?)?.matmul_t(w("pq", "wq")?)?;
        let vals = q.matmul(w("pq", "wv")?)?.matmul(w("pq", "wo")?)?;
        let upd = f.attention(keys, vals, &to_queries)?;
        f = p.layer_norm(&format!("{prefix}.layer{l}.pq.ln"), f.add(upd)?)?;
    }
    let aff_rows: Vec<usize> = (0..b).map(|i| i * kq + cfg.n_queries).collect();
    let qa = q.gather_rows(&aff_rows)?.repeat_rows(n);
    Ok(f.mul(qa)?.sum_last().scale(1.0 / (c as f64).sqrt()))
}
