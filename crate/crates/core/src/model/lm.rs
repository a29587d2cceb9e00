use crate::autodiff::{AttentionLayout, Segment, Var};
use crate::dataset::AFF;
use crate::error::{Error, Result};

use super::{ModelConfig, Params};

/// Batched decoder-only transformer output. Sequence `b` occupies rows
/// `starts[b] .. starts[b] + lens[b]`: `m` point slots, then its text.
pub struct LmOutput<'g> {
    /// Last-layer hidden states after the final layer norm.
    pub hidden: Var<'g>,
    /// Input embedding table, reused by the tied output head.
    pub table: Var<'g>,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

impl LmOutput<'_> {
    /// Row of text token `j` of sequence `b`.
    pub fn text_row(&self, cfg: &ModelConfig, b: usize, j: usize) -> usize {
        self.starts[b] + cfg.m + j
    }
}

/// Embedding table with the `<AFF>` row taken from its own parameter.
pub fn token_table<'g>(p: &Params<'g>) -> Result<Var<'g>> {
    let tok = p.get("f_llm.tok_emb")?;
    let v = tok.shape()[0];
    let aff = p.get("aff_token.embedding")?;
    Var::concat_rows(&[tok.slice_rows(0, AFF)?, aff, tok.slice_rows(AFF + 1, v)?])
}

/// Point tokens `Y = X·W + b` for stacked encoder outputs `[B·m, d_point]`.
pub fn project_tokens<'g>(p: &Params<'g>, x: Var<'g>) -> Result<Var<'g>> {
    p.linear("f_proj", x)
}

/// Runs the LM over `B` sequences. `point_tokens` is `[B·m, d_lm]`; each
/// entry of `texts` is the text part (BOS first) of one sequence.
pub fn lm_forward<'g>(
    p: &Params<'g>,
    cfg: &ModelConfig,
    point_tokens: Var<'g>,
    texts: &[Vec<usize>],
) -> Result<LmOutput<'g>> {
    let b = texts.len();
    if point_tokens.shape() != [b * cfg.m, cfg.d_lm] {
        return Err(Error::dim(
            "lm_forward",
            &point_tokens.shape(),
            &[b * cfg.m, cfg.d_lm],
        ));
    }
    for t in texts {
        if t.len() > cfg.max_text_len || t.is_empty() {
            return Err(Error::Contract(format!(
                "text of {} tokens, limit is 1..={}",
                t.len(),
                cfg.max_text_len
            )));
        }
    }
    let table = token_table(p)?;
    let all_ids: Vec<usize> = texts.iter().flatten().copied().collect();
    if let Some(&bad) = all_ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let text_emb = table.embedding_lookup(&all_ids)?;

    let mut parts = Vec::with_capacity(2 * b);
    let mut starts = Vec::with_capacity(b);
    let mut lens = Vec::with_capacity(b);
    let mut positions = Vec::new();
    let (mut row, mut text_row) = (0, 0);
    for (i, t) in texts.iter().enumerate() {
        parts.push(point_tokens.slice_rows(i * cfg.m, (i + 1) * cfg.m)?);
        parts.push(text_emb.slice_rows(text_row, text_row + t.len())?);
        let len = cfg.m + t.len();
        starts.push(row);
        lens.push(len);
        positions.extend(0..len);
        row += len;
        text_row += t.len();
    }
    let pos = p.get("f_llm.pos_emb")?.gather_rows(&positions)?;
    let mut x = Var::concat_rows(&parts)?.add(pos)?;

    let layout = AttentionLayout {
        heads: cfg.lm_heads,
        causal: true,
        segments: starts
            .iter()
            .zip(&lens)
            .map(|(&s, &l)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect(),
    };
    let scale = cfg.lora_scale();
    for l in 0..cfg.lm_layers {
        let pre = format!("f_llm.block{l}");
        let lora = format!("f_llm.lora.block{l}");
        let h = p.layer_norm(&format!("{pre}.ln1"), x)?;
        let with_lora = |w: &str, proj: &str| -> Result<Var<'g>> {
            let base = h.matmul(p.get(&format!("{pre}.{w}"))?)?;
            let delta = h
                .matmul(p.get(&format!("{lora}.{proj}.a"))?)?
                .matmul(p.get(&format!("{lora}.{proj}.b"))?)?
                .scale(scale);
            base.add(delta)
        };
        let q = with_lora("wq", "q")?;
        let k = h.matmul(p.get(&format!("{pre}.wk"))?)?;
        let v = with_lora("wv", "v")?;
        let a = q
            .attention(k, v, &layout)?
            .matmul(p.get(&format!("{pre}.wo"))?)?;
        x = x.add(a)?;
        let h = p.layer_norm(&format!("{pre}.ln2"), x)?;
        let f = h
            .matmul(p.get(&format!("{pre}.w1"))?)?
            .add_row(p.get(&format!("{pre}.b1"))?)?
            .relu()
            .matmul(p.get(&format!("{pre}.w2"))?)?
            .add_row(p.get(&format!("{pre}.b2"))?)?;
        x = x.add(f)?;
    }
    let hidden = p.layer_norm("f_llm.ln_f", x)?;
    Ok(LmOutput {
        hidden,
        table,
        starts,
        lens,
    })
}

/// Vocabulary logits for selected hidden rows, through the tied head.
pub fn logits_at<'g>(out: &LmOutput<'g>, rows: &[usize]) -> Result<Var<'g>> {
    out.hidden.gather_rows(rows)?.matmul_t(out.table)
}
