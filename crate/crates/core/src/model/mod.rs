//! The instruction-driven segmentation model: frozen point encoder,
//! projector, causal LM with LoRA adapters, `<AFF>` embedding projection,
//! dense point backbone and affordance decoder, plus the stage-1 text path.

mod config;
pub mod decoder;
mod encoder;
pub mod lm;
mod params;
mod weights;

pub use config::ModelConfig;
pub use decoder::{affordance_decode, point_backbone};
pub use encoder::encode_points;
pub use lm::{lm_forward, logits_at, project_tokens, LmOutput};
pub use params::Params;
pub use weights::{
    is_trainable, trainable_prefixes, Checkpoint, CheckpointMeta, Stage, Weights, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::autodiff::{Graph, Tensor, Var};
use crate::dataset::{Vocabulary, AFF, BOS, EOS};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Longest response greedy decoding will produce.
pub const MAX_DECODE: usize = 16;

/// Stacks cloud coordinates into a `[B·n, 3]` tensor; all clouds must share `n`.
pub fn stack_coords(clouds: &[&[[f64; 3]]]) -> Result<Tensor> {
    let n = clouds.first().map_or(0, |c| c.len());
    if let Some(c) = clouds.iter().find(|c| c.len() != n) {
        return Err(Error::Contract(format!(
            "clouds in one batch differ in size: {n} vs {}",
            c.len()
        )));
    }
    let data = clouds
        .iter()
        .flat_map(|c| c.iter().flat_map(|p| p.iter().copied()))
        .collect();
    Tensor::new(&[clouds.len() * n, 3], data)
}

/// Mean of frozen embedding rows over the query tokens, `[d_txt]`.
pub fn frozen_text_encode(w: &Weights, ids: &[usize]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::Contract("empty text query".into()));
    }
    let table = w.get("text_enc.table")?;
    let d = table.cols();
    let mut out = vec![0.0; d];
    for &id in ids {
        if id >= table.rows() {
            return Err(Error::Contract(format!("token id {id} outside text table")));
        }
        for (o, v) in out.iter_mut().zip(table.row(id)) {
            *o += v;
        }
    }
    let k = ids.len() as f64;
    Ok(out.into_iter().map(|v| v / k).collect())
}

/// One stage-1 example: a cloud and its tokenized part query.
pub struct RopsItem<'a> {
    pub coords: &'a [[f64; 3]],
    pub query: &'a [usize],
}

/// Stage-1 mask logits `[B·n]`: frozen text encoding, trainable text map,
/// point backbone and mask decoder.
pub fn rops_forward<'g>(
    p: &Params<'g>,
    cfg: &ModelConfig,
    items: &[RopsItem<'_>],
) -> Result<Var<'g>> {
    let mut enc = Vec::with_capacity(items.len() * cfg.d_txt);
    for it in items {
        enc.extend(frozen_text_encode(p.weights(), it.query)?);
    }
    let f_q = p.constant(Tensor::new(&[items.len(), cfg.d_txt], enc)?);
    let query = p.linear("text_map", f_q)?;
    let coords: Vec<&[[f64; 3]]> = items.iter().map(|i| i.coords).collect();
    let n = coords[0].len();
    let feats = point_backbone(p, p.constant(stack_coords(&coords)?), n)?;
    affordance_decode(p, cfg, "f_MD", query, feats)
}

/// One teacher-forced stage-2 example.
pub struct IrasItem<'a> {
    /// Frozen encoder output for the cloud, `[m, d_point]`.
    pub encoded: &'a Tensor,
    pub coords: &'a [[f64; 3]],
    /// BOS, instruction, response, EOS.
    pub text: Vec<usize>,
    /// Index in `text` of the first response token.
    pub response_start: usize,
}

pub struct IrasOutput<'g> {
    pub lm: LmOutput<'g>,
    /// Logits `[R, V]` for every response position of every sample.
    pub text_logits: Var<'g>,
    pub text_targets: Vec<usize>,
    /// Which sample each text-logit row belongs to.
    pub text_owner: Vec<usize>,
    pub mask_logits: Var<'g>,
    pub n: usize,
}

/// Projects an `<AFF>` hidden state `[B, d_lm]` to the decoder width.
pub fn project_aff<'g>(p: &Params<'g>, h: Var<'g>) -> Result<Var<'g>> {
    let h = p.linear("proj_aff.l1", h)?.relu();
    p.linear("proj_aff.l2", h)
}

/// Projected point tokens for stacked encoder outputs.
fn point_tokens<'g>(p: &Params<'g>, cfg: &ModelConfig, encoded: &[&Tensor]) -> Result<Var<'g>> {
    let mut data = Vec::with_capacity(encoded.len() * cfg.m * cfg.d_point);
    for e in encoded {
        if e.shape() != [cfg.m, cfg.d_point] {
            return Err(Error::dim("point tokens", e.shape(), &[cfg.m, cfg.d_point]));
        }
        data.extend_from_slice(e.data());
    }
    project_tokens(
        p,
        p.constant(Tensor::new(&[encoded.len() * cfg.m, cfg.d_point], data)?),
    )
}

pub fn iras_forward<'g>(
    p: &Params<'g>,
    cfg: &ModelConfig,
    items: &[IrasItem<'_>],
) -> Result<IrasOutput<'g>> {
    let encoded: Vec<&Tensor> = items.iter().map(|i| i.encoded).collect();
    let y = point_tokens(p, cfg, &encoded)?;
    let texts: Vec<Vec<usize>> = items.iter().map(|i| i.text.clone()).collect();
    let lm = lm_forward(p, cfg, y, &texts)?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    let mut aff_rows = Vec::with_capacity(items.len());
    for (b, it) in items.iter().enumerate() {
        if it.response_start == 0 || it.response_start >= it.text.len() {
            return Err(Error::Contract(format!(
                "response start {} in text of {}",
                it.response_start,
                it.text.len()
            )));
        }
        for j in it.response_start - 1..it.text.len() - 1 {
            rows.push(lm.text_row(cfg, b, j));
            targets.push(it.text[j + 1]);
            owner.push(b);
        }
        let j = it
            .text
            .iter()
            .position(|&t| t == AFF)
            .ok_or(Error::AffTokenMissing)?;
        aff_rows.push(lm.text_row(cfg, b, j));
    }
    let text_logits = logits_at(&lm, &rows)?;
    let h_aff = project_aff(p, lm.hidden.gather_rows(&aff_rows)?)?;
    let coords: Vec<&[[f64; 3]]> = items.iter().map(|i| i.coords).collect();
    let n = coords[0].len();
    let feats = point_backbone(p, p.constant(stack_coords(&coords)?), n)?;
    let mask_logits = affordance_decode(p, cfg, "f_AFD", h_aff, feats)?;
    Ok(IrasOutput {
        lm,
        text_logits,
        text_targets: targets,
        text_owner: owner,
        mask_logits,
        n,
    })
}

/// Greedy decoding result. `hidden` row `j` is the last-layer state at the
/// input position of generated token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub text: String,
    pub hidden: Tensor,
}

/// Hidden state at the first `<AFF>` among `ids`.
pub fn extract_aff_embedding(hidden: &Tensor, ids: &[usize]) -> Result<Vec<f64>> {
    let j = ids
        .iter()
        .position(|&t| t == AFF)
        .ok_or(Error::AffTokenMissing)?;
    if j >= hidden.rows() {
        return Err(Error::Contract(format!(
            "<AFF> at {j} but only {} hidden rows",
            hidden.rows()
        )));
    }
    Ok(hidden.row(j).to_vec())
}

/// Mask prediction for one cloud and instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub text: String,
    pub generated: Vec<usize>,
    pub mask: Vec<u8>,
    pub logits: Vec<f64>,
    /// Mean sigmoid over predicted-positive points, 0 when none.
    pub confidence: f64,
    pub aff_found: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binarizes logits at a probability threshold and reports the mean
/// probability over the positives.
pub fn threshold_mask(logits: &[f64], threshold: f64) -> (Vec<u8>, f64) {
    let cut = (threshold / (1.0 - threshold)).ln();
    let mask: Vec<u8> = logits.iter().map(|&x| (x > cut) as u8).collect();
    let pos: Vec<f64> = logits
        .iter()
        .filter(|&&x| x > cut)
        .map(|&x| sigmoid(x))
        .collect();
    let conf = if pos.is_empty() {
        0.0
    } else {
        pos.iter().sum::<f64>() / pos.len() as f64
    };
    (mask, conf)
}

/// A stage-2 model ready for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
    pub vocab: Vocabulary,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights, vocab: Vocabulary) -> Result<Self> {
        config.check()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Model {
            config,
            weights,
            vocab,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, vocab: Vocabulary) -> Result<Self> {
        ckpt.check_vocab(&vocab.fingerprint())?;
        if ckpt.meta.stage != Stage::Iras {
            return Err(Error::Checkpoint(
                "expected a fine-tuned (iras) checkpoint".into(),
            ));
        }
        Self::new(ckpt.meta.config, ckpt.weights, vocab)
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<Tensor> {
        encode_points(&self.weights, &self.config, cloud)
    }

    pub fn prompt_ids(&self, instruction: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.tokenize(instruction));
        ids
    }

    /// Per-position vocabulary distributions `[L, V]` and hidden states
    /// `[L, d_lm]` over the text part of one sequence.
    pub fn lm_distributions(&self, encoded: &Tensor, text: &[usize]) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let p = Params::frozen(&g, &self.weights);
        let y = point_tokens(&p, &self.config, &[encoded])?;
        let out = lm_forward(&p, &self.config, y, &[text.to_vec()])?;
        let rows: Vec<usize> = (0..text.len())
            .map(|j| out.text_row(&self.config, 0, j))
            .collect();
        let probs = logits_at(&out, &rows)?.softmax();
        let hidden = out.hidden.gather_rows(&rows)?;
        Ok(((*probs.value()).clone(), (*hidden.value()).clone()))
    }

    /// Argmax decoding after the prompt until EOS or `MAX_DECODE` tokens.
    pub fn greedy_decode_encoded(&self, encoded: &Tensor, prompt: &[usize]) -> Result<Decoded> {
        let limit = MAX_DECODE.min(self.config.max_text_len.saturating_sub(prompt.len()));
        let mut seq = prompt.to_vec();
        let mut generated = Vec::new();
        while generated.len() < limit {
            let g = Graph::new();
            let p = Params::frozen(&g, &self.weights);
            let y = point_tokens(&p, &self.config, &[encoded])?;
            let out = lm_forward(&p, &self.config, y, &[seq.clone()])?;
            let last = out.text_row(&self.config, 0, seq.len() - 1);
            let logits = logits_at(&out, &[last])?.value();
            let next = argmax(logits.data());
            seq.push(next);
            generated.push(next);
            if next == EOS {
                break;
            }
        }
        let hidden = if generated.is_empty() {
            Tensor::zeros(&[0, self.config.d_lm])
        } else {
            let (_, h) = self.lm_distributions(encoded, &seq)?;
            let start = prompt.len();
            let rows: Vec<f64> = (start..seq.len()).flat_map(|r| h.row(r).to_vec()).collect();
            Tensor::new(&[seq.len() - start, self.config.d_lm], rows)?
        };
        Ok(Decoded {
            text: self.vocab.detokenize(&generated),
            ids: generated,
            hidden,
        })
    }

    pub fn greedy_decode(&self, cloud: &PointCloud, instruction: &str) -> Result<Decoded> {
        let enc = self.encode(cloud)?;
        self.greedy_decode_encoded(&enc, &self.prompt_ids(instruction))
    }

    /// Mask logits `[n]` for a cloud given an `<AFF>` hidden state.
    pub fn mask_logits_from_hidden(&self, cloud: &PointCloud, h_aff: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = Params::frozen(&g, &self.weights);
        let h = p.constant(Tensor::new(&[1, h_aff.len()], h_aff.to_vec())?);
        let q = project_aff(&p, h)?;
        let feats = point_backbone(&p, p.constant(stack_coords(&[&cloud.points])?), cloud.len())?;
        let logits = affordance_decode(&p, &self.config, "f_AFD", q, feats)?;
        Ok(logits.value().data().to_vec())
    }

    /// Full inference path. A response without `<AFF>` yields an empty mask
    /// with confidence 0 rather than an error.
    pub fn predict_mask(
        &self,
        cloud: &PointCloud,
        instruction: &str,
        threshold: f64,
    ) -> Result<Prediction> {
        let decoded = self.greedy_decode(cloud, instruction)?;
        match extract_aff_embedding(&decoded.hidden, &decoded.ids) {
            Ok(h) => {
                let logits = self.mask_logits_from_hidden(cloud, &h)?;
                let (mask, confidence) = threshold_mask(&logits, threshold);
                Ok(Prediction {
                    text: decoded.text,
                    generated: decoded.ids,
                    mask,
                    logits,
                    confidence,
                    aff_found: true,
                })
            }
            Err(Error::AffTokenMissing) => Ok(Prediction {
                text: decoded.text,
                generated: decoded.ids,
                mask: vec![0; cloud.len()],
                logits: vec![f64::NEG_INFINITY; cloud.len()],
                confidence: 0.0,
                aff_found: false,
            }),
            Err(e) => Err(e),
        }
    }
}

/// Stage-1 inference: part-mask logits for one cloud and tokenized query.
pub fn rops_predict(
    w: &Weights,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    query: &[usize],
) -> Result<Vec<f64>> {
    let g = Graph::new();
    let p = Params::frozen(&g, w);
    let logits = rops_forward(
        &p,
        cfg,
        &[RopsItem {
            coords: &cloud.points,
            query,
        }],
    )?;
    Ok(logits.value().data().to_vec())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
