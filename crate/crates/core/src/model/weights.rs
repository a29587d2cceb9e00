use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::dataset::AFF;
use crate::error::{Error, Result};
use crate::seeds;

/// Named parameter tensors, keyed by module path (`f_llm.block0.wq`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

/// Which parameters a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rops,
    Iras,
}

/// Module prefixes trained in each stage; everything else stays frozen.
pub fn trainable_prefixes(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Rops => &["f_PB.", "f_MD.", "text_map."],
        Stage::Iras => &[
            "f_llm.lora.",
            "f_proj.",
            "proj_aff.",
            "f_PB.",
            "f_AFD.",
            "aff_token.",
        ],
    }
}

pub fn is_trainable(stage: Stage, name: &str) -> bool {
    trainable_prefixes(stage)
        .iter()
        .any(|p| name.starts_with(p))
}

struct Init<R: Rng> {
    rng: R,
}

impl<R: Rng> Init<R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::randn(shape, std, &mut self.rng)
    }

    /// `[fan_in, fan_out]` weight with std `gain / sqrt(fan_in)`.
    fn linear(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
        self.normal(&[fan_in, fan_out], gain / (fan_in as f64).sqrt())
    }
}

const HE: f64 = std::f64::consts::SQRT_2;

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Mutable access; clones only if a graph still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Arc<Tensor>)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Stage-1 model: point backbone, mask decoder, frozen text encoder, text map.
    pub fn init_rops(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut w = Weights::new();
        let mut frozen = Init {
            rng: seeds::rng(cfg.frozen_seed, &[3]),
        };
        w.insert(
            "text_enc.table",
            frozen.normal(&[cfg.vocab_size, cfg.d_txt], 1.0),
        );
        let mut init = Init {
            rng: seeds::rng(seed, &[1]),
        };
        w.insert("text_map.w", init.linear(cfg.d_txt, cfg.d_dense, 1.0));
        w.insert("text_map.b", Tensor::zeros(&[cfg.d_dense]));
        init_backbone(&mut w, &mut init, cfg);
        init_decoder(&mut w, &mut init, cfg, "f_MD");
        Ok(w)
    }

    /// Stage-2 model: every component of the instruction-driven pipeline.
    pub fn init_iras(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut w = Weights::new();
        let (c, d, r) = (cfg.d_point, cfg.d_lm, cfg.lora_rank);

        let mut frozen = Init {
            rng: seeds::rng(cfg.frozen_seed, &[1]),
        };
        w.insert("f_pe.l1.w", frozen.linear(3, c, HE));
        w.insert("f_pe.l1.b", frozen.normal(&[c], 0.1));
        w.insert("f_pe.l2.w", frozen.linear(c, c, HE));
        w.insert("f_pe.l2.b", frozen.normal(&[c], 0.1));

        let mut lm = Init {
            rng: seeds::rng(cfg.frozen_seed, &[2]),
        };
        w.insert(
            "f_llm.tok_emb",
            lm.normal(&[cfg.vocab_size, d], cfg.emb_std),
        );
        w.insert("f_llm.pos_emb", lm.normal(&[cfg.max_seq_len(), d], 0.1));
        let hidden = cfg.lm_mlp_mult * d;
        for l in 0..cfg.lm_layers {
            let p = format!("f_llm.block{l}");
            for ln in ["ln1", "ln2"] {
                w.insert(format!("{p}.{ln}.g"), Tensor::full(&[d], 1.0));
                w.insert(format!("{p}.{ln}.b"), Tensor::zeros(&[d]));
            }
            for name in ["wq", "wk", "wv", "wo"] {
                w.insert(format!("{p}.{name}"), lm.linear(d, d, 1.0));
            }
            w.insert(format!("{p}.w1"), lm.linear(d, hidden, HE));
            w.insert(format!("{p}.b1"), Tensor::zeros(&[hidden]));
            w.insert(format!("{p}.w2"), lm.linear(hidden, d, 1.0));
            w.insert(format!("{p}.b2"), Tensor::zeros(&[d]));
        }
        w.insert("f_llm.ln_f.g", Tensor::full(&[d], 1.0));
        w.insert("f_llm.ln_f.b", Tensor::zeros(&[d]));

        let mut init = Init {
            rng: seeds::rng(seed, &[2]),
        };
        for l in 0..cfg.lm_layers {
            for proj in ["q", "v"] {
                let p = format!("f_llm.lora.block{l}.{proj}");
                w.insert(format!("{p}.a"), init.linear(d, r, 1.0));
                w.insert(format!("{p}.b"), Tensor::zeros(&[r, d]));
            }
        }
        // New token row: mean of the existing rows plus small noise.
        let emb = w.get("f_llm.tok_emb")?.clone();
        let mut mean = vec![0.0; d];
        for row in 0..cfg.vocab_size {
            if row == AFF {
                continue;
            }
            for (m, v) in mean.iter_mut().zip(emb.row(row)) {
                *m += v / (cfg.vocab_size - 1) as f64;
            }
        }
        let noise = init.normal(&[d], 0.02 * cfg.emb_std);
        let row: Vec<f64> = mean.iter().zip(noise.data()).map(|(m, n)| m + n).collect();
        w.insert("aff_token.embedding", Tensor::new(&[1, d], row)?);

        w.insert("f_proj.w", init.linear(c, d, cfg.emb_std));
        w.insert("f_proj.b", Tensor::zeros(&[d]));
        w.insert("proj_aff.l1.w", init.linear(d, d, HE));
        w.insert("proj_aff.l1.b", Tensor::zeros(&[d]));
        w.insert("proj_aff.l2.w", init.linear(d, cfg.d_dense, 1.0));
        w.insert("proj_aff.l2.b", Tensor::zeros(&[cfg.d_dense]));
        init_backbone(&mut w, &mut init, cfg);
        init_decoder(&mut w, &mut init, cfg, "f_AFD");
        Ok(w)
    }

    /// Copies the pretrained backbone and mask decoder into a stage-2 model.
    pub fn transfer_from_rops(&mut self, pretrained: &Weights) -> Result<()> {
        let mut copied = 0;
        for (name, src) in pretrained.iter() {
            let dst_name = if name.starts_with("f_PB.") {
                name.to_string()
            } else if let Some(rest) = name.strip_prefix("f_MD.") {
                format!("f_AFD.{rest}")
            } else {
                continue;
            };
            let dst = self.get(&dst_name).map_err(|_| Error::Transfer {
                name: dst_name.clone(),
                expected: vec![],
                found: src.shape().to_vec(),
            })?;
            if dst.shape() != src.shape() {
                return Err(Error::Transfer {
                    name: dst_name,
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            self.tensors.insert(dst_name, Arc::clone(src));
            copied += 1;
        }
        let expected = self
            .names()
            .filter(|n| n.starts_with("f_PB.") || n.starts_with("f_AFD."))
            .count();
        if copied != expected {
            return Err(Error::Transfer {
                name: "f_PB/f_AFD".into(),
                expected: vec![expected],
                found: vec![copied],
            });
        }
        Ok(())
    }
}

fn init_backbone<R: Rng>(w: &mut Weights, init: &mut Init<R>, cfg: &ModelConfig) {
    let h = cfg.d_dense;
    w.insert("f_PB.l1.w", init.linear(3, h, HE));
    w.insert("f_PB.l1.b", Tensor::zeros(&[h]));
    w.insert("f_PB.l2.w", init.linear(h, h, HE));
    w.insert("f_PB.l2.b", Tensor::zeros(&[h]));
    w.insert("f_PB.l3.w", init.linear(h, h, HE));
    w.insert("f_PB.l3.b", Tensor::zeros(&[h]));
    w.insert(
        "f_PB.mix.wa",
        init.linear(h, h, std::f64::consts::FRAC_1_SQRT_2),
    );
    w.insert(
        "f_PB.mix.wb",
        init.linear(h, h, std::f64::consts::FRAC_1_SQRT_2),
    );
    w.insert("f_PB.mix.b", Tensor::zeros(&[h]));
}

fn init_decoder<R: Rng>(w: &mut Weights, init: &mut Init<R>, cfg: &ModelConfig, prefix: &str) {
    let h = cfg.d_dense;
    w.insert(
        format!("{prefix}.queries"),
        init.normal(&[cfg.n_queries, h], 1.0),
    );
    for l in 0..cfg.decoder_layers {
        for dir in ["qp", "pq"] {
            let p = format!("{prefix}.layer{l}.{dir}");
            for name in ["wq", "wk", "wv", "wo"] {
                w.insert(format!("{p}.{name}"), init.linear(h, h, 1.0));
            }
            w.insert(format!("{p}.ln.g"), Tensor::full(&[h], 1.0));
            w.insert(format!("{p}.ln.b"), Tensor::zeros(&[h]));
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metadata stored ahead of the tensors in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: Weights,
}

impl Checkpoint {
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.weights
            .names()
            .filter(|n| is_trainable(self.meta.stage, n))
            .map(String::from)
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (name, t) in self.weights.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(is_trainable(self.meta.stage, name) as u8);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut weights = Weights::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let _trainable = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            weights.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { meta, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint was trained with the given vocabulary.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.meta.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                checkpoint: self.meta.vocab_hash.clone(),
                data: vocab_hash.to_string(),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
