use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Width names follow the usual symbols:
/// `d_point` is c, `d_lm` is c″, `d_dense` is c′, `n_queries` is K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_point: usize,
    /// Point tokens fed to the LM.
    pub m: usize,
    /// Neighbours grouped around each encoder centre.
    pub knn: usize,
    pub d_lm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_mlp_mult: usize,
    /// Longest text part (BOS, instruction, response, EOS) the LM accepts.
    pub max_text_len: usize,
    pub d_dense: usize,
    pub n_queries: usize,
    pub decoder_layers: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Width of the frozen stage-1 text encoder.
    pub d_txt: usize,
    pub vocab_size: usize,
    /// Std of the frozen token embeddings; large enough that the tied output
    /// head can express confident distributions.
    pub emb_std: f64,
    /// Seed for the frozen modules (point encoder, base LM, text encoder),
    /// standing in for pretrained weights shared by every run.
    pub frozen_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_point: 64,
            m: 32,
            knn: 16,
            d_lm: 128,
            lm_layers: 4,
            lm_heads: 4,
            lm_mlp_mult: 4,
            max_text_len: 64,
            d_dense: 64,
            n_queries: 4,
            decoder_layers: 2,
            lora_rank: 4,
            lora_alpha: 8.0,
            d_txt: 64,
            vocab_size: 0,
            emb_std: 0.5,
            frozen_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn max_seq_len(&self) -> usize {
        self.m + self.max_text_len
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lm_heads == 0 || self.d_lm % self.lm_heads != 0 {
            return bad(format!(
                "d_lm {} not divisible by lm_heads {}",
                self.d_lm, self.lm_heads
            ));
        }
        if self.decoder_layers != 2 {
            return bad(format!(
                "decoder_layers must be 2, got {}",
                self.decoder_layers
            ));
        }
        for (name, w) in [
            ("d_point", self.d_point),
            ("d_lm", self.d_lm),
            ("d_dense", self.d_dense),
            ("d_txt", self.d_txt),
        ] {
            if w < 8 {
                return bad(format!("{name} = {w} is below 8"));
            }
        }
        if self.m == 0
            || self.knn == 0
            || self.lm_layers == 0
            || self.n_queries == 0
            || self.lora_rank == 0
        {
            return bad("m, knn, lm_layers, n_queries and lora_rank must be positive".into());
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if !(self.emb_std > 0.0) || !self.lora_alpha.is_finite() {
            return bad("emb_std must be positive and lora_alpha finite".into());
        }
        Ok(())
    }
}
