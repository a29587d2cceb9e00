//! Two-stage training: part-segmentation pretraining, weight transfer and
//! instruction fine-tuning with LoRA adapters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor};
use crate::dataset::{Manifest, Sample, Split, Task, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::metrics::{self, EvaluationReport, MetricOptions, PredictionRecord};
use crate::model::{
    self, Checkpoint, CheckpointMeta, IrasItem, Model, ModelConfig, Params, RopsItem, Stage,
    Weights,
};
use crate::seeds;

/// Ablation switches for the component studies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Start stage 2 from fresh backbone and decoder weights.
    pub disable_pretrain_transfer: bool,
    /// Use ω = 1 for every class.
    pub disable_unbalanced: bool,
    pub dice_only: bool,
    pub bce_only: bool,
}

impl Ablation {
    pub fn check(&self) -> Result<()> {
        if self.dice_only && self.bce_only {
            return Err(Error::Config(
                "dice_only and bce_only are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_pretrain_transfer {
            parts.push("wo-pc");
        }
        if self.disable_unbalanced {
            parts.push("wo-ul");
        }
        if self.dice_only {
            parts.push("dice-only");
        }
        if self.bce_only {
            parts.push("bce-only");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

pub const PRETRAIN_EPOCHS: usize = 20;
pub const FINETUNE_EPOCHS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: PRETRAIN_EPOCHS,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_fraction: 0.05,
            seed: 1,
            loss: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self::default()
    }

    pub fn finetune() -> Self {
        TrainConfig {
            epochs: FINETUNE_EPOCHS,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        self.ablation.check()?;
        self.effective_loss().check()
    }

    /// Loss weights after the loss ablations are applied.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss.clone();
        if self.ablation.dice_only {
            w.lambda_bce = 0.0;
        }
        if self.ablation.bce_only {
            w.lambda_dice = 0.0;
        }
        w
    }

    /// Learning rate at 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_fraction * total as f64).ceil() as usize;
        if step < warmup {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub text_loss: Option<f64>,
    pub mask_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_text_loss: Option<f64>,
    pub mean_mask_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    fn close_epoch(&mut self, epoch: usize) {
        let recs: Vec<&StepRecord> = self.steps.iter().filter(|r| r.epoch == epoch).collect();
        let k = recs.len().max(1) as f64;
        let text: Vec<f64> = recs.iter().filter_map(|r| r.text_loss).collect();
        self.epochs.push(EpochRecord {
            epoch,
            mean_loss: recs.iter().map(|r| r.loss).sum::<f64>() / k,
            mean_text_loss: (!text.is_empty())
                .then(|| text.iter().sum::<f64>() / text.len() as f64),
            mean_mask_loss: recs.iter().map(|r| r.mask_loss).sum::<f64>() / k,
        });
    }

    /// One JSON object per line: step records, then epoch summaries.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "lowercase")]
        enum Line<'a> {
            Step(&'a StepRecord),
            Epoch(&'a EpochRecord),
        }
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&serde_json::to_string(&Line::Step(r))?);
            out.push('\n');
        }
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(&Line::Epoch(r))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

fn check_task(m: &Manifest, task: Task) -> Result<()> {
    if m.task != task {
        return Err(Error::Config(format!(
            "expected a {} manifest, got {}",
            task.name(),
            m.task.name()
        )));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, &[0x5eed, epoch as u64]));
    order
}

/// Applies one Adam step to every parameter that has a gradient and
/// returns the global gradient norm. A non-finite norm aborts the run.
fn apply(
    weights: &mut Weights,
    adam: &mut Adam,
    lr: f64,
    grads: &BTreeMap<String, Tensor>,
    step: usize,
) -> Result<f64> {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(diverged(step, "gradient norm", norm));
    }
    adam.step(
        lr,
        weights
            .iter_mut()
            .filter_map(|(name, t)| grads.get(name).map(|g| (name, t, g))),
    );
    Ok(norm)
}

/// Non-finite values anywhere in a step count as divergence at that step.
fn at_step<T>(r: Result<T>, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::Divergence {
            step,
            detail: format!("non-finite {what}"),
        },
        e => e,
    })
}

fn diverged(step: usize, what: &str, v: f64) -> Error {
    Error::Divergence {
        step,
        detail: format!("{what} is {v}"),
    }
}

/// Stage 1: trains the point backbone, mask decoder and text map on part
/// queries. Returns the checkpoint and the step log.
pub fn pretrain_rops(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Manifest,
) -> Result<(Checkpoint, TrainLog)> {
    pretrain_rops_with(cfg, model_cfg, data, &mut |_| {})
}

/// [`pretrain_rops`] with a callback after every epoch.
pub fn pretrain_rops_with(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Manifest,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.check()?;
    check_task(data, Task::Rops)?;
    let mut mcfg = model_cfg.clone();
    mcfg.vocab_size = data.vocab.len();
    let mut weights = Weights::init_rops(&mcfg, cfg.seed)?;
    let train: Vec<&Sample> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let queries: Vec<Vec<usize>> = train
        .iter()
        .map(|s| data.vocab.tokenize(&s.instruction))
        .collect();
    let lw = cfg.effective_loss();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in shuffled(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let mut gt = Vec::new();
            let items: Vec<RopsItem> = batch
                .iter()
                .map(|&i| {
                    gt.extend_from_slice(&train[i].mask);
                    RopsItem {
                        coords: &data.cloud(train[i]).points,
                        query: &queries[i],
                    }
                })
                .collect();
            let (loss, grads) = at_step(
                (|| {
                    let g = Graph::new();
                    let p = Params::new(&g, &weights, Some(Stage::Rops));
                    let logits = model::rops_forward(&p, &mcfg, &items)?;
                    let loss = losses::stage1_loss(logits, &gt, items.len(), &lw)?;
                    g.backward(loss)?;
                    Ok((loss.item(), p.grads()))
                })(),
                step,
            )?;
            if !loss.is_finite() {
                return Err(diverged(step, "stage-1 loss", loss));
            }
            let lr = cfg.lr_at(step, total);
            let grad_norm = apply(&mut weights, &mut adam, lr, &grads, step)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                text_loss: None,
                mask_loss: loss,
                grad_norm,
            });
            step += 1;
        }
        log.close_epoch(epoch);
        on_epoch(&log.epochs[epoch]);
    }
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config: mcfg,
            vocab_hash: data.vocab.fingerprint(),
            stage: Stage::Rops,
        },
        weights,
    };
    Ok((ckpt, log))
}

/// Teacher-forcing sequence for a sample: BOS, instruction, target, EOS.
/// Returns the ids and the index of the first target token.
pub fn training_sequence(vocab: &Vocabulary, sample: &Sample) -> (Vec<usize>, usize) {
    let mut ids = vec![BOS];
    ids.extend(vocab.tokenize(&sample.instruction));
    let start = ids.len();
    ids.extend(vocab.tokenize(&sample.target_text));
    ids.push(EOS);
    (ids, start)
}

/// Per-class ω table, or all ones when the unbalanced factor is disabled.
pub fn omega_table(cfg: &TrainConfig, data: &Manifest) -> Result<BTreeMap<String, f64>> {
    let mut table = losses::unbalanced_table(&data.counts)?;
    if cfg.ablation.disable_unbalanced {
        table.values_mut().for_each(|v| *v = 1.0);
    }
    Ok(table)
}

/// Stage 2: instruction fine-tuning. `pretrained` is the stage-1
/// checkpoint; it is ignored under the no-transfer ablation.
pub fn finetune_iras(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Manifest,
    pretrained: Option<&Checkpoint>,
) -> Result<(Checkpoint, TrainLog)> {
    finetune_iras_with(cfg, model_cfg, data, pretrained, &mut |_| {})
}

/// [`finetune_iras`] with a callback after every epoch.
pub fn finetune_iras_with(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Manifest,
    pretrained: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.check()?;
    check_task(data, Task::Iras)?;
    let mut mcfg = model_cfg.clone();
    mcfg.vocab_size = data.vocab.len();
    let mut weights = Weights::init_iras(&mcfg, cfg.seed)?;
    if !cfg.ablation.disable_pretrain_transfer {
        let pre = pretrained.ok_or_else(|| {
            Error::Config(
                "stage 2 needs a pretrained checkpoint unless transfer is disabled".into(),
            )
        })?;
        if pre.meta.stage != Stage::Rops {
            return Err(Error::Checkpoint(
                "transfer source is not a stage-1 checkpoint".into(),
            ));
        }
        weights.transfer_from_rops(&pre.weights)?;
    }
    let train: Vec<&Sample> = data.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let omega = omega_table(cfg, data)?;
    let lw = cfg.effective_loss();

    // The point encoder is frozen, so each cloud is encoded once.
    let mut encoded: BTreeMap<&str, Tensor> = BTreeMap::new();
    for s in &train {
        if !encoded.contains_key(s.cloud_ref.as_str()) {
            encoded.insert(
                &s.cloud_ref,
                model::encode_points(&weights, &mcfg, data.cloud(s))?,
            );
        }
    }
    let seqs: Vec<(Vec<usize>, usize)> = train
        .iter()
        .map(|s| training_sequence(&data.vocab, s))
        .collect();

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in shuffled(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let mut gt = Vec::new();
            let mut omegas = Vec::with_capacity(batch.len());
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = train[i];
                gt.extend_from_slice(&s.mask);
                omegas.push(
                    *omega
                        .get(&s.class)
                        .ok_or_else(|| Error::Contract(format!("no ω for class {}", s.class)))?,
                );
                items.push(IrasItem {
                    encoded: &encoded[s.cloud_ref.as_str()],
                    coords: &data.cloud(s).points,
                    text: seqs[i].0.clone(),
                    response_start: seqs[i].1,
                });
            }
            let (loss, text, mask, grads) = at_step(
                (|| {
                    let g = Graph::new();
                    let p = Params::new(&g, &weights, Some(Stage::Iras));
                    let out = model::iras_forward(&p, &mcfg, &items)?;
                    let l = losses::stage2_loss(
                        out.text_logits,
                        &out.text_targets,
                        out.mask_logits,
                        &gt,
                        &omegas,
                        &lw,
                    )?;
                    g.backward(l.total)?;
                    Ok((l.total.item(), l.text, l.mask, p.grads()))
                })(),
                step,
            )?;
            if !loss.is_finite() {
                return Err(diverged(step, "stage-2 loss", loss));
            }
            let lr = cfg.lr_at(step, total);
            let grad_norm = apply(&mut weights, &mut adam, lr, &grads, step)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                text_loss: Some(text),
                mask_loss: mask,
                grad_norm,
            });
            step += 1;
        }
        log.close_epoch(epoch);
        on_epoch(&log.epochs[epoch]);
    }
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config: mcfg,
            vocab_hash: data.vocab.fingerprint(),
            stage: Stage::Iras,
        },
        weights,
    };
    Ok((ckpt, log))
}

/// Greedy-decodes and segments every sample of `split`. Returns one record
/// per sample plus the share of responses that contained `<AFF>`.
/// Samples are processed in parallel on the current rayon pool; output
/// order follows the manifest.
pub fn predict_iras(
    model: &Model,
    data: &Manifest,
    split: Split,
    threshold: f64,
) -> Result<(Vec<PredictionRecord>, f64)> {
    check_task(data, Task::Iras)?;
    let samples: Vec<&Sample> = data.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    let out: Vec<(PredictionRecord, bool)> = samples
        .par_iter()
        .map(|s| {
            let p = model.predict_mask(data.cloud(s), &s.instruction, threshold)?;
            Ok((record(s, p.mask, p.confidence), p.aff_found))
        })
        .collect::<Result<_>>()?;
    let found = out.iter().filter(|r| r.1).count() as f64 / out.len() as f64;
    Ok((out.into_iter().map(|r| r.0).collect(), found))
}

pub fn evaluate_iras(
    model: &Model,
    data: &Manifest,
    split: Split,
    threshold: f64,
    options: MetricOptions,
) -> Result<EvaluationReport> {
    let (records, aff_rate) = predict_iras(model, data, split, threshold)?;
    let mut report = metrics::evaluate(&records, options)?;
    report.aff_rate = Some(aff_rate);
    Ok(report)
}

/// Part-segmentation predictions of a stage-1 checkpoint on `split`.
pub fn predict_rops(
    ckpt: &Checkpoint,
    data: &Manifest,
    split: Split,
    threshold: f64,
) -> Result<Vec<PredictionRecord>> {
    check_task(data, Task::Rops)?;
    ckpt.check_vocab(&data.vocab.fingerprint())?;
    let samples: Vec<&Sample> = data.split(split).collect();
    samples
        .par_iter()
        .map(|s| {
            let q = data.vocab.tokenize(&s.instruction);
            let logits = model::rops_predict(&ckpt.weights, &ckpt.meta.config, data.cloud(s), &q)?;
            let (mask, conf) = model::threshold_mask(&logits, threshold);
            Ok(record(s, mask, conf))
        })
        .collect()
}

fn record(s: &Sample, pred: Vec<u8>, confidence: f64) -> PredictionRecord {
    PredictionRecord {
        id: s.id.clone(),
        pred,
        confidence,
        gt: s.mask.clone(),
        class: s.class.clone(),
        view: s.view,
    }
}
