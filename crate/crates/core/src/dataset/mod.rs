//! ROPS and IRAS instruction/mask datasets built from synthetic clouds,
//! the word-level tokenizer, and the JSON-lines manifest format.

mod manifest;
pub mod templates;
pub mod vocab;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{manifest_file_name, Header, Record, FORMAT_VERSION};
pub use templates::{render_instruction, render_part_query, TARGET_TEXT};
pub use vocab::{split_words, Vocabulary, AFF, AFF_TOKEN, BOS, EOS, PAD, PT, UNK};

use crate::error::{Error, Result};
use crate::geometry::catalog::{self, is_reserved, RESERVED_PAIRS};
use crate::geometry::{
    generate_partial, generate_shape, shape_spec, Affordance, ObjectClass, PointCloud, View,
};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rops,
    Iras,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Rops => "rops",
            Task::Iras => "iras",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rops" => Ok(Task::Rops),
            "iras" => Ok(Task::Iras),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (expected rops or iras)"
            ))),
        }
    }
}

/// `Close` holds held-out clouds of seen verb-object pairs; `Open` holds the
/// reserved pairs that never appear in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Close,
    Open,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Close => "close",
            Split::Open => "open",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "close" => Ok(Split::Close),
            "open" => Ok(Split::Open),
            _ => Err(Error::Config(format!(
                "unknown split {s:?} (expected train, close or open)"
            ))),
        }
    }
}

/// Whether the class counts behind the unbalanced weights come from the whole
/// train split or are recomputed per batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountGranularity {
    #[default]
    Dataset,
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_points: usize,
    pub classes: Vec<String>,
    /// Object instances per class in the train split.
    pub train_objects: usize,
    /// Held-out instances per class for the close-set split.
    pub test_objects: usize,
    /// Instances of each reserved pair's object class for the open-set split.
    pub open_objects: usize,
    pub views: Vec<View>,
    pub count_granularity: CountGranularity,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 1,
            n_points: crate::geometry::DEFAULT_POINTS,
            classes: ObjectClass::ALL
                .iter()
                .map(|c| c.name().to_string())
                .collect(),
            train_objects: 28,
            test_objects: 6,
            open_objects: 8,
            views: vec![View::Full, View::Partial],
            count_granularity: CountGranularity::Dataset,
        }
    }
}

impl DatasetConfig {
    pub fn object_classes(&self) -> Result<Vec<ObjectClass>> {
        self.classes
            .iter()
            .map(|c| {
                c.parse::<ObjectClass>()
                    .map_err(|_| Error::Config(format!("unknown object class {c:?}")))
            })
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        self.object_classes()?;
        if self.n_points < crate::geometry::MIN_POINTS {
            return Err(Error::Config(format!(
                "n_points {} below minimum {}",
                self.n_points,
                crate::geometry::MIN_POINTS
            )));
        }
        if self.views.is_empty() {
            return Err(Error::Config("views must not be empty".into()));
        }
        if self.train_objects == 0 {
            return Err(Error::Config("train_objects must be positive".into()));
        }
        Ok(())
    }
}

/// One instruction/mask pair, shared by both tasks. For ROPS the `class` is
/// the part name and `target_text` is empty; for IRAS it is the verb.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub instruction: String,
    pub target_text: String,
    pub cloud_ref: String,
    pub mask: Vec<u8>,
    pub class: String,
    pub object_class: ObjectClass,
    pub view: View,
    pub split: Split,
}

impl Sample {
    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Positive-point totals per class and the background total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub granularity: CountGranularity,
    pub per_class: BTreeMap<String, u64>,
    pub background: u64,
}

impl ClassCounts {
    pub fn from_samples<'a>(
        granularity: CountGranularity,
        samples: impl IntoIterator<Item = &'a Sample>,
    ) -> Self {
        let mut counts = ClassCounts {
            granularity,
            ..Default::default()
        };
        for s in samples {
            let pos = s.positives() as u64;
            *counts.per_class.entry(s.class.clone()).or_insert(0) += pos;
            counts.background += s.mask.len() as u64 - pos;
        }
        counts
    }
}

/// An in-memory dataset: the clouds it references and its samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub task: Task,
    pub config: DatasetConfig,
    pub vocab: Vocabulary,
    pub counts: ClassCounts,
    pub clouds: BTreeMap<String, PointCloud>,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn cloud(&self, sample: &Sample) -> &PointCloud {
        &self.clouds[&sample.cloud_ref]
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Sample count per class in one split.
    pub fn census(&self, split: Split) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in self.split(split) {
            *out.entry(s.class.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// The vocabulary of the full template corpus; identical for both tasks.
pub fn build_vocabulary() -> Vocabulary {
    let corpus = templates::corpus();
    Vocabulary::from_corpus(corpus.iter().map(String::as_str))
}

struct Instance {
    class: ObjectClass,
    split: Split,
    index: usize,
    shape_seed: u64,
}

impl Instance {
    fn cloud_ref(&self, view: View) -> String {
        let v = match view {
            View::Full => "full",
            View::Partial => "partial",
        };
        format!(
            "clouds/{}-{}-{:03}-{v}.bin",
            self.class,
            self.split.name(),
            self.index
        )
    }
}

fn instances(config: &DatasetConfig, include_open: bool) -> Result<Vec<Instance>> {
    let classes = config.object_classes()?;
    let mut out = Vec::new();
    let mut push = |class: ObjectClass, split: Split, count: usize| {
        for index in 0..count {
            let shape_seed = seeds::mix(
                config.seed,
                &[class.id() as u64, split.code(), index as u64],
            );
            out.push(Instance {
                class,
                split,
                index,
                shape_seed,
            });
        }
    };
    for &class in &classes {
        push(class, Split::Train, config.train_objects);
        push(class, Split::Close, config.test_objects);
    }
    if include_open {
        let mut open_classes: Vec<ObjectClass> = RESERVED_PAIRS.iter().map(|p| p.1).collect();
        open_classes.dedup();
        for class in open_classes.into_iter().filter(|c| classes.contains(c)) {
            push(class, Split::Open, config.open_objects);
        }
    }
    Ok(out)
}

const CROP_ATTEMPTS: u64 = 8;

fn render_clouds(config: &DatasetConfig, inst: &Instance) -> Result<Vec<(View, PointCloud)>> {
    let spec = shape_spec(inst.class, inst.shape_seed);
    let mut out = Vec::new();
    for &view in &config.views {
        let cloud = match view {
            View::Full => generate_shape(&spec, inst.shape_seed, config.n_points)?,
            View::Partial => {
                let mut last = None;
                let mut got = None;
                for attempt in 0..CROP_ATTEMPTS {
                    let crop_seed =
                        seeds::mix(inst.shape_seed, &[View::Partial.code() as u64, attempt]);
                    match generate_partial(&spec, inst.shape_seed, crop_seed, config.n_points) {
                        Ok(c) => {
                            got = Some(c);
                            break;
                        }
                        Err(e @ Error::Crop { .. }) => last = Some(e),
                        Err(e) => return Err(e),
                    }
                }
                match got {
                    Some(c) => c,
                    None => return Err(last.unwrap()),
                }
            }
        };
        out.push((view, cloud.quantized()));
    }
    Ok(out)
}

fn sample_id(task: Task, inst: &Instance, view: View, class: &str) -> String {
    let v = match view {
        View::Full => "full",
        View::Partial => "partial",
    };
    format!(
        "{}-{}-{}-{:03}-{v}-{class}",
        task.name(),
        inst.split.name(),
        inst.class,
        inst.index
    )
}

fn iras_samples(inst: &Instance, view: View, cloud: &PointCloud) -> Result<Vec<Sample>> {
    let spec = shape_spec(inst.class, inst.shape_seed);
    let verbs: Vec<Affordance> = match inst.split {
        Split::Open => RESERVED_PAIRS
            .iter()
            .filter(|(_, c)| *c == inst.class)
            .map(|(v, _)| *v)
            .collect(),
        _ => catalog::seen_affordances(inst.class),
    };
    let mut out = Vec::new();
    for verb in verbs {
        let mask = cloud.mask_for(spec.affordance_parts(verb)?);
        if !mask.contains(&1) {
            continue;
        }
        let template_seed = seeds::mix(inst.shape_seed, &[verb.id() as u64, view.code() as u64]);
        out.push(Sample {
            id: sample_id(Task::Iras, inst, view, verb.name()),
            task: Task::Iras,
            instruction: render_instruction(verb, inst.class, template_seed)?,
            target_text: TARGET_TEXT.to_string(),
            cloud_ref: inst.cloud_ref(view),
            mask,
            class: verb.name().to_string(),
            object_class: inst.class,
            view,
            split: inst.split,
        });
    }
    Ok(out)
}

fn rops_samples(inst: &Instance, view: View, cloud: &PointCloud) -> Vec<Sample> {
    let spec = shape_spec(inst.class, inst.shape_seed);
    let mut out = Vec::new();
    for part in &spec.parts {
        let mask = cloud.mask_for(&[part.id]);
        if !mask.contains(&1) {
            continue;
        }
        let template_seed =
            seeds::mix(inst.shape_seed, &[100 + part.id as u64, view.code() as u64]);
        out.push(Sample {
            id: sample_id(Task::Rops, inst, view, &part.name),
            task: Task::Rops,
            instruction: render_part_query(&part.name, inst.class, template_seed),
            target_text: String::new(),
            cloud_ref: inst.cloud_ref(view),
            mask,
            class: part.name.clone(),
            object_class: inst.class,
            view,
            split: inst.split,
        });
    }
    out
}

fn build(config: &DatasetConfig, task: Task) -> Result<Manifest> {
    config.check()?;
    let insts = instances(config, task == Task::Iras)?;
    let rendered: Vec<Result<(Vec<(String, PointCloud)>, Vec<Sample>)>> = insts
        .par_iter()
        .map(|inst| {
            let mut clouds = Vec::new();
            let mut samples = Vec::new();
            for (view, cloud) in render_clouds(config, inst)? {
                let made = match task {
                    Task::Iras => iras_samples(inst, view, &cloud)?,
                    Task::Rops => rops_samples(inst, view, &cloud),
                };
                // A crop can remove every labeled region of interest.
                if !made.is_empty() {
                    samples.extend(made);
                    clouds.push((inst.cloud_ref(view), cloud));
                }
            }
            Ok((clouds, samples))
        })
        .collect();
    let mut clouds = BTreeMap::new();
    let mut samples = Vec::new();
    for r in rendered {
        let (c, s) = r?;
        clouds.extend(c);
        samples.extend(s);
    }
    let counts = ClassCounts::from_samples(
        config.count_granularity,
        samples.iter().filter(|s| s.split == Split::Train),
    );
    Ok(Manifest {
        task,
        config: config.clone(),
        vocab: build_vocabulary(),
        counts,
        clouds,
        samples,
    })
}

/// IRAS dataset: one sample per (cloud, view, verb). Train and close splits
/// use the seen verbs of each class; the open split holds only reserved pairs.
/// Samples whose mask is empty after a partial crop are dropped.
pub fn build_iras_dataset(config: &DatasetConfig) -> Result<Manifest> {
    build(config, Task::Iras)
}

/// ROPS dataset: one sample per (cloud, view, part), from the same clouds as IRAS.
pub fn build_rops_dataset(config: &DatasetConfig) -> Result<Manifest> {
    build(config, Task::Rops)
}

/// Checks every sample and the recorded counts against regeneration from
/// the catalog and the stored clouds.
pub fn validate(m: &Manifest) -> Result<()> {
    let bad = |id: &str, what: String| Err(Error::Contract(format!("sample {id}: {what}")));
    for s in &m.samples {
        let Some(cloud) = m.clouds.get(&s.cloud_ref) else {
            return bad(&s.id, format!("missing cloud {}", s.cloud_ref));
        };
        if s.mask.len() != cloud.len() || cloud.len() != m.config.n_points {
            return bad(
                &s.id,
                format!("mask length {} vs cloud {}", s.mask.len(), cloud.len()),
            );
        }
        if s.positives() == 0 {
            return bad(&s.id, "empty mask".into());
        }
        if s.mask.iter().any(|&v| v > 1) {
            return bad(&s.id, "mask is not binary".into());
        }
        if m.vocab.tokenize(&s.instruction).contains(&UNK) {
            return bad(&s.id, "instruction has out-of-vocabulary words".into());
        }
        let spec = shape_spec(cloud.object_class, cloud.seed);
        let parts: Vec<u8> = match s.task {
            Task::Iras => {
                if m.vocab
                    .tokenize(&s.target_text)
                    .iter()
                    .filter(|&&t| t == AFF)
                    .count()
                    != 1
                {
                    return bad(&s.id, "target text must hold exactly one <AFF>".into());
                }
                let verb: Affordance = s.class.parse()?;
                let reserved = is_reserved(verb, s.object_class);
                if reserved != (s.split == Split::Open) {
                    return bad(
                        &s.id,
                        format!("pair {verb}/{} in split {}", s.object_class, s.split.name()),
                    );
                }
                spec.affordance_parts(verb)?.to_vec()
            }
            Task::Rops => match spec.part(&s.class) {
                Some(p) => vec![p.id],
                None => return bad(&s.id, format!("unknown part {}", s.class)),
            },
        };
        if cloud.mask_for(&parts) != s.mask {
            return bad(&s.id, "mask disagrees with part labels".into());
        }
    }
    let recount = ClassCounts::from_samples(m.counts.granularity, m.split(Split::Train));
    if recount != m.counts {
        return Err(Error::Contract(
            "recorded class counts disagree with masks".into(),
        ));
    }
    Ok(())
}
