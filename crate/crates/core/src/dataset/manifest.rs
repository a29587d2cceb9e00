use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassCounts, DatasetConfig, Manifest, Sample, Split, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::{read_cloud, write_cloud, ObjectClass, View};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub task: Task,
    pub config: DatasetConfig,
    pub seeds: BTreeMap<String, u64>,
    pub vocab: Vocabulary,
    pub vocab_hash: String,
    pub counts: ClassCounts,
    pub n_samples: usize,
    pub n_clouds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub task: Task,
    pub instruction: String,
    pub target_text: String,
    pub cloud_path: String,
    pub mask_path: String,
    pub class: String,
    pub object: ObjectClass,
    pub view: View,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(Box<Header>),
    Sample(Record),
}

pub fn manifest_file_name(task: Task) -> String {
    format!("{}.jsonl", task.name())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn header(&self) -> Header {
        Header {
            format_version: FORMAT_VERSION,
            task: self.task,
            config: self.config.clone(),
            seeds: BTreeMap::from([("master".to_string(), self.config.seed)]),
            vocab: self.vocab.clone(),
            vocab_hash: self.vocab.fingerprint(),
            counts: self.counts.clone(),
            n_samples: self.samples.len(),
            n_clouds: self.clouds.len(),
        }
    }

    /// Writes clouds, masks and `<task>.jsonl` under `dir`. The manifest file
    /// is written last and renamed into place, so a present manifest always
    /// refers to complete sample files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        mkdir(&dir.join("clouds"))?;
        mkdir(&dir.join("masks"))?;
        for (name, cloud) in &self.clouds {
            write_cloud(&dir.join(name), cloud)?;
        }
        let mut out = Vec::new();
        let mut line = |l: &Line| -> Result<()> {
            serde_json::to_writer(&mut out, l)?;
            out.push(b'\n');
            Ok(())
        };
        line(&Line::Header(Box::new(self.header())))?;
        for s in &self.samples {
            let mask_path = format!("masks/{}.mask", s.id);
            let p = dir.join(&mask_path);
            std::fs::write(&p, &s.mask).map_err(|e| Error::io(&p, e))?;
            line(&Line::Sample(Record {
                id: s.id.clone(),
                task: s.task,
                instruction: s.instruction.clone(),
                target_text: s.target_text.clone(),
                cloud_path: s.cloud_ref.clone(),
                mask_path,
                class: s.class.clone(),
                object: s.object_class,
                view: s.view,
                split: s.split,
            }))?;
        }
        write_atomic(&dir.join(manifest_file_name(self.task)), &out)
    }

    /// Loads `<dir>/<task>.jsonl` with its clouds and masks.
    pub fn read(dir: &Path, task: Task) -> Result<Manifest> {
        Self::read_file(&dir.join(manifest_file_name(task)))
    }

    pub fn read_file(path: &Path) -> Result<Manifest> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut header = None;
        let mut samples = Vec::new();
        let mut clouds = BTreeMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
            match parsed {
                Line::Header(h) if header.is_none() && i == 0 => header = Some(*h),
                Line::Header(_) => return Err(bad(format!("line {}: unexpected header", i + 1))),
                Line::Sample(r) => {
                    if header.is_none() {
                        return Err(bad("first line must be the header".into()));
                    }
                    if !clouds.contains_key(&r.cloud_path) {
                        let cloud = read_cloud(&dir.join(&r.cloud_path))?;
                        clouds.insert(r.cloud_path.clone(), cloud);
                    }
                    let mp = dir.join(&r.mask_path);
                    let mask = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
                    samples.push(Sample {
                        id: r.id,
                        task: r.task,
                        instruction: r.instruction,
                        target_text: r.target_text,
                        cloud_ref: r.cloud_path,
                        mask,
                        class: r.class,
                        object_class: r.object,
                        view: r.view,
                        split: r.split,
                    });
                }
            }
        }
        let h = header.ok_or_else(|| bad("empty manifest".into()))?;
        if h.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                h.format_version
            )));
        }
        if h.vocab.fingerprint() != h.vocab_hash {
            return Err(bad("vocabulary hash does not match its token list".into()));
        }
        if h.n_samples != samples.len() {
            return Err(bad(format!(
                "header lists {} samples, found {}",
                h.n_samples,
                samples.len()
            )));
        }
        Ok(Manifest {
            task: h.task,
            config: h.config,
            vocab: h.vocab,
            counts: h.counts,
            clouds,
            samples,
        })
    }
}
