//! Segmentation metrics over prediction records: confusion counts, per-sample
//! rates, class-level and instance-level aggregates, mAP at IoU 0.5 and the
//! affordance region ratio.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::View;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub pred: Vec<u8>,
    pub confidence: f64,
    pub gt: Vec<u8>,
    pub class: String,
    pub view: View,
}

impl PredictionRecord {
    pub fn check(&self) -> Result<()> {
        if self.pred.len() != self.gt.len() {
            return Err(Error::Contract(format!(
                "record {}: prediction has {} points, ground truth {}",
                self.id,
                self.pred.len(),
                self.gt.len()
            )));
        }
        if !self.confidence.is_finite() {
            return Err(Error::Contract(format!(
                "record {}: confidence is not finite",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }

    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 => 1.0,
            d => self.tp as f64 / d as f64,
        }
    }
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Contract("masks must be binary".into())),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub iou: f64,
    pub acc: f64,
    pub prec: f64,
    pub rec: f64,
}

pub fn sample_metrics(rec: &PredictionRecord) -> Result<SampleMetrics> {
    rec.check()?;
    let c = confusion(&rec.pred, &rec.gt)?;
    Ok(SampleMetrics {
        iou: c.iou(),
        acc: c.accuracy(),
        prec: c.precision(),
        rec: c.recall(),
    })
}

/// How class IoU and accuracy are formed from a class's records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassAccumulation {
    /// Sum confusion counts over the class's records, then take rates.
    #[default]
    Micro,
    /// Mean of the per-record rates.
    PerSample,
}

/// Ranking-based mAP at IoU 0.5.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    /// Area under the all-point interpolated PR curve, recall over all records.
    #[default]
    Interpolated,
    /// Mean precision at each hit rank (recall over hits, no interpolation).
    HitMean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub class_accumulation: ClassAccumulation,
    pub map_mode: MapMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub iou: f64,
    pub acc: f64,
    pub records: usize,
    pub mean_arr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregates {
    pub table: BTreeMap<String, ClassRow>,
    pub miou: f64,
    pub acc: f64,
    pub macc: f64,
}

fn nonempty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("no prediction records".into()));
    }
    records.iter().try_for_each(|r| r.check())
}

pub fn class_aggregates(
    records: &[PredictionRecord],
    mode: ClassAccumulation,
) -> Result<ClassAggregates> {
    nonempty(records)?;
    let mut groups: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.class).or_default().push(r);
    }
    let mut all = Confusion::default();
    let mut table = BTreeMap::new();
    for (class, recs) in groups {
        let mut counts = Confusion::default();
        let (mut iou_sum, mut acc_sum, mut arr_sum) = (0.0, 0.0, 0.0);
        for r in &recs {
            let c = confusion(&r.pred, &r.gt)?;
            counts += c;
            iou_sum += c.iou();
            acc_sum += c.accuracy();
            arr_sum += arr(&r.gt);
        }
        all += counts;
        let k = recs.len() as f64;
        let (iou, acc) = match mode {
            ClassAccumulation::Micro => (counts.iou(), counts.accuracy()),
            ClassAccumulation::PerSample => (iou_sum / k, acc_sum / k),
        };
        table.insert(
            class.to_string(),
            ClassRow {
                iou,
                acc,
                records: recs.len(),
                mean_arr: arr_sum / k,
            },
        );
    }
    let k = table.len() as f64;
    Ok(ClassAggregates {
        miou: table.values().map(|r| r.iou).sum::<f64>() / k,
        macc: table.values().map(|r| r.acc).sum::<f64>() / k,
        acc: all.accuracy(),
        table,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAggregates {
    pub miou: f64,
    pub macc: f64,
    pub mprec: f64,
    pub mrec: f64,
}

pub fn instance_aggregates(records: &[PredictionRecord]) -> Result<InstanceAggregates> {
    nonempty(records)?;
    let mut s = [0.0; 4];
    for r in records {
        let m = sample_metrics(r)?;
        s[0] += m.iou;
        s[1] += m.acc;
        s[2] += m.prec;
        s[3] += m.rec;
    }
    let k = records.len() as f64;
    Ok(InstanceAggregates {
        miou: s[0] / k,
        macc: s[1] / k,
        mprec: s[2] / k,
        mrec: s[3] / k,
    })
}

/// Average precision from hit flags already sorted by descending confidence.
pub fn average_precision(hits: &[bool], mode: MapMode) -> f64 {
    let n_hits = hits.iter().filter(|&&h| h).count();
    if n_hits == 0 {
        return 0.0;
    }
    let mut tp = 0;
    let mut curve = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp, tp as f64 / (i + 1) as f64, h));
    }
    match mode {
        MapMode::HitMean => curve.iter().filter(|c| c.2).map(|c| c.1).sum::<f64>() / n_hits as f64,
        MapMode::Interpolated => {
            // Recall steps down by 1/total each time a hit is passed. Summing
            // the integer-weighted precisions and dividing once keeps the
            // result at most 1 under rounding.
            let mut best = 0.0f64;
            let mut ap = 0.0;
            let mut prev_tp = tp;
            for &(tp_i, prec, _) in curve.iter().rev() {
                if tp_i < prev_tp {
                    ap += (prev_tp - tp_i) as f64 * best;
                    prev_tp = tp_i;
                }
                best = best.max(prec);
            }
            (ap + prev_tp as f64 * best) / hits.len() as f64
        }
    }
}

pub fn map50(records: &[PredictionRecord], mode: MapMode) -> Result<f64> {
    nonempty(records)?;
    let mut ranked: Vec<(&PredictionRecord, bool)> = records
        .iter()
        .map(|r| Ok((r, sample_metrics(r)?.iou >= 0.5)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.0.confidence
            .total_cmp(&a.0.confidence)
            .then_with(|| a.0.id.cmp(&b.0.id))
    });
    let hits: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    Ok(average_precision(&hits, mode))
}

/// Fraction of points in the affordance region; 0 for an empty mask.
pub fn arr(gt: &[u8]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    gt.iter().filter(|&&v| v == 1).count() as f64 / gt.len() as f64
}

pub const ARR_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: usize,
    pub options: MetricOptions,
    pub classes: BTreeMap<String, ClassRow>,
    pub miou_c: f64,
    pub acc_c: f64,
    pub macc_c: f64,
    pub miou_i: f64,
    pub macc_i: f64,
    pub mprec_i: f64,
    pub mrec_i: f64,
    pub map50_i: f64,
    /// Counts of ground-truth Arr values in ten equal-width bins over [0, 1].
    pub arr_histogram: [u64; ARR_BINS],
    pub sample_iou: BTreeMap<String, f64>,
    /// Share of records whose response contained the affordance token, if known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aff_rate: Option<f64>,
}

pub fn evaluate(records: &[PredictionRecord], options: MetricOptions) -> Result<EvaluationReport> {
    let c = class_aggregates(records, options.class_accumulation)?;
    let i = instance_aggregates(records)?;
    let mut hist = [0u64; ARR_BINS];
    for r in records {
        let b = ((arr(&r.gt) * ARR_BINS as f64) as usize).min(ARR_BINS - 1);
        hist[b] += 1;
    }
    Ok(EvaluationReport {
        records: records.len(),
        options,
        classes: c.table,
        miou_c: c.miou,
        acc_c: c.acc,
        macc_c: c.macc,
        miou_i: i.miou,
        macc_i: i.macc,
        mprec_i: i.mprec,
        mrec_i: i.mrec,
        map50_i: map50(records, options.map_mode)?,
        arr_histogram: hist,
        sample_iou: records
            .iter()
            .map(|r| Ok((r.id.clone(), sample_metrics(r)?.iou)))
            .collect::<Result<_>>()?,
        aff_rate: None,
    })
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "class", "records", "IoU", "Acc", "Arr"
        )?;
        for (k, r) in &self.classes {
            writeln!(
                f,
                "{k:<12} {:>8} {:>8.4} {:>8.4} {:>8.4}",
                r.records, r.iou, r.acc, r.mean_arr
            )?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "class     mIoU {:.4}  Acc {:.4}  mAcc {:.4}",
            self.miou_c, self.acc_c, self.macc_c
        )?;
        writeln!(
            f,
            "instance  mIoU {:.4}  mAcc {:.4}  mPrec {:.4}  mRec {:.4}  mAP50 {:.4}",
            self.miou_i, self.macc_i, self.mprec_i, self.mrec_i, self.map50_i
        )?;
        if let Some(a) = self.aff_rate {
            writeln!(f, "<AFF> emitted in {:.1}% of responses", 100.0 * a)?;
        }
        write!(f, "records {}", self.records)
    }
}
