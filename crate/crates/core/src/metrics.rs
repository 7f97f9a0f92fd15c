//! Depth error metrics aggregated over all valid pixels.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{depth_batch, image_batch, LabeledSample, MaskBounds, SemanticLabel, SemanticMap};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::{CompensatedSum, Tensor};

pub const DELTA_BASE: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub areas: Option<BTreeMap<SemanticLabel, MetricReport>>,
}

pub const CSV_FIELDS: [&str; 8] = ["rel", "rmse", "rmse_log", "log10", "delta1", "delta2", "delta3", "n_pixels"];

impl MetricReport {
    pub fn csv_header() -> String {
        format!("name,{}", CSV_FIELDS.join(","))
    }

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{name},{},{},{},{},{},{},{},{}",
            self.rel, self.rmse, self.rmse_log, self.log10, self.delta1, self.delta2, self.delta3, self.n_pixels
        )
    }

    /// Rows for the overall report followed by each semantic area.
    pub fn csv(&self, name: &str) -> String {
        let mut out = vec![Self::csv_header(), self.csv_row(name)];
        for (label, r) in self.areas.iter().flatten() {
            out.push(r.csv_row(&format!("{name}/{}", label.name())));
        }
        out.join("\n") + "\n"
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks the ordering and sign constraints every report satisfies.
    pub fn is_consistent(&self) -> bool {
        let d = [self.delta1, self.delta2, self.delta3];
        0.0 <= d[0]
            && d[0] <= d[1]
            && d[1] <= d[2]
            && d[2] <= 1.0
            && [self.rel, self.rmse, self.rmse_log, self.log10].iter().all(|&e| e >= 0.0)
    }
}

/// Running sums over valid pixels; merging is order-insensitive up to
/// compensated rounding.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    n: usize,
    rel: CompensatedSum,
    sq: CompensatedSum,
    sq_log: CompensatedSum,
    log10: CompensatedSum,
    within: [usize; 3],
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, gt: f64) -> Result<()> {
        for v in [pred, gt] {
            if !(v > 0.0) {
                return Err(Error::NonPositiveDepth { value: v });
            }
        }
        let diff = pred - gt;
        self.n += 1;
        self.rel.add(diff.abs() / gt);
        self.sq.add(diff * diff);
        let dl = pred.ln() - gt.ln();
        self.sq_log.add(dl * dl);
        self.log10.add((pred.log10() - gt.log10()).abs());
        let ratio = (pred / gt).max(gt / pred);
        let mut thr = 1.0;
        for w in &mut self.within {
            thr *= DELTA_BASE;
            if ratio < thr {
                *w += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.n += other.n;
        self.rel.merge(&other.rel);
        self.sq.merge(&other.sq);
        self.sq_log.merge(&other.sq_log);
        self.log10.merge(&other.log10);
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::EmptyMask);
        }
        let n = self.n as f64;
        Ok(MetricReport {
            rel: self.rel.value() / n,
            rmse: (self.sq.value() / n).sqrt(),
            rmse_log: (self.sq_log.value() / n).sqrt(),
            log10: self.log10.value() / n,
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            n_pixels: self.n,
            areas: None,
        })
    }
}

fn accumulate(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricAccumulator> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "pred {}, gt {} and mask {} lengths differ",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut acc = MetricAccumulator::default();
    for ((&p, &y), &m) in pred.iter().zip(gt).zip(mask) {
        if m {
            acc.push(p, y)?;
        }
    }
    Ok(acc)
}

/// Metrics over every pixel where `mask` is set.
pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricReport> {
    accumulate(pred, gt, mask)?.finish()
}

/// As [`compute_metrics`] on N×1×H×W tensors, the mask holding 0/1.
pub fn compute_metrics_tensors(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<MetricReport> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return Err(Error::Shape("pred, gt and mask tensors differ in shape".into()));
    }
    let m: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
    compute_metrics(pred.data(), gt.data(), &m)
}

/// Per-area reports; areas without valid pixels are left out.
pub fn semantic_breakdown(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    labels: &[SemanticLabel],
) -> Result<BTreeMap<SemanticLabel, MetricReport>> {
    if labels.len() != mask.len() {
        return Err(Error::Shape("semantic labels do not match the mask".into()));
    }
    let mut out = BTreeMap::new();
    for area in SemanticLabel::ALL {
        let sub: Vec<bool> = mask.iter().zip(labels).map(|(&m, &l)| m && l == area).collect();
        let acc = accumulate(pred, gt, &sub)?;
        if acc.n_pixels() > 0 {
            out.insert(area, acc.finish()?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One average over every valid pixel of the set.
    #[default]
    Pixel,
    /// Average of per-image reports.
    PerImage,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Eval-mode predictions, one H×W slice per sample, in dataset order.
    pub predictions: Vec<Vec<f64>>,
}

const EVAL_CHUNK: usize = 8;

/// Runs `g` in eval mode over `samples` and aggregates one report.
///
/// Pixels count when the sample mask is set and, if given, `bounds`
/// accepts the ground truth. Semantic areas are reported when every sample
/// carries labels.
pub fn evaluate_model(
    g: &Network,
    samples: &[LabeledSample],
    bounds: Option<MaskBounds>,
    aggregation: Aggregation,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let x = image_batch(chunk.iter().map(|s| &s.image))?;
        let y = g.infer(&[&x])?;
        let per = y.len() / chunk.len();
        predictions.extend(y.data().chunks(per).map(<[f64]>::to_vec));
    }
    let masks: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| {
            s.mask
                .values()
                .iter()
                .zip(s.depth.values())
                .map(|(&m, &d)| m && bounds.is_none_or(|b| b.contains(d)))
                .collect()
        })
        .collect();
    let accs: Vec<MetricAccumulator> = samples
        .par_iter()
        .zip(&predictions)
        .zip(&masks)
        .map(|((s, p), m)| accumulate(p, s.depth.values(), m))
        .collect::<Result<_>>()?;

    let mut report = match aggregation {
        Aggregation::Pixel => {
            let mut total = MetricAccumulator::default();
            for a in &accs {
                total.merge(a);
            }
            total.finish()?
        }
        Aggregation::PerImage => {
            let reports: Vec<MetricReport> = accs.iter().filter(|a| a.n_pixels() > 0).map(|a| a.finish()).collect::<Result<_>>()?;
            if reports.is_empty() {
                return Err(Error::EmptyMask);
            }
            let k = reports.len() as f64;
            let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
            MetricReport {
                rel: avg(|r| r.rel),
                rmse: avg(|r| r.rmse),
                rmse_log: avg(|r| r.rmse_log),
                log10: avg(|r| r.log10),
                delta1: avg(|r| r.delta1),
                delta2: avg(|r| r.delta2),
                delta3: avg(|r| r.delta3),
                n_pixels: accs.iter().map(MetricAccumulator::n_pixels).sum(),
                areas: None,
            }
        }
    };
    if samples.iter().all(|s| s.semantic.is_some()) {
        let pred: Vec<f64> = predictions.concat();
        let gt: Vec<f64> = samples.iter().flat_map(|s| s.depth.values().iter().copied()).collect();
        let mask: Vec<bool> = masks.concat();
        let labels: Vec<SemanticLabel> = samples
            .iter()
            .flat_map(|s| s.semantic.as_ref().map(SemanticMap::values).unwrap_or_default().iter().copied())
            .collect();
        report.areas = Some(semantic_breakdown(&pred, &gt, &mask, &labels)?);
    }
    Ok(Evaluation { report, predictions })
}

/// Masked L1 of the eval-mode generator over `samples`, used for validation curves.
pub fn masked_l1(g: &Network, samples: &[LabeledSample]) -> Result<f64> {
    let mut sum = CompensatedSum::default();
    let mut n = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let x = image_batch(chunk.iter().map(|s| &s.image))?;
        let y = g.infer(&[&x])?;
        let gt = depth_batch(chunk.iter().map(|s| &s.depth))?;
        let mask: Vec<bool> = chunk.iter().flat_map(|s| s.mask.values().iter().copied()).collect();
        for ((p, t), m) in y.data().iter().zip(gt.data()).zip(mask) {
            if m {
                sum.add((p - t).abs());
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum.value() / n as f64)
}
