//! Single-threshold AP / mAP evaluation.
//!
//! Detections are matched to ground truth greedily per image and class, then
//! pooled across images into one precision/recall sweep per class. AP is the
//! area under the precision envelope (all-points) or the mean of the
//! envelope sampled at recall 0, 0.1, …, 1 (eleven-point). mAP is the
//! unweighted mean over the registry's classes.
//!
//! A class without ground truth in the evaluated split scores AP 1 when it
//! also has no detections and 0 otherwise; such classes are flagged with
//! [`ClassEval::no_ground_truth`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetIndex;
use crate::geometry::{BBox, ClassId, ScoredBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("detections reference unknown image id {0:?}")]
    UnknownImage(String),
    #[error("cannot aggregate reports: {0}")]
    Mismatch(String),
    #[error("IoU threshold must be in (0, 1], got {0}")]
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    AllPoints,
    ElevenPoint,
}

impl FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-points" => Ok(Interpolation::AllPoints),
            "eleven-point" | "11-point" => Ok(Interpolation::ElevenPoint),
            _ => Err(format!("unknown interpolation {s:?} (expected all-points or eleven-point)")),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::AllPoints => "all-points",
            Interpolation::ElevenPoint => "eleven-point",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
}

impl EvalConfig {
    pub fn new(iou_threshold: f64, interpolation: Interpolation) -> Result<Self, EvalError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(EvalError::Threshold(iou_threshold));
        }
        Ok(Self {
            iou_threshold,
            interpolation,
        })
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One flag per detection, in input order.
    pub true_positive: Vec<bool>,
    /// For each ground-truth box, the index of the detection it matched.
    pub gt_matched_by: Vec<Option<usize>>,
}

/// Greedy matching for one class on one image.
///
/// Detections are visited by descending score (ties keep input order). Each
/// one claims the still-unmatched ground-truth box with the highest IoU
/// (ties go to the lowest index) if that IoU reaches `iou_threshold`;
/// otherwise it is a false positive.
pub fn match_detections(gt: &[BBox], dets: &[ScoredBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));

    let mut true_positive = vec![false; dets.len()];
    let mut gt_matched_by = vec![None; gt.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gbox) in gt.iter().enumerate() {
            if gt_matched_by[g].is_some() {
                continue;
            }
            let iou = dets[d].bbox.iou(gbox);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= iou_threshold && iou > 0.0 {
                true_positive[d] = true;
                gt_matched_by[g] = Some(d);
            }
        }
    }
    MatchResult {
        true_positive,
        gt_matched_by,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Cumulative precision/recall, one point per ranked detection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub n_gt: usize,
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// `outcomes` are `(score, is_true_positive)` pairs; equal scores keep
    /// their given order.
    pub fn from_outcomes(outcomes: &[(f64, bool)], n_gt: usize) -> Self {
        let mut ranked = outcomes.to_vec();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut tp, mut fp) = (0usize, 0usize);
        let points = ranked
            .iter()
            .map(|&(score, hit)| {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
                PrPoint {
                    score,
                    recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                    precision: tp as f64 / (tp + fp) as f64,
                    tp,
                    fp,
                }
            })
            .collect();
        Self { n_gt, points }
    }

    /// Precision envelope: at each point, the best precision at this or any
    /// later (higher-recall) point.
    fn envelope(&self) -> Vec<f64> {
        let mut env: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        env
    }
}

pub fn average_precision(curve: &PrCurve, interpolation: Interpolation) -> f64 {
    if curve.n_gt == 0 {
        return if curve.points.is_empty() { 1.0 } else { 0.0 };
    }
    let env = curve.envelope();
    match interpolation {
        Interpolation::AllPoints => {
            // summed before dividing so a perfect ranking scores exactly 1
            let mut sum = 0.0;
            let mut prev_tp = 0;
            for (p, e) in curve.points.iter().zip(&env) {
                if p.tp > prev_tp {
                    sum += e;
                    prev_tp = p.tp;
                }
            }
            sum / curve.n_gt as f64
        }
        Interpolation::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                let p = curve
                    .points
                    .iter()
                    .zip(&env)
                    .find(|(pt, _)| pt.recall >= r)
                    .map_or(0.0, |(_, &e)| e);
                sum += p;
            }
            sum / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub label: String,
    pub ap: f64,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub no_ground_truth: bool,
    #[serde(skip)]
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub classes: Vec<ClassEval>,
    pub map: f64,
}

impl EvalReport {
    pub fn ap(&self, label: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.label == label).map(|c| c.ap)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "IoU >= {} ({} AP)",
            self.config.iou_threshold, self.config.interpolation
        );
        let _ = writeln!(s, "{:<12} {:>7} {:>6} {:>6} {:>6}", "Class", "AP", "GT", "TP", "FP");
        for c in &self.classes {
            let flag = if c.no_ground_truth { "  (no ground truth)" } else { "" };
            let _ = writeln!(
                s,
                "{:<12} {:>7.3} {:>6} {:>6} {:>6}{flag}",
                c.label, c.ap, c.n_gt, c.tp, c.fp
            );
        }
        let _ = writeln!(s, "{:<12} {:>7.3}", "mAP", self.map);
        s
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Builds a report from per-class APs, e.g. published figures.
pub fn report_from_aps(config: EvalConfig, aps: &[(&str, f64)]) -> EvalReport {
    let classes: Vec<ClassEval> = aps
        .iter()
        .map(|&(label, ap)| ClassEval {
            label: label.to_string(),
            ap,
            n_gt: 0,
            tp: 0,
            fp: 0,
            no_ground_truth: false,
            curve: PrCurve::default(),
        })
        .collect();
    let map = mean(classes.iter().map(|c| c.ap));
    EvalReport { config, classes, map }
}

/// Per-class AP over every image in `gt`, with detections pooled across
/// images. Images without an entry in `detections` have no detections.
pub fn evaluate(
    gt: &DatasetIndex,
    detections: &BTreeMap<String, Vec<ScoredBox>>,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if let Some(id) = detections.keys().find(|id| gt.get(id).is_none()) {
        return Err(EvalError::UnknownImage(id.clone()));
    }
    let empty = Vec::new();
    let registry = &gt.registry;
    let classes: Vec<ClassEval> = registry
        .ids()
        .collect::<Vec<ClassId>>()
        .par_iter()
        .map(|&class| {
            let mut outcomes = Vec::new();
            let mut n_gt = 0;
            for rec in gt.images() {
                let gt_boxes: Vec<BBox> = rec
                    .annotations
                    .iter()
                    .filter(|a| a.class_id == class)
                    .map(|a| a.bbox)
                    .collect();
                let dets: Vec<ScoredBox> = detections
                    .get(&rec.image_id)
                    .unwrap_or(&empty)
                    .iter()
                    .filter(|d| d.class_id == class)
                    .copied()
                    .collect();
                n_gt += gt_boxes.len();
                let m = match_detections(&gt_boxes, &dets, config.iou_threshold);
                outcomes.extend(dets.iter().zip(&m.true_positive).map(|(d, &tp)| (d.score, tp)));
            }
            let curve = PrCurve::from_outcomes(&outcomes, n_gt);
            let tp = outcomes.iter().filter(|o| o.1).count();
            ClassEval {
                label: registry.label(class).unwrap_or_default().to_string(),
                ap: average_precision(&curve, config.interpolation),
                n_gt,
                tp,
                fp: outcomes.len() - tp,
                no_ground_truth: n_gt == 0,
                curve,
            }
        })
        .collect();
    let map = mean(classes.iter().map(|c| c.ap));
    Ok(EvalReport {
        config: *config,
        classes,
        map,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub label: String,
    pub mean_ap: f64,
}

/// Averages over `k` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub classes: Vec<ClassAggregate>,
    /// Mean of the per-run mAPs.
    pub mean_map: f64,
    pub runs: Vec<EvalReport>,
}

impl AggregateReport {
    pub fn mean_ap(&self, label: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.label == label).map(|c| c.mean_ap)
    }
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport, EvalError> {
    let first = reports
        .first()
        .ok_or_else(|| EvalError::Mismatch("no reports".into()))?;
    let labels: Vec<&str> = first.classes.iter().map(|c| c.label.as_str()).collect();
    for (i, r) in reports.iter().enumerate() {
        let other: Vec<&str> = r.classes.iter().map(|c| c.label.as_str()).collect();
        if other != labels {
            return Err(EvalError::Mismatch(format!(
                "run {i} has classes {other:?}, expected {labels:?}"
            )));
        }
    }
    let classes = labels
        .iter()
        .enumerate()
        .map(|(ci, label)| ClassAggregate {
            label: label.to_string(),
            mean_ap: mean(reports.iter().map(|r| r.classes[ci].ap)),
        })
        .collect();
    Ok(AggregateReport {
        classes,
        mean_map: mean(reports.iter().map(|r| r.map)),
        runs: reports.to_vec(),
    })
}
