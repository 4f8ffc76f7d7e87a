//! Detection metrics at a fixed IoU threshold: greedy matching, precision,
//! recall, 101-point interpolated AP per class, and mAP.
//!
//! A detection is a true positive when its best-IoU unmatched ground truth
//! of the same class overlaps it with IoU strictly above the threshold.
//! Detections are visited by descending score; equal scores keep input order.

use std::fmt::Write as _;

use thiserror::Error;

use crate::bbox::BBox;
use crate::dataset::{LabelRecord, MaturityClass};
use crate::detect::Detection;

pub const EVAL_IOU: f64 = 0.5;
const AP_POINTS: usize = 101;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no class has ground truth; mAP is undefined")]
    NoDefinedAp,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Ground-truth box in the same pixel frame as the detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

impl GtBox {
    pub fn from_label(label: &LabelRecord, img_w: usize, img_h: usize) -> Self {
        let (w, h) = (img_w as f64, img_h as f64);
        GtBox {
            class_id: label.class.id(),
            bbox: BBox::from_cxcywh(label.cx as f64 * w, label.cy as f64 * h, label.w as f64 * w, label.h as f64 * h)
                .clip(w, h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    /// TP flag per detection, in input order.
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

impl MatchOutcome {
    pub fn true_positives(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp.len() - self.true_positives()
    }
}

/// Indices of `dets` by descending score, ties by index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy one-image matching of detections against ground truth.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> MatchOutcome {
    let mut matched = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let db = d.bbox();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.class_id != d.class_id {
                continue;
            }
            let v = db.iou(&g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v > iou_thresh {
                matched[j] = true;
                tp[i] = true;
            }
        }
    }
    MatchOutcome {
        tp,
        false_negatives: matched.iter().filter(|&&m| !m).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// False when TP + FP = 0 and precision was reported as 0.
    pub precision_defined: bool,
    /// False when TP + FN = 0 and recall was reported as 0.
    pub recall_defined: bool,
}

pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, false) } else { (num as f64 / den as f64, true) };
    let (precision, precision_defined) = ratio(tp, tp + fp);
    let (recall, recall_defined) = ratio(tp, tp + fn_);
    PrecisionRecall {
        precision,
        recall,
        precision_defined,
        recall_defined,
    }
}

/// Precision/recall after each detection of a descending-confidence sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub class_id: usize,
    pub num_gt: usize,
    /// `(recall, precision)` pairs.
    pub points: Vec<(f64, f64)>,
}

impl PrCurve {
    /// `scored` holds `(score, is_tp)` for every detection of the class across
    /// the dataset, in input order.
    pub fn from_sweep(class_id: usize, scored: &[(f32, bool)], num_gt: usize) -> Self {
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
        let (mut tp, mut fp) = (0usize, 0usize);
        let points = order
            .into_iter()
            .map(|i| {
                if scored[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
                (recall, tp as f64 / (tp + fp) as f64)
            })
            .collect();
        PrCurve {
            class_id,
            num_gt,
            points,
        }
    }
}

/// Area under the monotone precision envelope sampled at 101 recall levels.
/// `None` when the class has no ground truth.
pub fn average_precision(curve: &PrCurve) -> Option<f64> {
    if curve.num_gt == 0 {
        return None;
    }
    let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for t in 0..AP_POINTS {
        let r = t as f64 / (AP_POINTS - 1) as f64;
        while idx < curve.points.len() && curve.points[idx].0 < r {
            idx += 1;
        }
        if idx < curve.points.len() {
            sum += envelope[idx];
        }
    }
    Some(sum / AP_POINTS as f64)
}

/// Arithmetic mean of the defined per-class APs.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NoDefinedAp);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    /// Counts at the operating threshold.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap: Option<f64>,
    pub curve: PrCurve,
}

impl ClassReport {
    pub fn name(&self) -> String {
        class_name(self.class_id)
    }
}

pub fn class_name(class_id: usize) -> String {
    MaturityClass::from_id(class_id)
        .map(|c| c.name().to_string())
        .unwrap_or_else(|| format!("class{class_id}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: Option<f64>,
    pub iou_thresh: f64,
    pub conf_thresh: f32,
}

/// Accumulates per-image matches into a dataset-level report.
#[derive(Debug, Clone)]
pub struct Evaluator {
    nc: usize,
    iou_thresh: f64,
    conf_thresh: f32,
    scored: Vec<Vec<(f32, bool)>>,
    num_gt: Vec<usize>,
    images: usize,
}

impl Evaluator {
    pub fn new(nc: usize, iou_thresh: f64, conf_thresh: f32) -> Self {
        Evaluator {
            nc,
            iou_thresh,
            conf_thresh,
            scored: vec![Vec::new(); nc],
            num_gt: vec![0; nc],
            images: 0,
        }
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// Detections or ground truth with a class id outside `0..nc` are ignored.
    pub fn add_image(&mut self, dets: &[Detection], gts: &[GtBox]) {
        self.images += 1;
        let dets: Vec<Detection> = dets.iter().filter(|d| d.class_id < self.nc).copied().collect();
        let gts: Vec<GtBox> = gts.iter().filter(|g| g.class_id < self.nc).copied().collect();
        for g in &gts {
            self.num_gt[g.class_id] += 1;
        }
        let outcome = match_detections(&dets, &gts, self.iou_thresh);
        for (d, &tp) in dets.iter().zip(&outcome.tp) {
            self.scored[d.class_id].push((d.score, tp));
        }
    }

    pub fn finish(&self) -> EvalReport {
        let classes: Vec<ClassReport> = (0..self.nc)
            .map(|c| {
                let curve = PrCurve::from_sweep(c, &self.scored[c], self.num_gt[c]);
                let above = self.scored[c].iter().filter(|(s, _)| *s >= self.conf_thresh);
                let (tp, fp) = above.fold((0, 0), |(tp, fp), &(_, t)| if t { (tp + 1, fp) } else { (tp, fp + 1) });
                let fn_ = self.num_gt[c] - tp;
                let pr = precision_recall(tp, fp, fn_);
                let ap = average_precision(&curve);
                if ap.is_none() {
                    log::warn!("class {} has no ground truth; AP undefined and excluded from mAP", class_name(c));
                }
                ClassReport {
                    class_id: c,
                    num_gt: self.num_gt[c],
                    tp,
                    fp,
                    fn_,
                    precision: pr.precision,
                    recall: pr.recall,
                    ap,
                    curve,
                }
            })
            .collect();
        let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>()).ok();
        EvalReport {
            classes,
            map,
            iou_thresh: self.iou_thresh,
            conf_thresh: self.conf_thresh,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn totals(&self) -> (usize, PrecisionRecall) {
        let n: usize = self.classes.iter().map(|c| c.num_gt).sum();
        let tp = self.classes.iter().map(|c| c.tp).sum();
        let fp = self.classes.iter().map(|c| c.fp).sum();
        let fn_ = self.classes.iter().map(|c| c.fn_).sum();
        (n, precision_recall(tp, fp, fn_))
    }

    /// Aligned table: Maturity, Number, Precision, Recall, AP, plus an `all`
    /// row carrying mAP. `color` adds ANSI bold to the header.
    pub fn to_text(&self, color: bool) -> String {
        let (bold, reset) = if color { ("\x1b[1m", "\x1b[0m") } else { ("", "") };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{bold}{:<14} {:>8} {:>10} {:>10} {:>10}{reset}",
            "Maturity", "Number", "Precision", "Recall", "AP"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<14} {:>8} {:>10.4} {:>10.4} {:>10}",
                c.name(),
                c.num_gt,
                c.precision,
                c.recall,
                fmt_opt(c.ap)
            );
        }
        let (n, pr) = self.totals();
        let _ = writeln!(
            s,
            "{:<14} {:>8} {:>10.4} {:>10.4} {:>10}",
            "all", n, pr.precision, pr.recall, fmt_opt(self.map)
        );
        let _ = writeln!(
            s,
            "mAP@{}: {}  (precision/recall at conf >= {})",
            self.iou_thresh,
            fmt_opt(self.map),
            self.conf_thresh
        );
        s
    }

    /// `class,count,precision,recall,ap` rows followed by an `mAP` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,count,precision,recall,ap\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{}", c.name(), c.num_gt, c.precision, c.recall, opt(c.ap));
        }
        let (n, pr) = self.totals();
        let _ = writeln!(s, "mAP,{},{:.6},{:.6},{}", n, pr.precision, pr.recall, opt(self.map));
        s
    }
}
