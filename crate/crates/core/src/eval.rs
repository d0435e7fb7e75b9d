//! Proposal-quality and detection metrics: average recall at proposal
//! budgets, area under the AR-AN curve, and mean average precision at tIoU
//! thresholds.
//!
//! Matching is one-to-one and greedy by descending score; score ties break
//! by earlier start time, then shorter duration, so every metric is
//! deterministic and order-independent within equal scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labels::Interval;

/// A scored proposal segment for recall metrics.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSegment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl ScoredSegment {
    fn interval(&self) -> Interval {
        Interval {
            start: self.start,
            end: self.end,
        }
    }
}

/// A class-labeled detection for mAP.
#[derive(Debug, Clone)]
pub struct Detection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub label: String,
}

/// A class-labeled ground-truth instance for mAP.
#[derive(Debug, Clone)]
pub struct LabeledGt {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub label: String,
}

pub type SegmentsByVideo = BTreeMap<String, Vec<ScoredSegment>>;
pub type GtsByVideo = BTreeMap<String, Vec<Interval>>;

/// tIoU thresholds [0.5 : 0.05 : 1.0] (11 values).
pub fn thumos_thresholds() -> Vec<f64> {
    (0..=10).map(|i| (10 + i) as f64 / 20.0).collect()
}

/// tIoU thresholds [0.5 : 0.05 : 0.95] (10 values).
pub fn anet_thresholds() -> Vec<f64> {
    (0..=9).map(|i| (10 + i) as f64 / 20.0).collect()
}

fn by_score_desc(a: &ScoredSegment, b: &ScoredSegment) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then((a.end - a.start).total_cmp(&(b.end - b.start)))
}

/// Greedy one-to-one matching of score-sorted proposals to ground truths;
/// returns how many ground truths were matched at the threshold.
fn greedy_matches(proposals: &[ScoredSegment], gts: &[Interval], threshold: f64) -> usize {
    let mut taken = vec![false; gts.len()];
    let mut matched = 0usize;
    for p in proposals {
        let p_iv = p.interval();
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let tiou = p_iv.tiou(gt);
            let better = match best {
                None => true,
                Some((_, b)) => tiou > b,
            };
            if better {
                best = Some((gi, tiou));
            }
        }
        if let Some((gi, tiou)) = best {
            if tiou >= threshold {
                taken[gi] = true;
                matched += 1;
            }
        }
    }
    matched
}

fn top_an(proposals: &[ScoredSegment], an: usize) -> Vec<ScoredSegment> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(by_score_desc);
    sorted.truncate(an);
    sorted
}

/// Average recall with the top-AN proposals per video: the matched fraction
/// of all ground-truth instances, averaged over the tIoU thresholds. Videos
/// with ground truth but no proposals contribute zero matches.
pub fn average_recall_at_an(
    proposals: &SegmentsByVideo,
    gts: &GtsByVideo,
    an: usize,
    thresholds: &[f64],
) -> f64 {
    let total_gts: usize = gts.values().map(|g| g.len()).sum();
    if total_gts == 0 || thresholds.is_empty() {
        return 0.0;
    }
    static EMPTY: Vec<ScoredSegment> = Vec::new();
    let truncated: Vec<(&Vec<ScoredSegment>, &Vec<Interval>)> = gts
        .iter()
        .map(|(vid, g)| (proposals.get(vid).unwrap_or(&EMPTY), g))
        .collect();
    let mut sum = 0.0;
    for &thr in thresholds {
        let mut matched = 0usize;
        for (props, g) in &truncated {
            let top = top_an(props, an);
            matched += greedy_matches(&top, g, thr);
        }
        sum += matched as f64 / total_gts as f64;
    }
    sum / thresholds.len() as f64
}

/// AR at every AN in 1..=max_an plus the curve mean (the AUC, already in
/// [0, 1] on the uniform AN grid).
pub fn auc_ar_curve(
    proposals: &SegmentsByVideo,
    gts: &GtsByVideo,
    max_an: usize,
    thresholds: &[f64],
) -> (Vec<f64>, f64) {
    let curve: Vec<f64> = (1..=max_an)
        .map(|an| average_recall_at_an(proposals, gts, an, thresholds))
        .collect();
    let auc = if curve.is_empty() {
        0.0
    } else {
        curve.iter().sum::<f64>() / curve.len() as f64
    };
    (curve, auc)
}

fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then((a.end - a.start).total_cmp(&(b.end - b.start)))
        .then(a.video_id.cmp(&b.video_id))
}

/// Interpolated average precision for one class at one threshold.
fn average_precision(dets: &[&Detection], gts: &[&LabeledGt], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&Detection> = dets.to_vec();
    order.sort_by(|a, b| detection_order(a, b));
    let mut taken = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for det in &order {
        let d_iv = Interval {
            start: det.start,
            end: det.end,
        };
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || gt.video_id != det.video_id {
                continue;
            }
            let tiou = d_iv.tiou(&Interval {
                start: gt.start,
                end: gt.end,
            });
            let better = match best {
                None => true,
                Some((_, b)) => tiou > b,
            };
            if better {
                best = Some((gi, tiou));
            }
        }
        match best {
            Some((gi, tiou)) if tiou >= threshold => {
                taken[gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }

    // Cumulative precision/recall, then integrate the precision envelope.
    let n_gt = gts.len() as f64;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0.0;
    let mut fp = 0.0;
    for &is_tp in &tp_flags {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        precisions.push(tp / (tp + fp));
        recalls.push(tp / n_gt);
    }
    // Envelope: precision at recall r is the max precision at recall >= r.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        ap += (recalls[i] - prev_recall) * precisions[i];
        prev_recall = recalls[i];
    }
    ap
}

/// mAP per threshold (mean of per-class APs over classes present in the
/// ground truth) and the mean over thresholds.
pub fn mean_average_precision(
    detections: &[Detection],
    gts: &[LabeledGt],
    thresholds: &[f64],
) -> (Vec<(f64, f64)>, f64) {
    let mut classes: Vec<&str> = gts.iter().map(|g| g.label.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut sum = 0.0;
        for class in &classes {
            let class_dets: Vec<&Detection> =
                detections.iter().filter(|d| d.label == *class).collect();
            let class_gts: Vec<&LabeledGt> = gts.iter().filter(|g| g.label == *class).collect();
            sum += average_precision(&class_dets, &class_gts, thr);
        }
        let map = if classes.is_empty() {
            0.0
        } else {
            sum / classes.len() as f64
        };
        per_threshold.push((thr, map));
    }
    let avg = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, v)| v).sum::<f64>() / per_threshold.len() as f64
    };
    (per_threshold, avg)
}

/// Aggregated metric report; threshold keys are formatted with two decimals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ar_at_an: BTreeMap<usize, f64>,
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_at_tiou: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_map: Option<f64>,
}

pub fn build_report(
    proposals: &SegmentsByVideo,
    gts: &GtsByVideo,
    an_list: &[usize],
    max_an: usize,
    thresholds: &[f64],
    detection_map: Option<(&[Detection], &[LabeledGt])>,
) -> (EvalReport, Vec<f64>) {
    let mut ar_at_an = BTreeMap::new();
    for &an in an_list {
        ar_at_an.insert(an, average_recall_at_an(proposals, gts, an, thresholds));
    }
    let (curve, auc) = auc_ar_curve(proposals, gts, max_an, thresholds);
    let (map_at_tiou, average_map) = match detection_map {
        Some((dets, labeled)) => {
            let (per_thr, avg) = mean_average_precision(dets, labeled, thresholds);
            let map: BTreeMap<String, f64> = per_thr
                .into_iter()
                .map(|(thr, v)| (format!("{thr:.2}"), v))
                .collect();
            (Some(map), Some(avg))
        }
        None => (None, None),
    };
    (
        EvalReport {
            ar_at_an,
            auc,
            map_at_tiou,
            average_map,
        },
        curve,
    )
}
