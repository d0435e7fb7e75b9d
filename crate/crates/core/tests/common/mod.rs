//! Shared test oracles and harnesses: sweep-line interval oracles, naive
//! metric re-implementations, and finite-difference gradient checks over
//! parameter sets and whole models. Everything here is independent of the
//! library code paths it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use bcnet_core::abi::AnchorGrid;
use bcnet_core::eval::{ScoredSegment, SegmentsByVideo};
use bcnet_core::labels::{valid_mask, Interval};
use bcnet_core::model::BcNet;
use bcnet_core::numeric::{Result as NumResult, Tensor};
use bcnet_core::params::{Forward, ParamSet};
use bcnet_core::training::{total_loss, TrainItem};

// ---- sweep-line interval oracles -----------------------------------------

fn elementary_segments(points: &mut Vec<f64>) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.total_cmp(b));
    points.dedup();
    points.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Exact tIoU by summing elementary sweep segments; structurally independent
/// of the library's min/max interval arithmetic.
pub fn sweep_tiou(p: (f64, f64), gts: &[(f64, f64)]) -> f64 {
    gts.iter()
        .map(|g| {
            let mut pts = vec![p.0, p.1, g.0, g.1];
            let mut inter = 0.0;
            let mut union = 0.0;
            for (a, b) in elementary_segments(&mut pts) {
                let mid = 0.5 * (a + b);
                let in_p = p.0 <= mid && mid < p.1;
                let in_g = g.0 <= mid && mid < g.1;
                if in_p && in_g {
                    inter += b - a;
                }
                if in_p || in_g {
                    union += b - a;
                }
            }
            if inter > 0.0 {
                inter / union
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Exact tIoA-complement background label by sweeping elementary segments.
pub fn sweep_tioa(p: (f64, f64), gts: &[(f64, f64)]) -> f64 {
    let mut pts = vec![p.0, p.1];
    for g in gts {
        pts.push(g.0);
        pts.push(g.1);
    }
    let mut covered = 0.0;
    for (a, b) in elementary_segments(&mut pts) {
        let mid = 0.5 * (a + b);
        let in_p = p.0 <= mid && mid < p.1;
        let in_any = gts.iter().any(|g| g.0 <= mid && mid < g.1);
        if in_p && in_any {
            covered += b - a;
        }
    }
    (1.0 - covered / (p.1 - p.0)).clamp(0.0, 1.0)
}

// ---- naive metric oracles --------------------------------------------------

fn tiou_pair(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Literal restatement of the recall rule: per video, walk proposals in
/// descending score (ties: earlier start, then shorter), each claiming its
/// best still-free ground truth, counting claims at or above the threshold.
pub fn naive_recall_at(
    proposals: &SegmentsByVideo,
    gts: &BTreeMap<String, Vec<Interval>>,
    an: usize,
    threshold: f64,
) -> f64 {
    let total: usize = gts.values().map(|v| v.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let mut matched = 0usize;
    for (vid, g) in gts {
        let mut props: Vec<ScoredSegment> = proposals.get(vid).cloned().unwrap_or_default();
        props.sort_by(|x, y| {
            y.score
                .total_cmp(&x.score)
                .then(x.start.total_cmp(&y.start))
                .then((x.end - x.start).total_cmp(&(y.end - y.start)))
        });
        props.truncate(an);
        let mut free: Vec<bool> = vec![true; g.len()];
        for p in &props {
            let mut best_gi = usize::MAX;
            let mut best_t = f64::NEG_INFINITY;
            for (gi, gt) in g.iter().enumerate() {
                if !free[gi] {
                    continue;
                }
                let t = tiou_pair((p.start, p.end), (gt.start, gt.end));
                if t > best_t {
                    best_t = t;
                    best_gi = gi;
                }
            }
            if best_gi != usize::MAX && best_t >= threshold {
                free[best_gi] = false;
                matched += 1;
            }
        }
    }
    matched as f64 / total as f64
}

pub fn naive_ar(
    proposals: &SegmentsByVideo,
    gts: &BTreeMap<String, Vec<Interval>>,
    an: usize,
    thresholds: &[f64],
) -> f64 {
    let mut sum = 0.0;
    for &thr in thresholds {
        sum += naive_recall_at(proposals, gts, an, thr);
    }
    sum / thresholds.len() as f64
}

pub fn naive_auc(
    proposals: &SegmentsByVideo,
    gts: &BTreeMap<String, Vec<Interval>>,
    max_an: usize,
    thresholds: &[f64],
) -> f64 {
    let mut sum = 0.0;
    for an in 1..=max_an {
        sum += naive_ar(proposals, gts, an, thresholds);
    }
    sum / max_an as f64
}

pub struct NaiveDet {
    pub video_id: String,
    pub segment: (f64, f64),
    pub score: f64,
    pub label: String,
}

pub struct NaiveGt {
    pub video_id: String,
    pub segment: (f64, f64),
    pub label: String,
}

/// Naive per-class AP: rank detections, greedily claim ground truths, then
/// integrate precision over recall with the interpolation computed by a
/// direct max-over-suffix scan at every rank.
pub fn naive_map(
    dets: &[NaiveDet],
    gts: &[NaiveGt],
    thresholds: &[f64],
) -> (Vec<f64>, f64) {
    let mut classes: Vec<&str> = gts.iter().map(|g| g.label.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_thr = Vec::new();
    for &thr in thresholds {
        let mut class_sum = 0.0;
        for class in &classes {
            let class_gts: Vec<&NaiveGt> = gts.iter().filter(|g| g.label == *class).collect();
            let mut order: Vec<&NaiveDet> =
                dets.iter().filter(|d| d.label == *class).collect();
            order.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.segment.0.total_cmp(&b.segment.0))
                    .then(
                        (a.segment.1 - a.segment.0).total_cmp(&(b.segment.1 - b.segment.0)),
                    )
                    .then(a.video_id.cmp(&b.video_id))
            });
            let mut free = vec![true; class_gts.len()];
            let mut tp_flags = Vec::new();
            for d in &order {
                let mut best_gi = usize::MAX;
                let mut best_t = f64::NEG_INFINITY;
                for (gi, g) in class_gts.iter().enumerate() {
                    if !free[gi] || g.video_id != d.video_id {
                        continue;
                    }
                    let t = tiou_pair(d.segment, g.segment);
                    if t > best_t {
                        best_t = t;
                        best_gi = gi;
                    }
                }
                if best_gi != usize::MAX && best_t >= thr {
                    free[best_gi] = false;
                    tp_flags.push(true);
                } else {
                    tp_flags.push(false);
                }
            }
            if class_gts.is_empty() {
                continue;
            }
            let n = tp_flags.len();
            let prec_at = |k: usize| -> f64 {
                let tp = tp_flags[..k].iter().filter(|&&t| t).count();
                tp as f64 / k as f64
            };
            let rec_at = |k: usize| -> f64 {
                let tp = tp_flags[..k].iter().filter(|&&t| t).count();
                tp as f64 / class_gts.len() as f64
            };
            let mut ap = 0.0;
            for k in 1..=n {
                let dr = rec_at(k) - rec_at(k - 1);
                if dr > 0.0 {
                    let interp = (k..=n).map(prec_at).fold(f64::NEG_INFINITY, f64::max);
                    ap += dr * interp;
                }
            }
            class_sum += ap;
        }
        per_thr.push(if classes.is_empty() {
            0.0
        } else {
            class_sum / classes.len() as f64
        });
    }
    let avg = per_thr.iter().sum::<f64>() / per_thr.len().max(1) as f64;
    (per_thr, avg)
}

// ---- finite-difference gradient harnesses ---------------------------------

/// Step used to re-measure directions whose first estimate sits at the
/// float-noise floor (true-zero gradients read as ~ulp(loss)/2h otherwise).
pub const FD_FALLBACK_H: f64 = 2e-3;

fn central_rel_err(mut eval: impl FnMut(f64) -> f64, analytic: f64, h: f64) -> f64 {
    let fp = eval(h);
    let fm = eval(-h);
    let fd = (fp - fm) / (2.0 * h);
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

/// Max relative error between reverse-mode and central-difference gradients
/// over every value in `set`, for a scalar loss built by `forward`. Each
/// element is probed at step `h`; elements failing there are re-probed at the
/// coarser fallback step and keep the better-conditioned estimate.
pub fn fd_check_params(
    set: &mut ParamSet,
    forward: &dyn Fn(&Forward, &ParamSet) -> NumResult<Tensor>,
    h: f64,
) -> f64 {
    let fwd = Forward::new();
    let loss = forward(&fwd, set).expect("forward");
    loss.backward().expect("backward");
    let analytic: BTreeMap<usize, Vec<f64>> = fwd.tape.param_grads().into_iter().collect();

    let ids: Vec<usize> = set.iter().map(|(i, _)| i).collect();
    let mut max_rel = 0.0f64;
    for id in ids {
        for j in 0..set.get(id).numel() {
            let orig = set.get(id).values[j];
            let a = analytic.get(&id).map(|g| g[j]).unwrap_or(0.0);
            let mut eval = |delta: f64| -> f64 {
                set.get_mut(id).values[j] = orig + delta;
                let fwd = Forward::new();
                let v = forward(&fwd, set)
                    .expect("forward")
                    .scalar_value()
                    .expect("scalar loss");
                set.get_mut(id).values[j] = orig;
                v
            };
            let mut rel = central_rel_err(&mut eval, a, h);
            if rel > 1e-4 {
                rel = rel.min(central_rel_err(&mut eval, a, FD_FALLBACK_H));
            }
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

/// Loss value and per-parameter gradients of the training objective on one
/// item, with a pinned regression mask.
pub fn model_loss_grads(
    model: &BcNet,
    item: &TrainItem,
    grid: &AnchorGrid,
    reg_mask: &[f64],
) -> (f64, BTreeMap<usize, Vec<f64>>) {
    let fwd = Forward::new();
    let out = model
        .forward(&fwd, &item.features, item.t_len, grid)
        .expect("forward");
    let mask = valid_mask(item.t_len, item.valid_len);
    let losses = total_loss(&out, &item.labels, &mask, reg_mask).expect("loss");
    let value = losses.total.scalar_value().expect("scalar");
    losses.total.backward().expect("backward");
    (value, fwd.tape.param_grads().into_iter().collect())
}

pub fn model_loss_value(
    model: &BcNet,
    item: &TrainItem,
    grid: &AnchorGrid,
    reg_mask: &[f64],
) -> f64 {
    let fwd = Forward::new();
    let out = model
        .forward(&fwd, &item.features, item.t_len, grid)
        .expect("forward");
    let mask = valid_mask(item.t_len, item.valid_len);
    let losses = total_loss(&out, &item.labels, &mask, reg_mask).expect("loss");
    losses.total.scalar_value().expect("scalar")
}

/// Central-difference check of the full training objective over every model
/// parameter, with the same per-element fallback step as [`fd_check_params`].
/// Returns the max relative error.
pub fn fd_check_model(
    model: &mut BcNet,
    item: &TrainItem,
    grid: &AnchorGrid,
    reg_mask: &[f64],
    h: f64,
) -> f64 {
    let (_, analytic) = model_loss_grads(model, item, grid, reg_mask);
    let ids: Vec<usize> = model.set.iter().map(|(i, _)| i).collect();
    let mut max_rel = 0.0f64;
    for id in ids {
        for j in 0..model.set.get(id).numel() {
            let orig = model.set.get(id).values[j];
            let a = analytic.get(&id).map(|g| g[j]).unwrap_or(0.0);
            let mut eval = |delta: f64| -> f64 {
                model.set.get_mut(id).values[j] = orig + delta;
                let v = model_loss_value(model, item, grid, reg_mask);
                model.set.get_mut(id).values[j] = orig;
                v
            };
            let mut rel = central_rel_err(&mut eval, a, h);
            if rel > 1e-4 {
                rel = rel.min(central_rel_err(&mut eval, a, FD_FALLBACK_H));
            }
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
