//! Post-processing from raw model outputs to the final proposal set:
//! boundary-peak candidate construction, anchor matching, threshold-gated
//! refinement, multiplicative score fusion with the background veto, and
//! Gaussian Soft-NMS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::abi::AnchorGrid;
use crate::datamodel::VideoFeatures;
use crate::labels::Interval;
use crate::model::BcNet;
use crate::numeric::NumericError;
use crate::params::Forward;
use crate::training::{resolve_scales, Preprocess};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error("numeric failure: {0}")]
    Numeric(#[from] NumericError),
    #[error("anchor grid is empty")]
    EmptyGrid,
    #[error("preprocess failure: {0}")]
    Data(#[from] crate::datamodel::DataError),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// A scored candidate interval with all its component scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proposal {
    pub t_start: f64,
    pub t_end: f64,
    pub p_start: f64,
    pub p_end: f64,
    pub p_action_cls: f64,
    pub p_action_reg: f64,
    pub p_background: f64,
    /// Fused confidence (possibly decayed by Soft-NMS).
    pub score: f64,
}

impl Proposal {
    pub fn interval(&self) -> Interval {
        Interval {
            start: self.t_start,
            end: self.t_end,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InferenceConfig {
    /// Anchor action-classification threshold for refinement.
    pub alpha1: f64,
    /// Anchor action-regression threshold for refinement.
    pub alpha2: f64,
    /// Gaussian Soft-NMS decay width.
    pub sigma: f64,
    /// Proposals decayed below this score are dropped.
    pub score_floor: f64,
    /// Maximum proposals kept per video.
    pub top_k: usize,
    /// Cap on boundary-pair candidates per window (kept by p_start * p_end).
    pub max_candidates: usize,
    /// Multiply the fused score by (1 - background); disabling reduces the
    /// confidence to the plain four-factor product.
    pub background_constraint: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha1: 0.9,
            alpha2: 0.8,
            sigma: 0.5,
            score_floor: 1e-3,
            top_k: 100,
            max_candidates: 5000,
            background_constraint: true,
        }
    }
}

/// Candidate boundary pair in window-local steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub start_step: usize,
    pub end_step: usize,
    pub p_start: f64,
    pub p_end: f64,
}

fn boundary_candidates(p: &[f64], valid_len: usize) -> Vec<usize> {
    let n = p.len().min(valid_len);
    if n == 0 {
        return Vec::new();
    }
    let max = p[..n].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = Vec::new();
    for t in 0..n {
        let local_max = t > 0 && t + 1 < n && p[t] > p[t - 1] && p[t] > p[t + 1];
        if local_max || p[t] > 0.5 * max {
            out.push(t);
        }
    }
    out
}

/// Pair every selected start with every later selected end within
/// `max_duration` steps; keep at most `max_candidates` by p_start * p_end.
pub fn construct_candidates(
    p_start: &[f64],
    p_end: &[f64],
    valid_len: usize,
    max_duration: usize,
    max_candidates: usize,
) -> Vec<Candidate> {
    let starts = boundary_candidates(p_start, valid_len);
    let ends = boundary_candidates(p_end, valid_len);
    let mut out = Vec::new();
    for &s in &starts {
        for &e in &ends {
            if e > s && e - s <= max_duration {
                out.push(Candidate {
                    start_step: s,
                    end_step: e,
                    p_start: p_start[s],
                    p_end: p_end[e],
                });
            }
        }
    }
    if out.len() > max_candidates {
        out.sort_by(|a, b| {
            (b.p_start * b.p_end)
                .total_cmp(&(a.p_start * a.p_end))
                .then(a.start_step.cmp(&b.start_step))
                .then(a.end_step.cmp(&b.end_step))
        });
        out.truncate(max_candidates);
    }
    out
}

/// Index of the anchor with maximum tIoU to the candidate; ties resolve to
/// the smaller index. Total even when every anchor is disjoint.
pub fn match_anchor(candidate: &Interval, grid: &AnchorGrid, seconds_per_step: f64) -> Result<usize> {
    if grid.is_empty() {
        return Err(InferError::EmptyGrid);
    }
    let mut best = 0usize;
    let mut best_tiou = f64::NEG_INFINITY;
    for (i, anchor) in grid.anchors.iter().enumerate() {
        let tiou = candidate.tiou(&anchor.to_seconds(seconds_per_step));
        if tiou > best_tiou {
            best_tiou = tiou;
            best = i;
        }
    }
    Ok(best)
}

/// Threshold-gated refinement: when both anchor action scores clear their
/// thresholds, average the candidate and anchor endpoints; otherwise keep
/// the candidate unchanged.
pub fn refine_proposal(
    candidate: &Interval,
    anchor: &Interval,
    p_action_cls: f64,
    p_action_reg: f64,
    alpha1: f64,
    alpha2: f64,
) -> Interval {
    if p_action_cls > alpha1 && p_action_reg > alpha2 {
        Interval {
            start: (candidate.start + anchor.start) / 2.0,
            end: (candidate.end + anchor.end) / 2.0,
        }
    } else {
        *candidate
    }
}

/// Fused confidence: p_start * p_end * p_action_reg * p_action_cls * (1 - p_background).
pub fn fuse_scores(p: &Proposal) -> f64 {
    fuse_components(
        p.p_start,
        p.p_end,
        p.p_action_cls,
        p.p_action_reg,
        Some(p.p_background),
    )
}

/// The fused product; `p_background: None` drops the (1 - p_b) factor.
pub fn fuse_components(
    p_start: f64,
    p_end: f64,
    p_action_cls: f64,
    p_action_reg: f64,
    p_background: Option<f64>,
) -> f64 {
    let base = p_start * p_end * p_action_reg * p_action_cls;
    match p_background {
        Some(b) => base * (1.0 - b),
        None => base,
    }
}

fn proposal_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.t_start.total_cmp(&b.t_start))
        .then((a.t_end - a.t_start).total_cmp(&(b.t_end - b.t_start)))
}

/// Gaussian Soft-NMS: repeatedly keep the highest-scored proposal and decay
/// the rest by exp(-tIoU^2 / sigma); proposals decayed below `score_floor`
/// are dropped. Returns up to `top_k`, sorted by decayed score.
pub fn soft_nms(
    proposals: Vec<Proposal>,
    sigma: f64,
    score_floor: f64,
    top_k: usize,
) -> Vec<Proposal> {
    let mut pool = proposals;
    let mut kept: Vec<Proposal> = Vec::new();
    while !pool.is_empty() && kept.len() < top_k {
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| proposal_order(a, b))
            .map(|(i, _)| i)
            .expect("non-empty pool");
        let winner = pool.swap_remove(best);
        let w_iv = winner.interval();
        pool.retain_mut(|p| {
            let tiou = w_iv.tiou(&p.interval());
            p.score *= (-tiou * tiou / sigma).exp();
            p.score >= score_floor
        });
        kept.push(winner);
    }
    kept.sort_by(proposal_order);
    kept
}

/// Full per-video chain: preprocess into windows, forward each, construct
/// and refine window-local candidates, merge into global time (keeping the
/// higher score on exact duplicates), and Soft-NMS the pooled set.
pub fn run_inference(
    model: &BcNet,
    video: &VideoFeatures,
    pre: &Preprocess,
    cfg: &InferenceConfig,
) -> Result<Vec<Proposal>> {
    let anns = crate::datamodel::AnnotationSet::new(video.video_id.clone(), vec![]);
    let windows = pre.windows(video, &anns)?;
    let mut pooled: Vec<Proposal> = Vec::new();
    let mut grids: BTreeMap<usize, AnchorGrid> = BTreeMap::new();

    for w in &windows {
        let t = w.features.t_len;
        let grid = grids.entry(t).or_insert_with(|| {
            let scales = resolve_scales(&model.cfg, t);
            crate::abi::build_anchor_grid(t, &scales, model.cfg.n_samples)
        });
        if grid.is_empty() {
            return Err(InferError::EmptyGrid);
        }
        let fwd = Forward::new();
        let out = model.forward(&fwd, &w.features.data, t, grid)?;
        let p_start = out.p_start.values();
        let p_end = out.p_end.values();
        let p_cls = out.p_action_cls.values();
        let p_reg = out.p_action_reg.values();
        let p_bg = out.p_background_clip.values();

        let dt = w.features.seconds_per_step;
        let offset = w.start_step as f64 * dt;
        let candidates = construct_candidates(
            &p_start,
            &p_end,
            w.valid_len,
            grid.max_scale(),
            cfg.max_candidates,
        );
        for cand in candidates {
            let local = Interval {
                start: cand.start_step as f64 * dt,
                end: cand.end_step as f64 * dt,
            };
            let m = match_anchor(&local, grid, dt)?;
            let anchor_iv = grid.anchors[m].to_seconds(dt);
            let refined = refine_proposal(
                &local,
                &anchor_iv,
                p_cls[m],
                p_reg[m],
                cfg.alpha1,
                cfg.alpha2,
            );
            let mut prop = Proposal {
                t_start: refined.start + offset,
                t_end: refined.end + offset,
                p_start: cand.p_start,
                p_end: cand.p_end,
                p_action_cls: p_cls[m],
                p_action_reg: p_reg[m],
                p_background: p_bg[m],
                score: 0.0,
            };
            prop.score = fuse_components(
                prop.p_start,
                prop.p_end,
                prop.p_action_cls,
                prop.p_action_reg,
                cfg.background_constraint.then_some(prop.p_background),
            );
            pooled.push(prop);
        }
    }

    // Cross-window duplicates (identical global interval) keep the higher score.
    pooled.sort_by(|a, b| {
        a.t_start
            .total_cmp(&b.t_start)
            .then(a.t_end.total_cmp(&b.t_end))
            .then(b.score.total_cmp(&a.score))
    });
    pooled.dedup_by(|next, prev| next.t_start == prev.t_start && next.t_end == prev.t_end);

    Ok(soft_nms(pooled, cfg.sigma, cfg.score_floor, cfg.top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abi::build_anchor_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn iv(s: f64, e: f64) -> Interval {
        Interval { start: s, end: e }
    }

    fn prop(s: f64, e: f64, score: f64) -> Proposal {
        Proposal {
            t_start: s,
            t_end: e,
            p_start: 1.0,
            p_end: 1.0,
            p_action_cls: 1.0,
            p_action_reg: 1.0,
            p_background: 0.0,
            score,
        }
    }

    #[test]
    fn sharp_peaks_give_one_candidate() {
        let mut p_start = vec![0.01; 32];
        let mut p_end = vec![0.01; 32];
        p_start[10] = 0.9;
        p_end[20] = 0.9;
        let c = construct_candidates(&p_start, &p_end, 32, 32, 100);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].start_step, c[0].end_step), (10, 20));
        assert_eq!(c[0].p_start, 0.9);
    }

    #[test]
    fn monotone_sequence_selects_threshold_crossers_only() {
        let p: Vec<f64> = (0..10).map(|i| 0.05 + i as f64 * 0.1).collect();
        let picks = super::boundary_candidates(&p, 10);
        // max = 0.95; only entries > 0.475 survive, including the global max.
        let expect: Vec<usize> = (0..10).filter(|&t| p[t] > 0.475).collect();
        assert_eq!(picks, expect);
        assert!(picks.contains(&9));
    }

    #[test]
    fn ends_before_starts_yield_empty_set() {
        let mut p_start = vec![0.01; 16];
        let mut p_end = vec![0.01; 16];
        p_start[12] = 0.9;
        p_end[3] = 0.9;
        let c = construct_candidates(&p_start, &p_end, 16, 16, 100);
        assert!(c.is_empty());
    }

    #[test]
    fn candidates_respect_max_duration() {
        let mut p_start = vec![0.01; 64];
        let mut p_end = vec![0.01; 64];
        p_start[0] = 0.9;
        p_end[40] = 0.9;
        assert!(construct_candidates(&p_start, &p_end, 64, 16, 100).is_empty());
        assert_eq!(construct_candidates(&p_start, &p_end, 64, 64, 100).len(), 1);
    }

    #[test]
    fn match_anchor_prefers_higher_tiou_and_lower_index_on_ties() {
        let grid = build_anchor_grid(64, &[14, 40], 2);
        // Candidate [10, 20] vs anchors from the grid: verify argmax by hand.
        let cand = iv(10.0, 20.0);
        let m = match_anchor(&cand, &grid, 1.0).unwrap();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, a) in grid.anchors.iter().enumerate() {
            let t = cand.tiou(&a.to_seconds(1.0));
            if t > best.1 {
                best = (i, t);
            }
        }
        assert_eq!(m, best.0);

        // Exact-match anchor wins with tIoU 1.
        let exact = grid.anchors[2].to_seconds(1.0);
        let m = match_anchor(&exact, &grid, 1.0).unwrap();
        assert_eq!(grid.anchors[m].to_seconds(1.0), exact);

        // All-disjoint still returns a deterministic index.
        let far = iv(1000.0, 1001.0);
        assert_eq!(match_anchor(&far, &grid, 1.0).unwrap(), 0);
    }

    #[test]
    fn refinement_four_case_fixture() {
        let cand = iv(10.0, 20.0);
        let anchor = iv(12.0, 22.0);
        // Both above thresholds -> midpoint average.
        let r = refine_proposal(&cand, &anchor, 0.95, 0.9, 0.9, 0.8);
        assert_eq!((r.start, r.end), (11.0, 21.0));
        // Classification below alpha1 -> unchanged.
        let r = refine_proposal(&cand, &anchor, 0.5, 0.9, 0.9, 0.8);
        assert_eq!((r.start, r.end), (10.0, 20.0));
        // Regression below alpha2 -> unchanged.
        let r = refine_proposal(&cand, &anchor, 0.95, 0.5, 0.9, 0.8);
        assert_eq!((r.start, r.end), (10.0, 20.0));
        // Both below -> unchanged.
        let r = refine_proposal(&cand, &anchor, 0.5, 0.5, 0.9, 0.8);
        assert_eq!((r.start, r.end), (10.0, 20.0));
        // Candidate equal to anchor: identity regardless of scores.
        let r = refine_proposal(&cand, &cand, 0.99, 0.99, 0.9, 0.8);
        assert_eq!((r.start, r.end), (10.0, 20.0));
    }

    #[test]
    fn refinement_stays_in_convex_hull() {
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        for _ in 0..200 {
            let c = {
                let s = rng.gen_range(0.0..50.0);
                iv(s, s + rng.gen_range(0.5..20.0))
            };
            let a = {
                let s = rng.gen_range(0.0..50.0);
                iv(s, s + rng.gen_range(0.5..20.0))
            };
            let r = refine_proposal(&c, &a, 0.95, 0.95, 0.9, 0.8);
            let lo = c.start.min(a.start);
            let hi = c.end.max(a.end);
            assert!(r.start >= lo && r.end <= hi);
        }
    }

    #[test]
    fn fuse_scores_product_cases() {
        let mut p = prop(0.0, 1.0, 0.0);
        assert_eq!(fuse_scores(&p), 1.0);
        p.p_background = 1.0;
        assert_eq!(fuse_scores(&p), 0.0);
        let q = Proposal {
            t_start: 0.0,
            t_end: 1.0,
            p_start: 0.9,
            p_end: 0.8,
            p_action_reg: 0.7,
            p_action_cls: 0.6,
            p_background: 0.5,
            score: 0.0,
        };
        assert!((fuse_scores(&q) - 0.1512).abs() < 1e-12);
    }

    #[test]
    fn background_factor_never_raises_score() {
        let mut rng = ChaCha20Rng::seed_from_u64(73);
        for _ in 0..500 {
            let ps = rng.gen_range(0.001..1.0);
            let pe = rng.gen_range(0.001..1.0);
            let pc = rng.gen_range(0.001..1.0);
            let pr = rng.gen_range(0.001..1.0);
            let pb = rng.gen_range(0.001..1.0f64);
            let with = fuse_components(ps, pe, pc, pr, Some(pb));
            let without = fuse_components(ps, pe, pc, pr, None);
            assert!(with <= without);
            assert!(with < without, "pb {pb} must strictly reduce the score");
        }
        // Equality exactly when p_background is zero.
        assert_eq!(
            fuse_components(0.5, 0.5, 0.5, 0.5, Some(0.0)),
            fuse_components(0.5, 0.5, 0.5, 0.5, None)
        );
    }

    #[test]
    fn soft_nms_single_proposal_unchanged() {
        let out = soft_nms(vec![prop(0.0, 10.0, 0.7)], 0.5, 1e-3, 10);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.7);
    }

    #[test]
    fn soft_nms_gaussian_decay_on_identical_pair() {
        let out = soft_nms(
            vec![prop(0.0, 10.0, 0.9), prop(0.0, 10.0, 0.8)],
            0.5,
            1e-3,
            10,
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        let expect = 0.8 * (-2.0f64).exp();
        assert!((out[1].score - expect).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_leaves_disjoint_proposals_alone() {
        let out = soft_nms(
            vec![prop(20.0, 30.0, 0.5), prop(0.0, 10.0, 0.9)],
            0.5,
            1e-3,
            10,
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.5);
    }

    #[test]
    fn soft_nms_properties_on_random_sets() {
        let mut rng = ChaCha20Rng::seed_from_u64(79);
        for _ in 0..100 {
            let n = rng.gen_range(1..20);
            let input: Vec<Proposal> = (0..n)
                .map(|_| {
                    let s = rng.gen_range(0.0..50.0);
                    prop(s, s + rng.gen_range(0.5..20.0), rng.gen_range(0.01..1.0))
                })
                .collect();
            let before: Vec<(u64, u64, f64)> = input
                .iter()
                .map(|p| (p.t_start.to_bits(), p.t_end.to_bits(), p.score))
                .collect();
            let out = soft_nms(input, 0.5, 1e-3, 1000);
            for w in out.windows(2) {
                assert!(w[0].score >= w[1].score, "not sorted");
            }
            for p in &out {
                let key = (p.t_start.to_bits(), p.t_end.to_bits());
                let orig = before
                    .iter()
                    .find(|(s, e, _)| (*s, *e) == key)
                    .expect("interval not from input");
                assert!(p.score <= orig.2 + 1e-15, "score increased");
            }
        }
    }
}
