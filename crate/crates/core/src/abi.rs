//! Action-Background Interaction: frame-level action/background feature
//! generation and scoring, plus clip-level anchor construction, interaction,
//! and scoring.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self_attention_unit, AttentionParams, DiffAttentionParams,
};
use crate::labels::Interval;
use crate::numeric::{NumericError, Result, Tensor};
use crate::params::{Forward, Linear, Mlp, ParamSet};

/// A pre-set clip interval in step units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub start_step: usize,
    pub end_step: usize,
    pub scale_id: usize,
}

impl Anchor {
    pub fn to_seconds(&self, seconds_per_step: f64) -> Interval {
        Interval {
            start: self.start_step as f64 * seconds_per_step,
            end: self.end_step as f64 * seconds_per_step,
        }
    }
}

/// Multi-scale sliding-window anchors with per-anchor feature-sampling weight
/// matrices. `weights` stacks all anchors' N x T sampling rows into one
/// (L * N) x T row-major matrix so feature pooling is a single matmul.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub anchors: Vec<Anchor>,
    pub scales: Vec<usize>,
    pub n_samples: usize,
    pub t_len: usize,
    pub weights: Vec<f64>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(0)
    }

    /// Weight rows of anchor `i` as an N x T slice.
    pub fn anchor_weights(&self, i: usize) -> &[f64] {
        let n = self.n_samples * self.t_len;
        &self.weights[i * n..(i + 1) * n]
    }
}

/// Default anchor scale pyramid: {T/16, T/8, T/4, T/2, T}, rounded,
/// deduplicated, minimum 2 steps.
pub fn default_scales(t_len: usize) -> Vec<usize> {
    let mut scales: Vec<usize> = [16usize, 8, 4, 2, 1]
        .iter()
        .map(|d| ((t_len as f64 / *d as f64).round() as usize).max(2))
        .collect();
    scales.dedup();
    scales.retain(|&s| s <= t_len);
    scales
}

/// Build the multi-scale anchor grid: per scale s, windows
/// [k*s/2, k*s/2 + s] at 50% overlap; per anchor, N uniform sample positions
/// over the (inclusive) step span with linear-interpolation weights onto
/// integer steps. Sample positions falling outside [0, T-1] keep only their
/// in-range interpolation mass, so boundary rows can sum below 1.
pub fn build_anchor_grid(t_len: usize, scales: &[usize], n_samples: usize) -> AnchorGrid {
    assert!(n_samples >= 1, "need at least one sample point");
    let mut anchors = Vec::new();
    let mut used_scales = Vec::new();
    for (scale_id, &scale) in scales.iter().enumerate() {
        if scale == 0 || scale > t_len {
            log::warn!("skipping anchor scale {scale} for sequence length {t_len}");
            continue;
        }
        used_scales.push(scale);
        let stride = (scale / 2).max(1);
        let mut start = 0usize;
        loop {
            let end = start + scale;
            if end > t_len {
                break;
            }
            anchors.push(Anchor {
                start_step: start,
                end_step: end,
                scale_id,
            });
            if end == t_len {
                break;
            }
            start += stride;
        }
    }

    let mut weights = vec![0.0; anchors.len() * n_samples * t_len];
    for (i, anchor) in anchors.iter().enumerate() {
        let span = (anchor.end_step - anchor.start_step) as f64;
        for j in 0..n_samples {
            let pos = if n_samples == 1 {
                anchor.start_step as f64 + span / 2.0
            } else {
                anchor.start_step as f64 + span * j as f64 / (n_samples - 1) as f64
            };
            let row = (i * n_samples + j) * t_len;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo_idx = lo as isize;
            if (0..t_len as isize).contains(&lo_idx) {
                weights[row + lo_idx as usize] += 1.0 - frac;
            }
            let hi_idx = lo_idx + 1;
            if frac > 0.0 && (0..t_len as isize).contains(&hi_idx) {
                weights[row + hi_idx as usize] += frac;
            }
        }
    }

    AnchorGrid {
        anchors,
        scales: used_scales,
        n_samples,
        t_len,
        weights,
    }
}

/// Pool per-anchor features: for each anchor its N x T weight matrix times
/// the T x C feature matrix, flattened row-major to length N * C. Output is
/// L x S with S = N * C, computed as one stacked matmul.
pub fn sample_anchor_features(fwd: &Forward, feat: &Tensor, grid: &AnchorGrid) -> Result<Tensor> {
    let shape = feat.shape();
    if shape.len() != 2 || shape[0] != grid.t_len {
        return Err(NumericError::InvalidArgument {
            op: "sample_anchor_features",
            msg: format!("features {shape:?} do not match grid T = {}", grid.t_len),
        });
    }
    let c = shape[1];
    let l = grid.len();
    let n = grid.n_samples;
    let w = fwd.input(grid.weights.clone(), vec![l * n, grid.t_len])?;
    w.matmul(feat)?.reshape(vec![l, n * c])
}

/// Frame-level ABI parameters and heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbiParams {
    pub frame_self: AttentionParams,
    pub proj_action: Linear,
    pub proj_background: Linear,
    pub frame_diff: DiffAttentionParams,
    pub head_action_frame: Mlp,
    pub head_background_frame: Mlp,
    pub clip_proj_action: Linear,
    pub clip_proj_background: Linear,
    pub clip_self_action: AttentionParams,
    pub clip_self_background: AttentionParams,
    pub clip_diff: DiffAttentionParams,
    pub head_action_cls: Mlp,
    pub head_action_reg: Mlp,
    pub head_background_clip: Mlp,
}

impl AbiParams {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        dim: usize,
        sample_dim: usize,
        ffn_hidden: usize,
    ) -> AbiParams {
        let head_hidden = (dim / 2).max(1);
        AbiParams {
            frame_self: AttentionParams::new(set, rng, "abi.frame_self", dim, ffn_hidden),
            proj_action: Linear::new(set, rng, "abi.proj_action", dim, dim, true),
            proj_background: Linear::new(set, rng, "abi.proj_background", dim, dim, true),
            frame_diff: DiffAttentionParams::new(set, rng, "abi.frame_diff", dim, ffn_hidden),
            head_action_frame: Mlp::new(set, rng, "abi.head_action_frame", dim, head_hidden, 1),
            head_background_frame: Mlp::new(
                set,
                rng,
                "abi.head_background_frame",
                dim,
                head_hidden,
                1,
            ),
            clip_proj_action: Linear::new(set, rng, "abi.clip_proj_action", sample_dim, dim, true),
            clip_proj_background: Linear::new(
                set,
                rng,
                "abi.clip_proj_background",
                sample_dim,
                dim,
                true,
            ),
            clip_self_action: AttentionParams::new(set, rng, "abi.clip_self_action", dim, ffn_hidden),
            clip_self_background: AttentionParams::new(
                set,
                rng,
                "abi.clip_self_background",
                dim,
                ffn_hidden,
            ),
            clip_diff: DiffAttentionParams::new(set, rng, "abi.clip_diff", dim, ffn_hidden),
            head_action_cls: Mlp::new(set, rng, "abi.head_action_cls", dim, head_hidden, 1),
            head_action_reg: Mlp::new(set, rng, "abi.head_action_reg", dim, head_hidden, 1),
            head_background_clip: Mlp::new(
                set,
                rng,
                "abi.head_background_clip",
                dim,
                head_hidden,
                1,
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        self.frame_self.param_count()
            + self.proj_action.param_count()
            + self.proj_background.param_count()
            + self.frame_diff.param_count()
            + self.head_action_frame.param_count()
            + self.head_background_frame.param_count()
            + self.clip_proj_action.param_count()
            + self.clip_proj_background.param_count()
            + self.clip_self_action.param_count()
            + self.clip_self_background.param_count()
            + self.clip_diff.param_count()
            + self.head_action_cls.param_count()
            + self.head_action_reg.param_count()
            + self.head_background_clip.param_count()
    }
}

/// Frame-level interaction outputs: reweighted action/background features
/// plus frame-level probability sequences.
pub struct FrameInteraction {
    pub feat_action: Tensor,
    pub feat_background: Tensor,
    pub p_action_frame: Tensor,
    pub p_background_frame: Tensor,
}

/// Self-attention over the reduced features, parallel action/background
/// projections, difference-attention between the two streams, and sigmoid
/// MLP heads per stream.
pub fn frame_level_interaction(
    fwd: &Forward,
    set: &ParamSet,
    f_reduced: &Tensor,
    p: &AbiParams,
) -> Result<FrameInteraction> {
    let run = || -> Result<FrameInteraction> {
        let f = self_attention_unit(fwd, set, f_reduced, &p.frame_self)?;
        let fa = p.proj_action.forward(fwd, set, &f)?;
        let fb = p.proj_background.forward(fwd, set, &f)?;
        let (fa2, fb2, _) =
            crate::attention::difference_attention_unit(fwd, set, &fa, &fb, &p.frame_diff)?;
        let t = fa2.shape()[0];
        let pa = p
            .head_action_frame
            .forward(fwd, set, &fa2)?
            .sigmoid()?
            .reshape(vec![t])?;
        let pb = p
            .head_background_frame
            .forward(fwd, set, &fb2)?
            .sigmoid()?
            .reshape(vec![t])?;
        Ok(FrameInteraction {
            feat_action: fa2,
            feat_background: fb2,
            p_action_frame: pa,
            p_background_frame: pb,
        })
    };
    run().map_err(|e| e.in_layer("frame_level_interaction"))
}

/// Clip-level scores over the anchor sequence.
pub struct ClipScores {
    pub p_action_cls: Tensor,
    pub p_action_reg: Tensor,
    pub p_background: Tensor,
}

/// Clip-level interaction: project pooled anchors back to model width, run
/// two independent self-attention units, difference-attention across the
/// streams, and three sigmoid MLP heads (action classification and
/// regression from the action stream, background from the background one).
pub fn clip_level_interaction(
    fwd: &Forward,
    set: &ParamSet,
    anchors_action: &Tensor,
    anchors_background: &Tensor,
    p: &AbiParams,
) -> Result<ClipScores> {
    let run = || -> Result<ClipScores> {
        let a = p.clip_proj_action.forward(fwd, set, anchors_action)?;
        let b = p
            .clip_proj_background
            .forward(fwd, set, anchors_background)?;
        let a = self_attention_unit(fwd, set, &a, &p.clip_self_action)?;
        let b = self_attention_unit(fwd, set, &b, &p.clip_self_background)?;
        let (ar, br, _) =
            crate::attention::difference_attention_unit(fwd, set, &a, &b, &p.clip_diff)?;
        let l = ar.shape()[0];
        let cls = p
            .head_action_cls
            .forward(fwd, set, &ar)?
            .sigmoid()?
            .reshape(vec![l])?;
        let reg = p
            .head_action_reg
            .forward(fwd, set, &ar)?
            .sigmoid()?
            .reshape(vec![l])?;
        let bg = p
            .head_background_clip
            .forward(fwd, set, &br)?
            .sigmoid()?
            .reshape(vec![l])?;
        Ok(ClipScores {
            p_action_cls: cls,
            p_action_reg: reg,
            p_background: bg,
        })
    };
    run().map_err(|e| e.in_layer("clip_level_interaction"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn full_length_scale_yields_single_anchor() {
        let grid = build_anchor_grid(100, &[100], 4);
        assert_eq!(grid.anchors.len(), 1);
        assert_eq!(grid.anchors[0].start_step, 0);
        assert_eq!(grid.anchors[0].end_step, 100);
    }

    #[test]
    fn oversized_scales_are_skipped() {
        let grid = build_anchor_grid(10, &[4, 100], 2);
        assert!(grid.anchors.iter().all(|a| a.end_step <= 10));
        assert_eq!(grid.scales, vec![4]);
    }

    #[test]
    fn fifty_percent_overlap_layout() {
        let grid = build_anchor_grid(32, &[16], 2);
        let spans: Vec<(usize, usize)> = grid
            .anchors
            .iter()
            .map(|a| (a.start_step, a.end_step))
            .collect();
        assert_eq!(spans, vec![(0, 16), (8, 24), (16, 32)]);
    }

    #[test]
    fn two_sample_weights_are_one_hot_at_endpoints() {
        // Anchor [0, 4] with N = 2: positions 0 and 4.
        let grid = build_anchor_grid(8, &[4], 2);
        let w = grid.anchor_weights(0);
        let t = grid.t_len;
        assert_eq!(w[0], 1.0);
        assert!(w[1..t].iter().all(|&v| v == 0.0));
        assert_eq!(w[t + 4], 1.0);
        let row1: f64 = w[t..2 * t].iter().sum();
        assert_eq!(row1, 1.0);
    }

    #[test]
    fn interior_weight_rows_sum_to_one() {
        let grid = build_anchor_grid(64, &[8, 16, 32], 7);
        for (i, anchor) in grid.anchors.iter().enumerate() {
            if anchor.end_step >= grid.t_len {
                continue;
            }
            let w = grid.anchor_weights(i);
            for j in 0..grid.n_samples {
                let s: f64 = w[j * grid.t_len..(j + 1) * grid.t_len].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "anchor {i} row {j} sums to {s}");
            }
        }
    }

    #[test]
    fn grid_layout_is_deterministic() {
        let a = build_anchor_grid(48, &[6, 12, 24, 48], 5);
        let b = build_anchor_grid(48, &[6, 12, 24, 48], 5);
        assert_eq!(a.anchors, b.anchors);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn sampling_constant_feature_repeats_it() {
        let grid = build_anchor_grid(16, &[8], 3);
        let fwd = Forward::new();
        let c = 2;
        let vals: Vec<f64> = (0..16).flat_map(|_| [1.5, -0.5]).collect();
        let feat = fwd.input(vals, vec![16, c]).unwrap();
        let pooled = sample_anchor_features(&fwd, &feat, &grid).unwrap();
        assert_eq!(pooled.shape(), vec![grid.len(), grid.n_samples * c]);
        let pv = pooled.values();
        for (i, anchor) in grid.anchors.iter().enumerate() {
            if anchor.end_step >= grid.t_len {
                continue;
            }
            for j in 0..grid.n_samples {
                let base = i * grid.n_samples * c + j * c;
                assert!((pv[base] - 1.5).abs() < 1e-12);
                assert!((pv[base + 1] + 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_exact_on_linear_signals() {
        let t = 20;
        let grid = build_anchor_grid(t, &[8], 5);
        let fwd = Forward::new();
        let vals: Vec<f64> = (0..t).map(|i| 3.0 * i as f64 - 1.0).collect();
        let feat = fwd.input(vals, vec![t, 1]).unwrap();
        let pooled = sample_anchor_features(&fwd, &feat, &grid).unwrap().values();
        for (i, anchor) in grid.anchors.iter().enumerate() {
            if anchor.end_step >= t {
                continue;
            }
            let span = (anchor.end_step - anchor.start_step) as f64;
            for j in 0..grid.n_samples {
                let pos = anchor.start_step as f64
                    + span * j as f64 / (grid.n_samples - 1) as f64;
                let expect = 3.0 * pos - 1.0;
                let got = pooled[i * grid.n_samples + j];
                assert!((got - expect).abs() < 1e-12, "anchor {i} sample {j}");
            }
        }
    }

    fn tiny_abi(c: usize, n: usize) -> (ParamSet, AbiParams) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let p = AbiParams::new(&mut set, &mut rng, c, c * n, 2 * c);
        (set, p)
    }

    #[test]
    fn frame_interaction_scores_in_open_unit_interval() {
        let (set, p) = tiny_abi(6, 4);
        let fwd = Forward::new();
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let t = 10;
        let vals: Vec<f64> = (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = fwd.input(vals, vec![t, 6]).unwrap();
        let out = frame_level_interaction(&fwd, &set, &x, &p).unwrap();
        assert_eq!(out.p_action_frame.shape(), vec![t]);
        assert_eq!(out.p_background_frame.shape(), vec![t]);
        for v in out
            .p_action_frame
            .values()
            .iter()
            .chain(out.p_background_frame.values().iter())
        {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn clip_interaction_produces_three_score_vectors() {
        let c = 6;
        let n = 4;
        let (set, p) = tiny_abi(c, n);
        let grid = build_anchor_grid(16, &[8, 16], n);
        let fwd = Forward::new();
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let vals: Vec<f64> = (0..16 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feat = fwd.input(vals.clone(), vec![16, c]).unwrap();
        let fa = sample_anchor_features(&fwd, &feat, &grid).unwrap();
        let fb = sample_anchor_features(&fwd, &feat, &grid).unwrap();
        let scores = clip_level_interaction(&fwd, &set, &fa, &fb, &p).unwrap();
        let l = grid.len();
        for s in [&scores.p_action_cls, &scores.p_action_reg, &scores.p_background] {
            assert_eq!(s.shape(), vec![l]);
            for v in s.values() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn frame_interaction_is_deterministic() {
        let (set, p) = tiny_abi(4, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(57);
        let vals: Vec<f64> = (0..8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let fwd = Forward::new();
            let x = fwd.input(vals.clone(), vec![8, 4]).unwrap();
            frame_level_interaction(&fwd, &set, &x, &p)
                .unwrap()
                .p_action_frame
                .values()
        };
        assert_eq!(run(), run());
    }
}
