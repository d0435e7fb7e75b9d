//! The three attention units: self-attention, cross-attention (with a
//! per-position originality score taken from the attention-map diagonal), and
//! the two-sided difference-attention, plus their shared FFN/LayerNorm
//! sublayer structure.
//!
//! All units are single-head and position-encoding-free; temporal order
//! enters the model only through anchors and boundary indices.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{Result, Tensor};
use crate::params::{Forward, Init, Linear, ParamId, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnParams {
    fn new(set: &mut ParamSet, rng: &mut ChaCha20Rng, name: &str, dim: usize) -> LnParams {
        LnParams {
            gamma: set.alloc(&format!("{name}.gamma"), vec![dim], Init::Ones, rng),
            beta: set.alloc(&format!("{name}.beta"), vec![dim], Init::Zeros, rng),
        }
    }

    pub fn apply(&self, fwd: &Forward, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&fwd.param(set, self.gamma)?, &fwd.param(set, self.beta)?)
    }
}

/// Position-wise feed-forward network: C -> hidden -> C with ReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    fn new(set: &mut ParamSet, rng: &mut ChaCha20Rng, name: &str, dim: usize, hidden: usize) -> Ffn {
        Ffn {
            l1: Linear::new(set, rng, &format!("{name}.l1"), dim, hidden, true),
            l2: Linear::new(set, rng, &format!("{name}.l2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, fwd: &Forward, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward(fwd, set, x)?.relu()?;
        self.l2.forward(fwd, set, &h)
    }

    fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }
}

/// Parameters of one self- or cross-attention unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// Output projection applied to the attention-weighted values.
    pub w_o: ParamId,
    pub ffn: Ffn,
    pub ln1: LnParams,
    pub ln2: LnParams,
}

impl AttentionParams {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        dim: usize,
        ffn_hidden: usize,
    ) -> AttentionParams {
        let square = |set: &mut ParamSet, rng: &mut ChaCha20Rng, suffix: &str| {
            set.alloc(
                &format!("{name}.{suffix}"),
                vec![dim, dim],
                Init::Xavier {
                    fan_in: dim,
                    fan_out: dim,
                },
                rng,
            )
        };
        AttentionParams {
            dim,
            w_q: square(set, rng, "w_q"),
            w_k: square(set, rng, "w_k"),
            w_v: square(set, rng, "w_v"),
            w_o: square(set, rng, "w_o"),
            ffn: Ffn::new(set, rng, &format!("{name}.ffn"), dim, ffn_hidden),
            ln1: LnParams::new(set, rng, &format!("{name}.ln1"), dim),
            ln2: LnParams::new(set, rng, &format!("{name}.ln2"), dim),
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.dim * self.dim + self.ffn.param_count() + 4 * self.dim
    }
}

fn attention_map(
    fwd: &Forward,
    set: &ParamSet,
    q_src: &Tensor,
    k_src: &Tensor,
    p: &AttentionParams,
) -> Result<Tensor> {
    let q = q_src.matmul(&fwd.param(set, p.w_q)?)?;
    let k = k_src.matmul(&fwd.param(set, p.w_k)?)?;
    let scale = 1.0 / (p.dim as f64).sqrt();
    q.matmul(&k.transpose()?)?.softmax_rows(scale)
}

fn residual_ffn_block(
    fwd: &Forward,
    set: &ParamSet,
    attended: &Tensor,
    residual: &Tensor,
    p: &AttentionParams,
) -> Result<Tensor> {
    let projected = attended.matmul(&fwd.param(set, p.w_o)?)?;
    let mid = p.ln1.apply(fwd, set, &projected.add(residual)?)?;
    let ff = p.ffn.forward(fwd, set, &mid)?;
    p.ln2.apply(fwd, set, &mid.add(&ff)?)
}

/// Self-attention unit: softmax(QK^T / sqrt(C)) aggregation with residual
/// LayerNorm and FFN sublayers.
pub fn self_attention_unit(
    fwd: &Forward,
    set: &ParamSet,
    x: &Tensor,
    p: &AttentionParams,
) -> Result<Tensor> {
    let run = || -> Result<Tensor> {
        let a = attention_map(fwd, set, x, x, p)?;
        let v = x.matmul(&fwd.param(set, p.w_v)?)?;
        residual_ffn_block(fwd, set, &a.matmul(&v)?, x, p)
    };
    run().map_err(|e| e.in_layer("self_attention_unit"))
}

/// Cross-attention unit between equal-length sequences `a` (queries) and `b`
/// (keys/values). Returns the transformed sequence and the originality score:
/// the diagonal of the attention map, i.e. each position's similarity to its
/// own counterpart in `b`.
pub fn cross_attention_unit(
    fwd: &Forward,
    set: &ParamSet,
    a: &Tensor,
    b: &Tensor,
    p: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let run = || -> Result<(Tensor, Tensor)> {
        let map = attention_map(fwd, set, a, b, p)?;
        let originality = map.diag()?;
        let v = b.matmul(&fwd.param(set, p.w_v)?)?;
        let out = residual_ffn_block(fwd, set, &map.matmul(&v)?, a, p)?;
        Ok((out, originality))
    };
    run().map_err(|e| e.in_layer("cross_attention_unit"))
}

/// Parameters of the two-sided difference-attention unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffAttentionParams {
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_va: ParamId,
    pub w_vb: ParamId,
    pub w_oa: ParamId,
    pub w_ob: ParamId,
    pub ffn_a: Ffn,
    pub ffn_b: Ffn,
    pub ln_a1: LnParams,
    pub ln_a2: LnParams,
    pub ln_b1: LnParams,
    pub ln_b2: LnParams,
}

impl DiffAttentionParams {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        dim: usize,
        ffn_hidden: usize,
    ) -> DiffAttentionParams {
        let square = |set: &mut ParamSet, rng: &mut ChaCha20Rng, suffix: &str| {
            set.alloc(
                &format!("{name}.{suffix}"),
                vec![dim, dim],
                Init::Xavier {
                    fan_in: dim,
                    fan_out: dim,
                },
                rng,
            )
        };
        DiffAttentionParams {
            dim,
            w_q: square(set, rng, "w_q"),
            w_k: square(set, rng, "w_k"),
            w_va: square(set, rng, "w_va"),
            w_vb: square(set, rng, "w_vb"),
            w_oa: square(set, rng, "w_oa"),
            w_ob: square(set, rng, "w_ob"),
            ffn_a: Ffn::new(set, rng, &format!("{name}.ffn_a"), dim, ffn_hidden),
            ffn_b: Ffn::new(set, rng, &format!("{name}.ffn_b"), dim, ffn_hidden),
            ln_a1: LnParams::new(set, rng, &format!("{name}.ln_a1"), dim),
            ln_a2: LnParams::new(set, rng, &format!("{name}.ln_a2"), dim),
            ln_b1: LnParams::new(set, rng, &format!("{name}.ln_b1"), dim),
            ln_b2: LnParams::new(set, rng, &format!("{name}.ln_b2"), dim),
        }
    }

    pub fn param_count(&self) -> usize {
        6 * self.dim * self.dim
            + self.ffn_a.param_count()
            + self.ffn_b.param_count()
            + 8 * self.dim
    }
}

/// Difference-attention between an m-row and an n-row sequence. The row-wise
/// softmax of Q_a K_b^T / sqrt(C) is the difference map; it reweights V_b for
/// the a-side output, and its transpose reweights V_a for the b-side output.
pub fn difference_attention_unit(
    fwd: &Forward,
    set: &ParamSet,
    fa: &Tensor,
    fb: &Tensor,
    p: &DiffAttentionParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let run = || -> Result<(Tensor, Tensor, Tensor)> {
        let q = fa.matmul(&fwd.param(set, p.w_q)?)?;
        let k = fb.matmul(&fwd.param(set, p.w_k)?)?;
        let scale = 1.0 / (p.dim as f64).sqrt();
        let diff_map = q.matmul(&k.transpose()?)?.softmax_rows(scale)?;

        let va = fa.matmul(&fwd.param(set, p.w_va)?)?;
        let vb = fb.matmul(&fwd.param(set, p.w_vb)?)?;

        let agg_a = diff_map.matmul(&vb)?.matmul(&fwd.param(set, p.w_oa)?)?;
        let mid_a = p.ln_a1.apply(fwd, set, &agg_a.add(fa)?)?;
        let out_a = p
            .ln_a2
            .apply(fwd, set, &mid_a.add(&p.ffn_a.forward(fwd, set, &mid_a)?)?)?;

        let agg_b = diff_map
            .transpose()?
            .matmul(&va)?
            .matmul(&fwd.param(set, p.w_ob)?)?;
        let mid_b = p.ln_b1.apply(fwd, set, &agg_b.add(fb)?)?;
        let out_b = p
            .ln_b2
            .apply(fwd, set, &mid_b.add(&p.ffn_b.forward(fwd, set, &mid_b)?)?)?;

        Ok((out_a, out_b, diff_map))
    };
    run().map_err(|e| e.in_layer("difference_attention_unit"))
}
