//! Boundary Prediction: a stack of self-attention + cross-attention layers
//! where each layer re-consumes the original feature sequence and gates its
//! own output by the normalized originality score, ending in a two-channel
//! sigmoid head for start/end probabilities.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention_unit, self_attention_unit, AttentionParams};
use crate::numeric::{Result, Tensor};
use crate::params::{Forward, Mlp, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BpLayer {
    pub self_current: AttentionParams,
    pub self_original: AttentionParams,
    pub cross: AttentionParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BpParams {
    pub layers: Vec<BpLayer>,
    pub head: Mlp,
}

impl BpParams {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        dim: usize,
        n_layers: usize,
        ffn_hidden: usize,
    ) -> BpParams {
        let layers = (0..n_layers)
            .map(|i| BpLayer {
                self_current: AttentionParams::new(
                    set,
                    rng,
                    &format!("bp.layer{i}.self_current"),
                    dim,
                    ffn_hidden,
                ),
                self_original: AttentionParams::new(
                    set,
                    rng,
                    &format!("bp.layer{i}.self_original"),
                    dim,
                    ffn_hidden,
                ),
                cross: AttentionParams::new(set, rng, &format!("bp.layer{i}.cross"), dim, ffn_hidden),
            })
            .collect();
        let head = Mlp::new(set, rng, "bp.head", dim, (dim / 2).max(1), 2);
        BpParams { layers, head }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.self_current.param_count()
                    + l.self_original.param_count()
                    + l.cross.param_count()
            })
            .sum::<usize>()
            + self.head.param_count()
    }
}

/// One layer: self-attend the running and original features, score the
/// running features' originality against the original ones, and keep the
/// globally aggregated features in proportion to that score:
/// F_next = F_cur_g * gate + F_cur, gate = s / max(s) broadcast per row.
/// With `keep_ratio` set, the gate is instead a hard top-k mask over s.
pub fn bp_layer(
    fwd: &Forward,
    set: &ParamSet,
    f_current: &Tensor,
    f_original: &Tensor,
    layer: &BpLayer,
    keep_ratio: Option<f64>,
) -> Result<Tensor> {
    let run = || -> Result<Tensor> {
        let f_cur_g = self_attention_unit(fwd, set, f_current, &layer.self_current)?;
        let f_org_g = self_attention_unit(fwd, set, f_original, &layer.self_original)?;
        let (_, originality) = cross_attention_unit(fwd, set, &f_cur_g, &f_org_g, &layer.cross)?;
        let gate = match keep_ratio {
            None => originality.max_normalize()?,
            Some(ratio) => {
                // Hard top-k over the originality score; the mask is constant
                // with respect to the tape, so gradient flows only through
                // the gated features.
                let s = originality.values();
                let t = s.len();
                let keep = ((ratio * t as f64).ceil() as usize).clamp(1, t);
                let mut order: Vec<usize> = (0..t).collect();
                order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                let mut mask = vec![0.0; t];
                for &idx in order.iter().take(keep) {
                    mask[idx] = 1.0;
                }
                fwd.input(mask, vec![t])?
            }
        };
        f_cur_g.scale_rows(&gate)?.add(f_current)
    };
    run().map_err(|e| e.in_layer("bp_layer"))
}

/// Iterate the layer stack from the reduced original features, re-injecting
/// those originals at every layer, then map the final features to per-step
/// start/end probabilities.
pub fn bp_forward(
    fwd: &Forward,
    set: &ParamSet,
    f_reduced: &Tensor,
    params: &BpParams,
    keep_ratio: Option<f64>,
) -> Result<(Tensor, Tensor)> {
    let run = || -> Result<(Tensor, Tensor)> {
        let mut f = f_reduced.clone();
        for layer in &params.layers {
            f = bp_layer(fwd, set, &f, f_reduced, layer, keep_ratio)?;
        }
        let z = params.head.forward(fwd, set, &f)?;
        let p_start = z.select_col(0)?.sigmoid()?;
        let p_end = z.select_col(1)?.sigmoid()?;
        Ok((p_start, p_end))
    };
    run().map_err(|e| e.in_layer("bp_forward"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(dim: usize, layers: usize) -> (ParamSet, BpParams) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let p = BpParams::new(&mut set, &mut rng, dim, layers, 2 * dim);
        (set, p)
    }

    fn random_input(t: usize, c: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layer_preserves_shape() {
        let (set, p) = setup(5, 1);
        let fwd = Forward::new();
        let x = fwd.input(random_input(7, 5, 1), vec![7, 5]).unwrap();
        let y = bp_layer(&fwd, &set, &x, &x, &p.layers[0], None).unwrap();
        assert_eq!(y.shape(), vec![7, 5]);
    }

    #[test]
    fn constant_originality_gates_to_identity_scaling() {
        // Zeroing the cross unit's Q projection makes every attention row
        // uniform, so the originality score is constant 1/T and the
        // max-normalized gate is exactly 1 everywhere: F_next = F_cur_g + F_cur.
        let (mut set, p) = setup(4, 1);
        set.get_mut(p.layers[0].cross.w_q)
            .values
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let fwd = Forward::new();
        let x_vals = random_input(6, 4, 2);
        let x = fwd.input(x_vals, vec![6, 4]).unwrap();
        let y = bp_layer(&fwd, &set, &x, &x, &p.layers[0], None).unwrap();

        let f_cur_g = self_attention_unit(&fwd, &set, &x, &p.layers[0].self_current).unwrap();
        let expect = f_cur_g.add(&x).unwrap();
        for (a, e) in y.values().iter().zip(expect.values()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_emits_two_probability_sequences() {
        let (set, p) = setup(4, 2);
        let fwd = Forward::new();
        let t = 9;
        let x = fwd.input(random_input(t, 4, 3), vec![t, 4]).unwrap();
        let (ps, pe) = bp_forward(&fwd, &set, &x, &p, None).unwrap();
        assert_eq!(ps.shape(), vec![t]);
        assert_eq!(pe.shape(), vec![t]);
        for v in ps.values().iter().chain(pe.values().iter()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn forward_is_finite_on_wide_range_inputs() {
        let (set, p) = setup(4, 2);
        let fwd = Forward::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..8 * 4).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let x = fwd.input(vals, vec![8, 4]).unwrap();
        // Construction already rejects non-finite values; reaching Ok is the check.
        bp_forward(&fwd, &set, &x, &p, None).unwrap();
    }

    #[test]
    fn hard_topk_gate_keeps_requested_fraction() {
        let (set, p) = setup(4, 1);
        let fwd = Forward::new();
        let x = fwd.input(random_input(8, 4, 7), vec![8, 4]).unwrap();
        // keep_ratio 0.25 of 8 steps -> mask has exactly 2 live rows; output
        // rows elsewhere must equal the residual input rows.
        let y = bp_layer(&fwd, &set, &x, &x, &p.layers[0], Some(0.25)).unwrap();
        let xv = x.values();
        let yv = y.values();
        let untouched = (0..8)
            .filter(|&i| (0..4).all(|j| (yv[i * 4 + j] - xv[i * 4 + j]).abs() < 1e-15))
            .count();
        assert_eq!(untouched, 6);
    }

    #[test]
    fn zeroed_attention_degenerates_to_per_step_transform() {
        // With all attention-unit weights zero, each self-attention unit is
        // LN(LN(x)) per row and the gate is constant, so bp_forward acts as a
        // per-step function: equal input rows give equal outputs.
        let (mut set, p) = setup(4, 1);
        let layer = &p.layers[0];
        for unit in [&layer.self_current, &layer.self_original, &layer.cross] {
            for id in [unit.w_q, unit.w_k, unit.w_v, unit.w_o] {
                set.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
            }
            for lin in [&unit.ffn.l1, &unit.ffn.l2] {
                set.get_mut(lin.w).values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let fwd = Forward::new();
        let row = [0.3, -0.7, 1.1, 0.2];
        let vals: Vec<f64> = row.iter().copied().cycle().take(5 * 4).collect();
        let x = fwd.input(vals, vec![5, 4]).unwrap();
        let (ps, pe) = bp_forward(&fwd, &set, &x, &p, None).unwrap();
        let psv = ps.values();
        let pev = pe.values();
        for i in 1..5 {
            assert!((psv[i] - psv[0]).abs() < 1e-12);
            assert!((pev[i] - pev[0]).abs() < 1e-12);
        }
    }
}
