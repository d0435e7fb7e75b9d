//! The full network: per-step dimension reduction feeding the boundary
//! prediction stack and the frame/clip action-background interaction.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::abi::{
    clip_level_interaction, frame_level_interaction, sample_anchor_features, AbiParams,
    AnchorGrid,
};
use crate::bp::{bp_forward, BpParams};
use crate::numeric::{NumericError, Result, Tensor};
use crate::params::{Forward, Linear, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Input feature width.
    pub c_in: usize,
    /// Model width after per-step dimension reduction.
    pub c_model: usize,
    /// FFN hidden width inside every attention unit.
    pub ffn_hidden: usize,
    pub bp_layers: usize,
    /// Sample points per anchor.
    pub n_samples: usize,
    /// Anchor scales in steps; resolved from the sequence length when empty.
    pub scales: Vec<usize>,
    /// Hard top-k originality gating; None means soft max-normalized gating.
    #[serde(default)]
    pub keep_ratio: Option<f64>,
}

impl ModelConfig {
    pub fn desk_default(c_in: usize) -> ModelConfig {
        ModelConfig {
            c_in,
            c_model: 32,
            ffn_hidden: 128,
            bp_layers: 12,
            n_samples: 32,
            scales: Vec::new(),
            keep_ratio: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| NumericError::InvalidArgument {
            op: "model config",
            msg,
        };
        if self.c_in == 0 || self.c_model < 2 {
            return Err(bad(format!(
                "c_in {} and c_model {} must be >= 1 and >= 2",
                self.c_in, self.c_model
            )));
        }
        if self.ffn_hidden == 0 || self.n_samples == 0 || self.bp_layers == 0 {
            return Err(bad("ffn_hidden, n_samples, bp_layers must be >= 1".into()));
        }
        if let Some(r) = self.keep_ratio {
            if !(0.0 < r && r <= 1.0) {
                return Err(bad(format!("keep_ratio {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BcNet {
    pub set: ParamSet,
    pub cfg: ModelConfig,
    pub reduce: Linear,
    pub abi: AbiParams,
    pub bp: BpParams,
}

/// Raw per-window model outputs, all strictly inside (0, 1).
pub struct ModelOutputs {
    pub p_start: Tensor,
    pub p_end: Tensor,
    pub p_action_frame: Tensor,
    pub p_background_frame: Tensor,
    pub p_action_cls: Tensor,
    pub p_action_reg: Tensor,
    pub p_background_clip: Tensor,
}

impl BcNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<BcNet> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let reduce = Linear::new(&mut set, &mut rng, "reduce", cfg.c_in, cfg.c_model, true);
        let sample_dim = cfg.c_model * cfg.n_samples;
        let abi = AbiParams::new(&mut set, &mut rng, cfg.c_model, sample_dim, cfg.ffn_hidden);
        let bp = BpParams::new(&mut set, &mut rng, cfg.c_model, cfg.bp_layers, cfg.ffn_hidden);
        Ok(BcNet {
            set,
            cfg,
            reduce,
            abi,
            bp,
        })
    }

    pub fn param_count(&self) -> usize {
        self.set.total_values()
    }

    /// Full forward pass over one feature window.
    pub fn forward(
        &self,
        fwd: &Forward,
        features: &[f64],
        t_len: usize,
        grid: &AnchorGrid,
    ) -> Result<ModelOutputs> {
        if features.len() != t_len * self.cfg.c_in {
            return Err(NumericError::InvalidArgument {
                op: "forward",
                msg: format!(
                    "{} feature values for T = {t_len}, c_in = {}",
                    features.len(),
                    self.cfg.c_in
                ),
            });
        }
        if grid.is_empty() {
            return Err(NumericError::InvalidArgument {
                op: "forward",
                msg: "anchor grid is empty".into(),
            });
        }
        let x = fwd.input(features.to_vec(), vec![t_len, self.cfg.c_in])?;
        let reduced = self.reduce.forward(fwd, &self.set, &x)?;

        let (p_start, p_end) =
            bp_forward(fwd, &self.set, &reduced, &self.bp, self.cfg.keep_ratio)?;

        let frame = frame_level_interaction(fwd, &self.set, &reduced, &self.abi)?;
        let anchors_action = sample_anchor_features(fwd, &frame.feat_action, grid)?;
        let anchors_background = sample_anchor_features(fwd, &frame.feat_background, grid)?;
        let clip = clip_level_interaction(
            fwd,
            &self.set,
            &anchors_action,
            &anchors_background,
            &self.abi,
        )?;

        Ok(ModelOutputs {
            p_start,
            p_end,
            p_action_frame: frame.p_action_frame,
            p_background_frame: frame.p_background_frame,
            p_action_cls: clip.p_action_cls,
            p_action_reg: clip.p_action_reg,
            p_background_clip: clip.p_background,
        })
    }
}
