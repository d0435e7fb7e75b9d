//! Loss terms, the Adam optimizer with step decay, the training loop, and
//! checkpoint serialization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::abi::{default_scales, AnchorGrid};
use crate::datamodel::{rescale_linear, window_split, AnnotationSet, VideoFeatures, WindowSpec};
use crate::labels::{build_label_bundle, valid_mask, LabelBundle};
use crate::model::{BcNet, ModelConfig};
use crate::numeric::{NumericError, Tensor};
use crate::params::{Forward, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("numeric failure: {0}")]
    Numeric(#[from] NumericError),
    #[error("non-finite {term} loss at epoch {epoch}, item {item}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        item: usize,
    },
    #[error("label failure: {0}")]
    Label(#[from] crate::labels::LabelError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint error: {msg}")]
    Checkpoint { msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

const SIGMOID_CLAMP: f64 = 1e-6;

/// Class-balanced binary logistic loss over masked entries. Targets are
/// binarized at 0.5; positives weigh n/(2 n+), negatives n/(2 n-). With only
/// one class present it falls back to unweighted binary cross-entropy.
/// Predictions are clamped to [1e-6, 1 - 1e-6] inside the logs.
pub fn balanced_bce(
    pred: &Tensor,
    target: &[f64],
    mask: &[f64],
) -> crate::numeric::Result<Tensor> {
    assert_eq!(pred.numel(), target.len());
    assert_eq!(pred.numel(), mask.len());
    let n: f64 = mask.iter().sum();
    if n == 0.0 {
        return pred.tape().scalar(0.0);
    }
    let n_pos: f64 = target
        .iter()
        .zip(mask)
        .filter(|(t, _)| **t > 0.5)
        .map(|(_, m)| m)
        .sum();
    let n_neg = n - n_pos;
    let (w_pos, w_neg) = if n_pos > 0.0 && n_neg > 0.0 {
        (n / (2.0 * n_pos), n / (2.0 * n_neg))
    } else {
        (1.0, 1.0)
    };
    let shape = pred.shape();
    let mut c_pos = vec![0.0; target.len()];
    let mut c_neg = vec![0.0; target.len()];
    for i in 0..target.len() {
        if target[i] > 0.5 {
            c_pos[i] = mask[i] * w_pos;
        } else {
            c_neg[i] = mask[i] * w_neg;
        }
    }
    let tape = pred.tape();
    let c_pos = tape.constant(c_pos, shape.clone())?;
    let c_neg = tape.constant(c_neg, shape.clone())?;
    let p = pred.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)?;
    let q = pred.affine(-1.0, 1.0)?.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)?;
    let pos_term = p.log()?.mul(&c_pos)?.sum()?;
    let neg_term = q.log()?.mul(&c_neg)?.sum()?;
    pos_term.add(&neg_term)?.scale(-1.0 / n)
}

/// Mean smooth-L1 over masked entries: 0.5 d^2 for |d| < 1, |d| - 0.5 beyond.
pub fn smooth_l1(
    pred: &Tensor,
    target: &[f64],
    mask: &[f64],
) -> crate::numeric::Result<Tensor> {
    assert_eq!(pred.numel(), target.len());
    assert_eq!(pred.numel(), mask.len());
    let n: f64 = mask.iter().sum();
    if n == 0.0 {
        return pred.tape().scalar(0.0);
    }
    let tape = pred.tape();
    let shape = pred.shape();
    let t = tape.constant(target.to_vec(), shape.clone())?;
    let m = tape.constant(mask.to_vec(), shape)?;
    pred.sub(&t)?.huber()?.mul(&m)?.sum()?.scale(1.0 / n)
}

/// Boundary loss: balanced BCE on the start and end sequences.
pub fn loss_bp(
    p_start: &Tensor,
    p_end: &Tensor,
    labels: &LabelBundle,
    mask: &[f64],
) -> crate::numeric::Result<Tensor> {
    let s = balanced_bce(p_start, &labels.g_start, mask)?;
    let e = balanced_bce(p_end, &labels.g_end, mask)?;
    s.add(&e)
}

/// Frame-level loss: balanced BCE on both actionness heads.
pub fn loss_frame(
    p_action: &Tensor,
    p_background: &Tensor,
    labels: &LabelBundle,
    mask: &[f64],
) -> crate::numeric::Result<Tensor> {
    let a = balanced_bce(p_action, &labels.g_action_frame, mask)?;
    let b = balanced_bce(p_background, &labels.g_background_frame, mask)?;
    a.add(&b)
}

/// Regression sample mask: anchors with action label above 0.3, plus an
/// equal-count random draw from the rest.
pub fn make_regression_mask(g_action_clip: &[f64], rng: &mut ChaCha20Rng) -> Vec<f64> {
    let mut mask = vec![0.0; g_action_clip.len()];
    let mut negatives = Vec::new();
    let mut n_pos = 0usize;
    for (i, &g) in g_action_clip.iter().enumerate() {
        if g > 0.3 {
            mask[i] = 1.0;
            n_pos += 1;
        } else {
            negatives.push(i);
        }
    }
    negatives.shuffle(rng);
    for &i in negatives.iter().take(n_pos) {
        mask[i] = 1.0;
    }
    mask
}

/// Clip-level loss: balanced BCE for the two classification heads (targets
/// binarized at 0.5) plus smooth-L1 regression against the continuous action
/// label over the sampled anchors.
pub fn loss_clip(
    p_action_cls: &Tensor,
    p_action_reg: &Tensor,
    p_background: &Tensor,
    labels: &LabelBundle,
    regression_mask: &[f64],
) -> crate::numeric::Result<Tensor> {
    let ones = vec![1.0; labels.g_action_clip.len()];
    let cls = balanced_bce(p_action_cls, &labels.g_action_clip, &ones)?;
    let reg = smooth_l1(p_action_reg, &labels.g_action_clip, regression_mask)?;
    let bg = balanced_bce(p_background, &labels.g_background_clip, &ones)?;
    cls.add(&reg)?.add(&bg)
}

/// Loss values for one step, plus the tape scalar to backpropagate.
pub struct StepLosses {
    pub total: Tensor,
    pub bp: f64,
    pub frame: f64,
    pub clip: f64,
}

pub fn total_loss(
    outputs: &crate::model::ModelOutputs,
    labels: &LabelBundle,
    mask: &[f64],
    regression_mask: &[f64],
) -> crate::numeric::Result<StepLosses> {
    let l_bp = loss_bp(&outputs.p_start, &outputs.p_end, labels, mask)?;
    let l_frame = loss_frame(
        &outputs.p_action_frame,
        &outputs.p_background_frame,
        labels,
        mask,
    )?;
    let l_clip = loss_clip(
        &outputs.p_action_cls,
        &outputs.p_action_reg,
        &outputs.p_background_clip,
        labels,
        regression_mask,
    )?;
    let total = l_bp.add(&l_frame)?.add(&l_clip)?;
    Ok(StepLosses {
        bp: l_bp.scalar_value()?,
        frame: l_frame.scalar_value()?,
        clip: l_clip.scalar_value()?,
        total,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_factor: f64,
    /// Learning-rate decay period in epochs.
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Windows per optimizer step (gradient accumulation).
    pub grad_accum: usize,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            decay_factor: 0.1,
            decay_every: 10,
            epochs,
            seed,
            grad_accum: 1,
            model,
        }
    }
}

/// Step-decay schedule: lr * factor^(epoch / every) with 0-based epochs, so
/// with defaults the rate first drops at the epoch-10 boundary.
pub fn lr_for_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Adam state parallel to the parameter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(set: &ParamSet) -> Adam {
        Adam {
            t: 0,
            m: set.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: set.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, set: &mut ParamSet, grads: &[(usize, Vec<f64>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (pid, g) in grads {
            let m = &mut self.m[*pid];
            let v = &mut self.v[*pid];
            let p = &mut set.get_mut(*pid).values;
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One training window: padded features plus its label bundle.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub video_id: String,
    pub t_len: usize,
    pub features: Vec<f64>,
    pub valid_len: usize,
    pub labels: LabelBundle,
    pub seconds_per_step: f64,
}

/// How raw videos become fixed-length model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Preprocess {
    /// Overlapping windows of `length` steps at `stride`.
    Window { length: usize, stride: usize },
    /// Linear rescale of the whole video to a fixed number of steps.
    Rescale { target_t: usize },
    /// Use sequences as-is (all videos must share one length).
    Native,
}

impl Preprocess {
    pub fn windows(
        &self,
        v: &VideoFeatures,
        anns: &AnnotationSet,
    ) -> crate::datamodel::Result<Vec<crate::datamodel::Window>> {
        match *self {
            Preprocess::Window { length, stride } => {
                let spec = WindowSpec::new(length, stride)?;
                Ok(window_split(v, &spec, anns))
            }
            Preprocess::Rescale { target_t } => {
                let rescaled = rescale_linear(v, target_t)?;
                let spec = WindowSpec::new(target_t, target_t)?;
                Ok(window_split(&rescaled, &spec, anns))
            }
            Preprocess::Native => {
                let spec = WindowSpec::new(v.t_len, v.t_len)?;
                Ok(window_split(v, &spec, anns))
            }
        }
    }

    pub fn fixed_t(&self, native_t: usize) -> usize {
        match *self {
            Preprocess::Window { length, .. } => length,
            Preprocess::Rescale { target_t } => target_t,
            Preprocess::Native => native_t,
        }
    }
}

/// Resolve anchor scales: configured ones if present, otherwise the default
/// pyramid for the window length.
pub fn resolve_scales(cfg: &ModelConfig, t_len: usize) -> Vec<usize> {
    if cfg.scales.is_empty() {
        default_scales(t_len)
    } else {
        cfg.scales.clone()
    }
}

/// Window + label every video for training.
pub fn prepare_items(
    data: &[(VideoFeatures, AnnotationSet)],
    pre: &Preprocess,
    grid: &AnchorGrid,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for (v, anns) in data {
        for w in pre.windows(v, anns).map_err(|e| TrainError::Checkpoint {
            msg: format!("preprocess: {e}"),
        })? {
            let labels = build_label_bundle(
                &w.annotations.instances,
                w.features.t_len,
                w.features.seconds_per_step,
                grid,
            )?;
            items.push(TrainItem {
                video_id: w.features.video_id.clone(),
                t_len: w.features.t_len,
                features: w.features.data.clone(),
                valid_len: w.valid_len,
                labels,
                seconds_per_step: w.features.seconds_per_step,
            });
        }
    }
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(items)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_bp: f64,
    pub loss_frame: f64,
    pub loss_clip: f64,
    pub total: f64,
}

/// Versioned checkpoint: parameters, optimizer state, config, progress.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub epochs_done: usize,
    pub config: TrainConfig,
    pub params: ParamSet,
    pub adam: Adam,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| TrainError::Checkpoint {
            msg: e.to_string(),
        })?;
        std::fs::write(path, bytes).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
                msg: format!("{}: {e}", path.display()),
            })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint {
                msg: format!(
                    "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                    ckpt.version
                ),
            });
        }
        Ok(ckpt)
    }

    pub fn into_model(self) -> Result<(BcNet, Adam, TrainConfig, usize)> {
        let mut model = BcNet::new(self.config.model.clone(), self.seed)?;
        if model.set.len() != self.params.len() {
            return Err(TrainError::Checkpoint {
                msg: format!(
                    "checkpoint has {} parameter tensors, model expects {}",
                    self.params.len(),
                    model.set.len()
                ),
            });
        }
        model.set = self.params;
        Ok((model, self.adam, self.config, self.epochs_done))
    }
}

pub struct TrainOutcome {
    pub model: BcNet,
    pub adam: Adam,
    pub log: Vec<EpochLog>,
    pub epochs_done: usize,
}

/// Deterministic RNG for one epoch's sampling decisions; derived from the
/// run seed so resumed runs replay the identical stream.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)))
}

/// Run (or resume) training over prepared items. Items are visited in order;
/// each window is one step unless `grad_accum` batches several.
pub fn train(
    items: &[TrainItem],
    cfg: &TrainConfig,
    grid: &AnchorGrid,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut model, mut adam, start_epoch) = match resume {
        Some(ckpt) => {
            let (model, adam, ckpt_cfg, done) = ckpt.into_model()?;
            if ckpt_cfg.model != cfg.model {
                return Err(TrainError::Checkpoint {
                    msg: "checkpoint model config differs from requested config".into(),
                });
            }
            (model, adam, done)
        }
        None => {
            let model = BcNet::new(cfg.model.clone(), cfg.seed)?;
            let adam = Adam::new(&model.set);
            (model, adam, 0)
        }
    };

    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_for_epoch(cfg, epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut pending: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut pending_n = 0usize;

        for (item_idx, item) in items.iter().enumerate() {
            let fwd = Forward::new();
            let outputs = model.forward(&fwd, &item.features, item.t_len, grid)?;
            let mask = valid_mask(item.t_len, item.valid_len);
            let reg_mask = make_regression_mask(&item.labels.g_action_clip, &mut rng);
            let losses = total_loss(&outputs, &item.labels, &mask, &reg_mask)?;
            for (value, term) in [
                (losses.bp, "boundary"),
                (losses.frame, "frame"),
                (losses.clip, "clip"),
            ] {
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        term,
                        epoch,
                        item: item_idx,
                    });
                }
            }
            sums.0 += losses.bp;
            sums.1 += losses.frame;
            sums.2 += losses.clip;
            sums.3 += losses.total.scalar_value()?;

            losses.total.backward()?;
            for (pid, g) in fwd.tape.param_grads() {
                let acc = pending.entry(pid).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            pending_n += 1;

            let flush = pending_n >= cfg.grad_accum.max(1) || item_idx + 1 == items.len();
            if flush {
                let scale = 1.0 / pending_n as f64;
                let grads: Vec<(usize, Vec<f64>)> = pending
                    .iter()
                    .map(|(pid, g)| (*pid, g.iter().map(|v| v * scale).collect()))
                    .collect();
                adam.step(&mut model.set, &grads, lr);
                pending.clear();
                pending_n = 0;
            }
        }

        let n = items.len() as f64;
        let row = EpochLog {
            epoch,
            lr,
            loss_bp: sums.0 / n,
            loss_frame: sums.1 / n,
            loss_clip: sums.2 / n,
            total: sums.3 / n,
        };
        log::info!(
            "epoch {:>4}  lr {:>9.2e}  bp {:.4}  frame {:.4}  clip {:.4}  total {:.4}",
            row.epoch,
            row.lr,
            row.loss_bp,
            row.loss_frame,
            row.loss_clip,
            row.total
        );
        log.push(row);
    }

    Ok(TrainOutcome {
        epochs_done: cfg.epochs,
        model,
        adam,
        log,
    })
}

pub fn make_checkpoint(outcome: &TrainOutcome, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        seed: cfg.seed,
        epochs_done: outcome.epochs_done,
        config: cfg.clone(),
        params: outcome.model.set.clone(),
        adam: outcome.adam.clone(),
    }
}

/// Write the per-epoch CSV log: epoch, lr, L1 (boundary), L_frame, L_clip, total.
pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,lr,loss_bp,loss_frame,loss_clip,total\n");
    for row in log {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.lr, row.loss_bp, row.loss_frame, row.loss_clip, row.total
        ));
    }
    std::fs::write(path, text).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
