//! Supervision signals: action score labels (tIoU), background score labels
//! (tIoA), boundary label sequences, frame-level actionness labels, and
//! clip-level anchor labels.
//!
//! All interval math happens in continuous seconds. Step index t maps to the
//! step center (t + 0.5) * dt for membership tests, and to t * dt for
//! boundary positions.

use crate::abi::AnchorGrid;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LabelError {
    #[error("degenerate interval: start {start} must be < end {end}")]
    DegenerateInterval { start: f64, end: f64 },
    #[error("anchor grid is empty")]
    EmptyGrid,
}

pub type Result<T> = std::result::Result<T, LabelError>;

/// Half-open time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Interval> {
        if start < end {
            Ok(Interval { start, end })
        } else {
            Err(LabelError::DegenerateInterval { start, end })
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn intersection(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Pairwise union length: |a| + |b| - |a ∩ b|.
    pub fn union(&self, other: &Interval) -> f64 {
        self.len() + other.len() - self.intersection(other)
    }

    pub fn tiou(&self, other: &Interval) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            0.0
        } else {
            inter / self.union(other)
        }
    }
}

/// Merge overlapping (or touching) intervals into a sorted disjoint cover.
pub fn merge_intervals(mut xs: Vec<Interval>) -> Vec<Interval> {
    xs.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut out: Vec<Interval> = Vec::with_capacity(xs.len());
    for iv in xs {
        match out.last_mut() {
            Some(last) if iv.start <= last.end => {
                last.end = last.end.max(iv.end);
            }
            _ => out.push(iv),
        }
    }
    out
}

/// Action score label: max tIoU between the proposal and any ground truth.
pub fn action_label_tiou(p: &Interval, gts: &[Interval]) -> Result<f64> {
    Interval::new(p.start, p.end)?;
    Ok(gts
        .iter()
        .map(|g| p.tiou(g))
        .fold(0.0f64, |acc, v| acc.max(v)))
}

/// Background score label: 1 - sum over merged ground truths of
/// |gt ∩ p| / |p|, clamped to [0, 1].
pub fn background_label_tioa(p: &Interval, gts: &[Interval]) -> Result<f64> {
    Interval::new(p.start, p.end)?;
    let merged = merge_intervals(gts.to_vec());
    let covered: f64 = merged.iter().map(|g| g.intersection(p)).sum();
    Ok((1.0 - covered / p.len()).clamp(0.0, 1.0))
}

/// One supervision bundle for a fixed-length feature window.
#[derive(Debug, Clone)]
pub struct LabelBundle {
    /// Boundary start/end labels, length T.
    pub g_start: Vec<f64>,
    pub g_end: Vec<f64>,
    /// Frame-level action/background labels, length T.
    pub g_action_frame: Vec<f64>,
    pub g_background_frame: Vec<f64>,
    /// Clip-level anchor labels, length L.
    pub g_action_clip: Vec<f64>,
    pub g_background_clip: Vec<f64>,
}

/// Boundary label sequences. Position t is labeled 1 when (in step units) the
/// window [t-0.5, t+0.5] overlaps a boundary region [b - d/10, b + d/10],
/// where b is an instance start (for g_start) or end (for g_end) and d the
/// instance duration.
pub fn boundary_label_seq(
    instances: &[Interval],
    t_len: usize,
    seconds_per_step: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut g_start = vec![0.0; t_len];
    let mut g_end = vec![0.0; t_len];
    for inst in instances {
        let b_start = inst.start / seconds_per_step;
        let b_end = inst.end / seconds_per_step;
        let d = b_end - b_start;
        let half = d / 10.0;
        for t in 0..t_len {
            let lo = t as f64 - 0.5;
            let hi = t as f64 + 0.5;
            if hi.min(b_start + half) > lo.max(b_start - half) {
                g_start[t] = 1.0;
            }
            if hi.min(b_end + half) > lo.max(b_end - half) {
                g_end[t] = 1.0;
            }
        }
    }
    (g_start, g_end)
}

/// Frame-level action/background labels: step t is action when its center
/// (t + 0.5) * dt lies inside any instance; background is the complement.
pub fn frame_actionness_labels(
    instances: &[Interval],
    t_len: usize,
    seconds_per_step: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut g_a = vec![0.0; t_len];
    for t in 0..t_len {
        let center = (t as f64 + 0.5) * seconds_per_step;
        if instances
            .iter()
            .any(|iv| iv.start <= center && center <= iv.end)
        {
            g_a[t] = 1.0;
        }
    }
    let g_b = g_a.iter().map(|v| 1.0 - v).collect();
    (g_a, g_b)
}

/// Clip-level anchor labels: tIoU and tIoA of every anchor against the
/// ground truths, anchors converted to seconds via the step duration.
pub fn anchor_labels(
    grid: &AnchorGrid,
    gts: &[Interval],
    seconds_per_step: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grid.anchors.is_empty() {
        return Err(LabelError::EmptyGrid);
    }
    let mut g_a = Vec::with_capacity(grid.anchors.len());
    let mut g_b = Vec::with_capacity(grid.anchors.len());
    for anchor in &grid.anchors {
        let iv = anchor.to_seconds(seconds_per_step);
        g_a.push(action_label_tiou(&iv, gts)?);
        g_b.push(background_label_tioa(&iv, gts)?);
    }
    Ok((g_a, g_b))
}

/// Full label bundle for one window worth of annotations.
pub fn build_label_bundle(
    instances: &[Interval],
    t_len: usize,
    seconds_per_step: f64,
    grid: &AnchorGrid,
) -> Result<LabelBundle> {
    let (g_start, g_end) = boundary_label_seq(instances, t_len, seconds_per_step);
    let (g_action_frame, g_background_frame) =
        frame_actionness_labels(instances, t_len, seconds_per_step);
    let (g_action_clip, g_background_clip) = anchor_labels(grid, instances, seconds_per_step)?;
    Ok(LabelBundle {
        g_start,
        g_end,
        g_action_frame,
        g_background_frame,
        g_action_clip,
        g_background_clip,
    })
}

/// 1.0 for steps below `valid_len`, 0.0 for padding.
pub fn valid_mask(t_len: usize, valid_len: usize) -> Vec<f64> {
    (0..t_len).map(|t| if t < valid_len { 1.0 } else { 0.0 }).collect()
}
