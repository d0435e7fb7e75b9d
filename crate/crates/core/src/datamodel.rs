//! Feature/annotation ingestion, temporal windowing and rescaling, and a
//! deterministic synthetic dataset generator.
//!
//! On-disk formats:
//! - features: `<video_id>.csv` (T rows x C columns) or `<video_id>.f32`
//!   (little-endian f32, row-major), described by a `manifest.json` array of
//!   `{video_id, t, c, seconds_per_step, format}` entries
//! - annotations: `annotations.json` mapping video_id to
//!   `{duration, annotations: [{segment: [start, end], label?}]}`

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::labels::Interval;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {file} at row {row}, column {col}: {msg}")]
    Parse {
        file: String,
        row: usize,
        col: usize,
        msg: String,
    },
    #[error("manifest error for {video_id}: {msg}")]
    Manifest { video_id: String, msg: String },
    #[error("invalid {what}: {msg}")]
    Invariant { what: &'static str, msg: String },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Per-video feature sequence with its time base.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub video_id: String,
    pub t_len: usize,
    pub c_dim: usize,
    /// Row-major T x C.
    pub data: Vec<f64>,
    /// Duration of one feature step, in seconds.
    pub seconds_per_step: f64,
}

impl VideoFeatures {
    pub fn new(
        video_id: String,
        t_len: usize,
        c_dim: usize,
        data: Vec<f64>,
        seconds_per_step: f64,
    ) -> Result<VideoFeatures> {
        if t_len < 2 {
            return Err(DataError::Invariant {
                what: "features",
                msg: format!("T >= 2 violated for '{video_id}' (T = {t_len})"),
            });
        }
        if !(seconds_per_step > 0.0) {
            return Err(DataError::Invariant {
                what: "features",
                msg: format!("seconds_per_step must be > 0 for '{video_id}'"),
            });
        }
        if data.len() != t_len * c_dim {
            return Err(DataError::Invariant {
                what: "features",
                msg: format!(
                    "'{video_id}': {} values for {t_len}x{c_dim}",
                    data.len()
                ),
            });
        }
        Ok(VideoFeatures {
            video_id,
            t_len,
            c_dim,
            data,
            seconds_per_step,
        })
    }

    pub fn duration(&self) -> f64 {
        self.t_len as f64 * self.seconds_per_step
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.c_dim..(t + 1) * self.c_dim]
    }
}

/// Ground-truth instances for one video, in seconds.
#[derive(Debug, Clone, Default)]
pub struct AnnotationSet {
    pub video_id: String,
    pub instances: Vec<Interval>,
    pub labels: Vec<Option<String>>,
}

impl AnnotationSet {
    pub fn new(video_id: String, instances: Vec<Interval>) -> AnnotationSet {
        let labels = vec![None; instances.len()];
        AnnotationSet {
            video_id,
            instances,
            labels,
        }
    }
}

/// Overlapping-window parameters, in steps.
#[derive(Debug, Clone, Copy)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(length: usize, stride: usize) -> Result<WindowSpec> {
        if stride == 0 || stride > length {
            return Err(DataError::Invariant {
                what: "window spec",
                msg: format!("require 0 < stride <= length, got {stride}/{length}"),
            });
        }
        Ok(WindowSpec { length, stride })
    }
}

/// One zero-padded window with window-local annotations.
#[derive(Debug, Clone)]
pub struct Window {
    pub features: VideoFeatures,
    pub annotations: AnnotationSet,
    /// Steps that hold real data; the rest is zero padding.
    pub valid_len: usize,
    /// Offset of the window inside the source video, in steps.
    pub start_step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub t: usize,
    pub c: usize,
    pub seconds_per_step: f64,
    #[serde(default = "default_format")]
    pub format: String,
}

fn default_format() -> String {
    "csv".to_string()
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load every manifest entry from `dir`, CSV or raw f32 per entry format.
pub fn load_features(dir: &Path, manifest: &[ManifestEntry]) -> Result<Vec<VideoFeatures>> {
    manifest
        .iter()
        .map(|entry| match entry.format.as_str() {
            "f32" => load_f32_file(dir, entry),
            _ => load_csv_file(dir, entry),
        })
        .collect()
}

fn load_csv_file(dir: &Path, entry: &ManifestEntry) -> Result<VideoFeatures> {
    let path = dir.join(format!("{}.csv", entry.video_id));
    let file_name = path.display().to_string();
    let text = fs::read_to_string(&path).map_err(|e| DataError::Io {
        path: file_name.clone(),
        source: e,
    })?;
    let mut data = Vec::with_capacity(entry.t * entry.c);
    let mut rows = 0usize;
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = 0usize;
        for (col, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                file: file_name.clone(),
                row,
                col,
                msg: format!("non-numeric cell '{}'", cell.trim()),
            })?;
            data.push(v);
            cols += 1;
        }
        if cols != entry.c {
            return Err(DataError::Manifest {
                video_id: entry.video_id.clone(),
                msg: format!("row {row} has {cols} columns, manifest says C = {}", entry.c),
            });
        }
        rows += 1;
    }
    if rows < 2 {
        return Err(DataError::Invariant {
            what: "features",
            msg: format!("T >= 2 violated for '{}' (T = {rows})", entry.video_id),
        });
    }
    if rows != entry.t {
        return Err(DataError::Manifest {
            video_id: entry.video_id.clone(),
            msg: format!("{rows} rows in file, manifest says T = {}", entry.t),
        });
    }
    VideoFeatures::new(
        entry.video_id.clone(),
        entry.t,
        entry.c,
        data,
        entry.seconds_per_step,
    )
}

fn load_f32_file(dir: &Path, entry: &ManifestEntry) -> Result<VideoFeatures> {
    let path = dir.join(format!("{}.f32", entry.video_id));
    let file_name = path.display().to_string();
    let bytes = fs::read(&path).map_err(|e| DataError::Io {
        path: file_name.clone(),
        source: e,
    })?;
    let expected = entry.t * entry.c * 4;
    if bytes.len() != expected {
        return Err(DataError::Manifest {
            video_id: entry.video_id.clone(),
            msg: format!(
                "{} bytes in file, manifest implies {expected} ({}x{} f32)",
                bytes.len(),
                entry.t,
                entry.c
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    VideoFeatures::new(
        entry.video_id.clone(),
        entry.t,
        entry.c,
        data,
        entry.seconds_per_step,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationEntryFile {
    pub segment: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoAnnotationFile {
    pub duration: f64,
    pub annotations: Vec<AnnotationEntryFile>,
}

pub type AnnotationFile = BTreeMap<String, VideoAnnotationFile>;

pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, AnnotationSet>> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for (video_id, entry) in file {
        let mut instances = Vec::with_capacity(entry.annotations.len());
        let mut labels = Vec::with_capacity(entry.annotations.len());
        for (i, ann) in entry.annotations.iter().enumerate() {
            let iv = Interval::new(ann.segment[0], ann.segment[1]).map_err(|_| {
                DataError::Invariant {
                    what: "annotation",
                    msg: format!(
                        "'{video_id}' instance {i}: start {} must be < end {}",
                        ann.segment[0], ann.segment[1]
                    ),
                }
            })?;
            if iv.start < 0.0 || iv.end > entry.duration + 1e-9 {
                return Err(DataError::Invariant {
                    what: "annotation",
                    msg: format!(
                        "'{video_id}' instance {i} [{}, {}] outside [0, {}]",
                        iv.start, iv.end, entry.duration
                    ),
                });
            }
            instances.push(iv);
            labels.push(ann.label.clone());
        }
        out.insert(
            video_id.clone(),
            AnnotationSet {
                video_id,
                instances,
                labels,
            },
        );
    }
    Ok(out)
}

/// Linearly interpolate every channel onto `target_t` uniformly spaced
/// positions over [0, T-1]; the step duration is rescaled so the spanned
/// duration (T-1) * dt is preserved.
pub fn rescale_linear(v: &VideoFeatures, target_t: usize) -> Result<VideoFeatures> {
    if target_t < 2 {
        return Err(DataError::Invariant {
            what: "rescale",
            msg: format!("target_t must be >= 2, got {target_t}"),
        });
    }
    if target_t == v.t_len {
        return Ok(v.clone());
    }
    let c = v.c_dim;
    let mut data = Vec::with_capacity(target_t * c);
    let scale = (v.t_len - 1) as f64 / (target_t - 1) as f64;
    for i in 0..target_t {
        let x = i as f64 * scale;
        let lo = (x.floor() as usize).min(v.t_len - 1);
        let hi = (lo + 1).min(v.t_len - 1);
        let frac = x - lo as f64;
        let a = v.row(lo);
        let b = v.row(hi);
        for j in 0..c {
            data.push(a[j] + frac * (b[j] - a[j]));
        }
    }
    VideoFeatures::new(
        v.video_id.clone(),
        target_t,
        c,
        data,
        v.seconds_per_step * scale,
    )
}

/// Split a video into overlapping windows. The final partial window is kept
/// and zero-padded, with its valid length recorded. Annotations are clipped
/// to the window extent and re-expressed in window-local seconds; clipped
/// instances shorter than one feature step are dropped.
pub fn window_split(
    v: &VideoFeatures,
    spec: &WindowSpec,
    anns: &AnnotationSet,
) -> Vec<Window> {
    let t = v.t_len;
    let len = spec.length;
    let last_k = if t <= len {
        0
    } else {
        (t - len + spec.stride - 1) / spec.stride
    };
    let dt = v.seconds_per_step;
    let mut out = Vec::with_capacity(last_k + 1);
    for k in 0..=last_k {
        let start = k * spec.stride;
        let valid = (t - start).min(len);
        let mut data = vec![0.0; len * v.c_dim];
        data[..valid * v.c_dim]
            .copy_from_slice(&v.data[start * v.c_dim..(start + valid) * v.c_dim]);
        let win_start_sec = start as f64 * dt;
        let win_end_sec = (start + valid) as f64 * dt;
        let mut instances = Vec::new();
        let mut labels = Vec::new();
        for (iv, label) in anns.instances.iter().zip(&anns.labels) {
            let s = iv.start.max(win_start_sec);
            let e = iv.end.min(win_end_sec);
            if e - s >= dt {
                instances.push(Interval::new(s - win_start_sec, e - win_start_sec).unwrap());
                labels.push(label.clone());
            }
        }
        out.push(Window {
            features: VideoFeatures {
                video_id: v.video_id.clone(),
                t_len: len,
                c_dim: v.c_dim,
                data,
                seconds_per_step: dt,
            },
            annotations: AnnotationSet {
                video_id: v.video_id.clone(),
                instances,
                labels,
            },
            valid_len: valid,
            start_step: start,
        });
    }
    out
}

/// Controls for the synthetic dataset generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub t_len: usize,
    pub c_dim: usize,
    pub max_instances: usize,
    /// Per-channel separation between action and background means.
    pub margin: f64,
    pub noise_sigma: f64,
    /// Also emit background segments whose features sit partway toward the
    /// action pattern (harder negatives).
    pub hard_background: bool,
    /// How far distractor segments sit toward the action pattern, in [0, 1).
    pub distractor_strength: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_videos: usize, t_len: usize, c_dim: usize, max_instances: usize) -> SynthConfig {
        SynthConfig {
            seed,
            n_videos,
            t_len,
            c_dim,
            max_instances,
            margin: 2.0,
            noise_sigma: 0.3,
            hard_background: false,
            distractor_strength: 0.6,
        }
    }
}

/// Deterministic synthetic videos: action spans carry a class pattern mean,
/// background a distinct mean, both plus Gaussian noise. Instances are
/// pairwise disjoint, inside [0, duration], with boundaries on step edges.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<(VideoFeatures, AnnotationSet)>> {
    if cfg.t_len < 8 {
        return Err(DataError::Invariant {
            what: "synth config",
            msg: format!("T must be >= 8, got {}", cfg.t_len),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma >= 0");
    // Fixed class pattern for the whole dataset.
    let pattern: Vec<f64> = (0..cfg.c_dim)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let dt = 1.0;

    let mut out = Vec::with_capacity(cfg.n_videos);
    for vid in 0..cfg.n_videos {
        let video_id = format!("synth_{vid:04}");
        let t = cfg.t_len;
        let mut kind = vec![0u8; t]; // 0 background, 1 action, 2 distractor
        let mut instances: Vec<Interval> = Vec::new();

        if cfg.max_instances > 0 {
            let n_inst = rng.gen_range(1..=cfg.max_instances);
            let min_len = (t / 16).max(2);
            let max_len = (t / 4).max(min_len + 1);
            let mut tries = 0;
            while instances.len() < n_inst && tries < 200 {
                tries += 1;
                let len = rng.gen_range(min_len..=max_len);
                if len >= t {
                    continue;
                }
                let start = rng.gen_range(0..=t - len);
                // Keep one clear background step between instances.
                let clear = (start.saturating_sub(1)..(start + len + 1).min(t))
                    .all(|i| kind[i] == 0);
                if !clear {
                    continue;
                }
                for step in kind.iter_mut().skip(start).take(len) {
                    *step = 1;
                }
                instances.push(
                    Interval::new(start as f64 * dt, (start + len) as f64 * dt).unwrap(),
                );
            }
            instances.sort_by(|a, b| a.start.total_cmp(&b.start));
        }

        if cfg.hard_background {
            // One or two distractor spans in leftover background.
            let n_distract = rng.gen_range(1..=2usize);
            let min_len = (t / 16).max(2);
            let mut tries = 0;
            let mut placed = 0;
            while placed < n_distract && tries < 200 {
                tries += 1;
                let len = rng.gen_range(min_len..=(t / 6).max(min_len + 1));
                if len >= t {
                    continue;
                }
                let start = rng.gen_range(0..=t - len);
                let clear = (start.saturating_sub(1)..(start + len + 1).min(t))
                    .all(|i| kind[i] == 0);
                if !clear {
                    continue;
                }
                for step in kind.iter_mut().skip(start).take(len) {
                    *step = 2;
                }
                placed += 1;
            }
        }

        let mut data = Vec::with_capacity(t * cfg.c_dim);
        for &k in &kind {
            for pat in &pattern {
                let mean = match k {
                    1 => cfg.margin * pat,
                    2 => cfg.distractor_strength * cfg.margin * pat,
                    _ => 0.0,
                };
                data.push(mean + noise.sample(&mut rng));
            }
        }

        let features = VideoFeatures::new(video_id.clone(), t, cfg.c_dim, data, dt)?;
        let labels = vec![Some("action".to_string()); instances.len()];
        out.push((
            features,
            AnnotationSet {
                video_id,
                instances,
                labels,
            },
        ));
    }
    Ok(out)
}

/// Write a dataset to `dir` in the on-disk layout this crate reads back:
/// per-video CSV features, `manifest.json`, `annotations.json`.
pub fn write_dataset(dir: &Path, data: &[(VideoFeatures, AnnotationSet)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut manifest = Vec::with_capacity(data.len());
    let mut annotations: AnnotationFile = BTreeMap::new();
    for (feats, anns) in data {
        let path = dir.join(format!("{}.csv", feats.video_id));
        let mut buf = String::new();
        for ti in 0..feats.t_len {
            let row = feats.row(ti);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    buf.push(',');
                }
                buf.push_str(&format!("{v:.6}"));
            }
            buf.push('\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(buf.as_bytes()).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        manifest.push(ManifestEntry {
            video_id: feats.video_id.clone(),
            t: feats.t_len,
            c: feats.c_dim,
            seconds_per_step: feats.seconds_per_step,
            format: "csv".to_string(),
        });
        annotations.insert(
            feats.video_id.clone(),
            VideoAnnotationFile {
                duration: feats.duration(),
                annotations: anns
                    .instances
                    .iter()
                    .zip(&anns.labels)
                    .map(|(iv, label)| AnnotationEntryFile {
                        segment: [iv.start, iv.end],
                        label: label.clone(),
                    })
                    .collect(),
            },
        );
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("annotations.json"), &annotations)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DataError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

use rand::SeedableRng;
