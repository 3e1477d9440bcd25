//! Shared domain types: frames, masks, video samples, label sets, config.
//!
//! All types here are immutable value objects after construction and safe to
//! share across workers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("memory bank is empty")]
    EmptyMemory,
    #[error("cutmix drawn but no mix source was provided")]
    MixSource,
    #[error("frame covered by no prediction stream: {0}")]
    Coverage(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("empty mask has no boundary")]
    EmptyMask,
    #[error("provenance conflict: {0}")]
    Conflict(String),
    #[error("label access violation: {0}")]
    Audit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Minimum frame side length in pixels.
pub const MIN_IMAGE_SIDE: usize = 8;

/// A single grayscale frame with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Array2<f64>,
}

impl Frame {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "frame {h}x{w} smaller than minimum {MIN_IMAGE_SIDE}"
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Value("frame intensity outside [0,1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// A binary mask: 0 = background, 1 = lesion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pixels: Array2<u8>,
}

impl Mask {
    pub fn new(pixels: Array2<u8>) -> Result<Self> {
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::Value("mask value outside {0,1}".into()));
        }
        Ok(Self { pixels })
    }

    /// All-background mask of the given shape.
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            pixels: Array2::zeros((h, w)),
        }
    }

    pub fn pixels(&self) -> &Array2<u8> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    /// Mask as a float map (0.0 / 1.0), the form consumed by the value encoder.
    pub fn to_float(&self) -> Array2<f64> {
        self.pixels.map(|&v| v as f64)
    }
}

/// Binarize a probability map: pixel = 1 iff prob >= threshold.
///
/// `threshold` must lie strictly inside (0, 1).
pub fn binarize(prob_map: &Array2<f64>, threshold: f64) -> Mask {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "binarize threshold must be in (0,1), got {threshold}"
    );
    Mask {
        pixels: prob_map.map(|&p| u8::from(p >= threshold)),
    }
}

/// An ordered frame sequence with optional per-frame ground truth and the
/// indices of the two labeled frames.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Frame>,
    pub gt_masks: Vec<Option<Mask>>,
    pub labeled_indices: (usize, usize),
}

impl VideoSample {
    pub fn new(
        frames: Vec<Frame>,
        gt_masks: Vec<Option<Mask>>,
        labeled_indices: (usize, usize),
    ) -> Result<Self> {
        validate_video(Self {
            frames,
            gt_masks,
            labeled_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Check every `VideoSample` invariant and return the sample unchanged.
///
/// Idempotent and side-effect free.
pub fn validate_video(sample: VideoSample) -> Result<VideoSample> {
    let t = sample.frames.len();
    if t < 3 {
        return Err(Error::Index(format!("video needs T >= 3 frames, got {t}")));
    }
    if sample.gt_masks.len() != t {
        return Err(Error::Shape(format!(
            "gt_masks length {} != frame count {t}",
            sample.gt_masks.len()
        )));
    }
    let (t1, t2) = sample.labeled_indices;
    if t1 >= t2 {
        return Err(Error::Index(format!(
            "labeled indices must satisfy t1 < t2, got ({t1},{t2})"
        )));
    }
    if t2 >= t {
        return Err(Error::Index(format!(
            "labeled index t2={t2} out of range for T={t}"
        )));
    }
    for idx in [t1, t2] {
        if sample.gt_masks[idx].is_none() {
            return Err(Error::Index(format!("labeled frame {idx} has no mask")));
        }
    }
    let (h, w) = sample.frames[0].pixels.dim();
    for (i, f) in sample.frames.iter().enumerate() {
        if f.pixels.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "frame {i} shape {:?} != {:?}",
                f.pixels.dim(),
                (h, w)
            )));
        }
    }
    for (i, m) in sample.gt_masks.iter().enumerate() {
        if let Some(m) = m {
            if m.pixels.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {i} shape {:?} != frame shape {:?}",
                    m.pixels.dim(),
                    (h, w)
                )));
            }
        }
    }
    Ok(sample)
}

/// Where a mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

/// Which quadro-inference stream produced a pseudo mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    FwdT1,
    FwdT2,
    RevT1,
    RevT2,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::FwdT1, Stream::RevT1, Stream::FwdT2, Stream::RevT2];

    pub fn name(&self) -> &'static str {
        match self {
            Stream::FwdT1 => "fwd_t1",
            Stream::FwdT2 => "fwd_t2",
            Stream::RevT1 => "rev_t1",
            Stream::RevT2 => "rev_t2",
        }
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// The merged per-video annotation set: one mask per frame plus provenance.
#[derive(Debug, Clone)]
pub struct LabelSet {
    pub masks: Vec<Mask>,
    pub provenance: Vec<Provenance>,
    pub source_stream: Vec<Option<Stream>>,
}

impl LabelSet {
    pub fn new(
        masks: Vec<Mask>,
        provenance: Vec<Provenance>,
        source_stream: Vec<Option<Stream>>,
        labeled_indices: (usize, usize),
    ) -> Result<Self> {
        let t = masks.len();
        if provenance.len() != t || source_stream.len() != t {
            return Err(Error::Shape(format!(
                "label set lengths differ: masks {t}, provenance {}, streams {}",
                provenance.len(),
                source_stream.len()
            )));
        }
        let (t1, t2) = labeled_indices;
        if t1.max(t2) >= t {
            return Err(Error::Index(format!(
                "labeled indices ({t1},{t2}) out of range for T={t}"
            )));
        }
        for idx in [t1, t2] {
            if provenance[idx] != Provenance::GroundTruth {
                return Err(Error::Conflict(format!(
                    "labeled frame {idx} must carry ground-truth provenance"
                )));
            }
        }
        for i in 0..t {
            if provenance[i] == Provenance::Pseudo && source_stream[i].is_none() {
                return Err(Error::Value(format!(
                    "pseudo frame {i} is missing its source stream"
                )));
            }
        }
        Ok(Self {
            masks,
            provenance,
            source_stream,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Fraction of frames with ground-truth provenance.
    pub fn gt_fraction(&self) -> f64 {
        let gt = self
            .provenance
            .iter()
            .filter(|p| **p == Provenance::GroundTruth)
            .count();
        gt as f64 / self.provenance.len() as f64
    }

    /// A label set where every frame is ground truth (for fully-supervised runs).
    pub fn all_ground_truth(masks: Vec<Mask>) -> Self {
        let t = masks.len();
        Self {
            masks,
            provenance: vec![Provenance::GroundTruth; t],
            source_stream: vec![None; t],
        }
    }
}

/// Pseudo-label merge rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Pick the stream whose reference frame is temporally closest.
    Temporal,
    /// Pick the stream whose prediction agrees most with the other covering streams.
    Overlap,
}

/// Every tunable of the pipeline. Plain scalars only; see `Config::validate`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    pub image_size: usize,
    pub patch_stride: usize,
    pub enc_ch1: usize,
    pub enc_ch2: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub dec_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iters_stage1: usize,
    pub iters_stage3: usize,
    pub lambda_pcl: f64,
    /// Use the conventional mean-of-logs contrastive form instead of the
    /// verbatim sum-inside-log form.
    pub pcl_mean_outside_log: bool,
    pub stcs_stage1: bool,
    pub stcs_stage3: bool,
    pub memory_every: usize,
    pub memory_capacity: usize,
    pub binarize_threshold: f64,
    /// Boundary-F tolerance in pixels; 0.0 means the DAVIS default
    /// (0.8% of the image diagonal, rounded up).
    pub boundary_tolerance: f64,
    pub use_hd95: bool,
    pub weak_scale_min: f64,
    pub weak_scale_max: f64,
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub cutout_area_min: f64,
    pub cutout_area_max: f64,
    pub strong_op_prob: f64,
    pub triplet_max_gap: usize,
    pub merge_rule: MergeRule,
    /// Channel multiplier for the student backbone (1 = same as teacher).
    pub student_width_mult: usize,
    pub student_warm_start: bool,
    pub rng_seed: u64,
    /// 0 = strictly sequential single-worker mode.
    pub workers: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl Config {
    /// Desk-scale preset: 64x64 frames, minutes-scale CPU training.
    pub fn desk_scale() -> Self {
        Self {
            image_size: 64,
            patch_stride: 8,
            enc_ch1: 8,
            enc_ch2: 12,
            key_dim: 8,
            value_dim: 16,
            dec_dim: 8,
            learning_rate: 1e-3,
            batch_size: 4,
            iters_stage1: 2000,
            iters_stage3: 2000,
            lambda_pcl: 0.02,
            pcl_mean_outside_log: false,
            stcs_stage1: true,
            stcs_stage3: true,
            memory_every: 3,
            memory_capacity: 8,
            binarize_threshold: 0.5,
            boundary_tolerance: 0.0,
            use_hd95: false,
            weak_scale_min: 0.8,
            weak_scale_max: 1.25,
            flip_prob: 0.5,
            jitter_strength: 0.3,
            blur_sigma_min: 0.5,
            blur_sigma_max: 1.5,
            cutout_area_min: 0.1,
            cutout_area_max: 0.3,
            strong_op_prob: 0.5,
            triplet_max_gap: 10,
            merge_rule: MergeRule::Temporal,
            student_width_mult: 1,
            student_warm_start: false,
            rng_seed: 42,
            workers: 0,
        }
    }

    /// Full-scale preset mirroring the original training recipe
    /// (384x384, batch 8, lr 1e-5, 150K iterations).
    pub fn full_scale() -> Self {
        Self {
            image_size: 384,
            patch_stride: 8,
            enc_ch1: 32,
            enc_ch2: 64,
            key_dim: 64,
            value_dim: 128,
            dec_dim: 32,
            learning_rate: 1e-5,
            batch_size: 8,
            iters_stage1: 150_000,
            iters_stage3: 150_000,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positives: [(&str, f64); 12] = [
            ("image_size", self.image_size as f64),
            ("patch_stride", self.patch_stride as f64),
            ("enc_ch1", self.enc_ch1 as f64),
            ("enc_ch2", self.enc_ch2 as f64),
            ("key_dim", self.key_dim as f64),
            ("value_dim", self.value_dim as f64),
            ("dec_dim", self.dec_dim as f64),
            ("learning_rate", self.learning_rate),
            ("batch_size", self.batch_size as f64),
            ("iters_stage1", self.iters_stage1 as f64),
            ("iters_stage3", self.iters_stage3 as f64),
            ("memory_every", self.memory_every as f64),
        ];
        for (name, v) in positives {
            if v <= 0.0 {
                return Err(Error::Value(format!("config field {name} must be positive")));
            }
        }
        if self.lambda_pcl < 0.0 {
            return Err(Error::Value("lambda_pcl must be >= 0".into()));
        }
        if self.patch_stride != 8 {
            return Err(Error::Value(
                "patch_stride must be 8 (three stride-2 conv layers)".into(),
            ));
        }
        if self.image_size % self.patch_stride != 0 {
            return Err(Error::Value(format!(
                "image_size {} not divisible by patch_stride {}",
                self.image_size, self.patch_stride
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Value("binarize_threshold must be in (0,1)".into()));
        }
        if self.weak_scale_min <= 0.0 || self.weak_scale_max < self.weak_scale_min {
            return Err(Error::Value("weak scale range invalid".into()));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Value("memory_capacity must be positive".into()));
        }
        if self.student_width_mult == 0 {
            return Err(Error::Value("student_width_mult must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of the full configuration, recorded in checkpoints and reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
