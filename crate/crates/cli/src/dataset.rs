//! On-disk dataset format: 8-bit grayscale PNG frames, {0,255} PNG masks,
//! and a versioned JSON manifest.
//!
//! Layout: `<root>/<video_id>/frames/%04d.png`, `<root>/<video_id>/masks/%04d.png`,
//! pseudo labels under `<root>/<video_id>/pseudo/%04d.png`, manifest at
//! `<root>/manifest.json` (two-shot view) next to `manifest_full.json`
//! (every label available). Manifest paths are relative to the manifest's
//! directory; absolute paths are kept as-is.

use anyhow::{bail, Context, Result};
use image::{GrayImage, ImageReader, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tsvos_core::rng::{derive, purpose};
use tsvos_core::synth::{generate, pick_labeled_indices, SubsampleStrategy, SyntheticSpec};
use tsvos_core::trainer::TrainVideo;
use tsvos_core::types::{Error as CoreError, Frame, LabelSet, Mask, Provenance, Split, Stream, VideoSample};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_FULL_NAME: &str = "manifest_full.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskEntry {
    pub path: Option<String>,
    pub provenance: Option<Provenance>,
    pub available: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<Stream>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub split: Split,
    pub frames: Vec<String>,
    pub masks: Vec<MaskEntry>,
    pub labeled_indices: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub image_size: usize,
    /// Dataset root the file paths are relative to; defaults to the
    /// manifest's own directory. Set on derived manifests written elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_strategy: Option<SubsampleStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn train_videos(&self) -> impl Iterator<Item = &VideoEntry> {
        self.videos.iter().filter(|v| v.split == Split::Train)
    }

    pub fn test_videos(&self) -> impl Iterator<Item = &VideoEntry> {
        self.videos.iter().filter(|v| v.split == Split::Test)
    }

    /// Labeled fraction over the train split (2/T per video when subsampled).
    pub fn label_fraction(&self) -> f64 {
        let mut available = 0usize;
        let mut total = 0usize;
        for v in self.train_videos() {
            total += v.masks.len();
            available += v.masks.iter().filter(|m| m.available).count();
        }
        if total == 0 {
            0.0
        } else {
            available as f64 / total as f64
        }
    }
}

// ── PNG IO ─────────────────────────────────────────────────────────────────

pub fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in frame.pixels().indexed_iter() {
        img.put_pixel(x as u32, y as u32, Luma([(v * 255.0).round() as u8]));
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.pixels().indexed_iter() {
        img.put_pixel(x as u32, y as u32, Luma([if v == 1 { 255 } else { 0 }]));
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_frame_png(path: &Path) -> Result<Frame> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let px = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    });
    Frame::new(px).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let px = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32).0[0] >= 128)
    });
    Mask::new(px).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

// ── Manifest IO ────────────────────────────────────────────────────────────

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let json = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).with_context(|| format!("parsing {}", path.display()))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        bail!(
            "manifest {}: schema version {} unsupported (expected {})",
            path.display(),
            manifest.schema_version,
            MANIFEST_SCHEMA_VERSION
        );
    }
    Ok(manifest)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Directory the manifest's paths are relative to.
pub fn manifest_base(manifest_path: &Path, manifest: &DatasetManifest) -> PathBuf {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    match &manifest.root {
        Some(r) => resolve(dir, r),
        None => dir.to_path_buf(),
    }
}

fn relativize(base: &Path, path: &Path) -> String {
    match path.strip_prefix(base) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => path.to_string_lossy().into_owned(),
    }
}

// ── Generation ─────────────────────────────────────────────────────────────

/// Render the synthetic corpus to disk and return the full-supervision
/// manifest (every mask available, no labeled indices yet).
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate().map_err(|e| anyhow::anyhow!("spec: {e}"))?;
    let videos = generate(spec).map_err(|e| anyhow::anyhow!("generation: {e}"))?;
    let mut entries = Vec::with_capacity(videos.len());
    for v in &videos {
        let frame_dir = root.join(&v.id).join("frames");
        let mask_dir = root.join(&v.id).join("masks");
        std::fs::create_dir_all(&frame_dir)?;
        std::fs::create_dir_all(&mask_dir)?;
        let mut frames = Vec::with_capacity(v.frames.len());
        let mut masks = Vec::with_capacity(v.masks.len());
        for (t, (frame, mask)) in v.frames.iter().zip(v.masks.iter()).enumerate() {
            let fpath = frame_dir.join(format!("{t:04}.png"));
            let mpath = mask_dir.join(format!("{t:04}.png"));
            write_frame_png(&fpath, frame)?;
            write_mask_png(&mpath, mask)?;
            frames.push(relativize(root, &fpath));
            masks.push(MaskEntry {
                path: Some(relativize(root, &mpath)),
                provenance: Some(Provenance::GroundTruth),
                available: true,
                stream: None,
            });
        }
        entries.push(VideoEntry {
            id: v.id.clone(),
            split: v.split,
            frames,
            masks,
            labeled_indices: None,
        });
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        image_size: spec.image_size,
        root: None,
        label_strategy: None,
        config_hash: None,
        videos: entries,
    })
}

/// Two-shot label budget: keep exactly two labels available per training
/// video (others stay on disk, flagged unavailable); the test split keeps
/// full ground truth for evaluation.
pub fn two_shot_subsample(
    manifest: &DatasetManifest,
    strategy: SubsampleStrategy,
    seed: u64,
) -> DatasetManifest {
    let mut out = manifest.clone();
    out.label_strategy = Some(strategy);
    for (i, v) in out.videos.iter_mut().enumerate() {
        if v.split != Split::Train {
            continue;
        }
        let mut rng = derive(seed, &[purpose::SUBSAMPLE, i as u64]);
        let (t1, t2) = pick_labeled_indices(v.frames.len(), strategy, &mut rng);
        v.labeled_indices = Some((t1, t2));
        for (t, m) in v.masks.iter_mut().enumerate() {
            m.available = t == t1 || t == t2;
        }
    }
    out
}

// ── Loading ────────────────────────────────────────────────────────────────

fn load_video(root: &Path, entry: &VideoEntry) -> Result<TrainVideo> {
    let frames: Vec<Frame> = entry
        .frames
        .iter()
        .map(|p| read_frame_png(&resolve(root, p)))
        .collect::<Result<_>>()?;
    let mut gt_masks = Vec::with_capacity(entry.masks.len());
    for (t, m) in entry.masks.iter().enumerate() {
        if !m.available {
            gt_masks.push(None);
            continue;
        }
        let path = m.path.as_ref().with_context(|| {
            format!("video {} frame {t}: mask marked available but has no path", entry.id)
        })?;
        let full = resolve(root, path);
        if !full.exists() {
            bail!(
                "video {} frame {t}: mask file {} does not exist",
                entry.id,
                full.display()
            );
        }
        gt_masks.push(Some(read_mask_png(&full)?));
    }
    let t_len = frames.len();
    let labeled = entry.labeled_indices.unwrap_or((0, t_len - 1));
    let sample = VideoSample::new(frames, gt_masks, labeled)
        .map_err(|e| anyhow::anyhow!("video {}: {e}", entry.id))?;
    Ok(TrainVideo {
        id: entry.id.clone(),
        sample,
    })
}

/// Load every video in the manifest; masks flagged unavailable load as None.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<TrainVideo>)> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_base(manifest_path, &manifest);
    let videos = manifest
        .videos
        .iter()
        .map(|e| load_video(&root, e))
        .collect::<Result<_>>()?;
    Ok((manifest, videos))
}

/// Load per-video label sets from a manifest whose train split has full
/// coverage (the pseudo-labeling output or an all-GT manifest).
pub fn load_labelsets(manifest_path: &Path) -> Result<Vec<(String, LabelSet)>> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_base(manifest_path, &manifest);
    manifest
        .train_videos()
        .map(|v| {
            let mut masks = Vec::with_capacity(v.masks.len());
            let mut provenance = Vec::with_capacity(v.masks.len());
            let mut streams = Vec::with_capacity(v.masks.len());
            for (t, m) in v.masks.iter().enumerate() {
                if !m.available {
                    bail!("video {} frame {t}: label set has a hidden mask", v.id);
                }
                let path = m
                    .path
                    .as_ref()
                    .with_context(|| format!("video {} frame {t}: missing mask path", v.id))?;
                masks.push(read_mask_png(&resolve(&root, path))?);
                provenance.push(m.provenance.with_context(|| {
                    format!("video {} frame {t}: missing provenance", v.id)
                })?);
                streams.push(m.stream);
            }
            let labeled = v
                .labeled_indices
                .with_context(|| format!("video {}: missing labeled indices", v.id))?;
            let labels = LabelSet::new(masks, provenance, streams, labeled)
                .map_err(|e| anyhow::anyhow!("video {}: {e}", v.id))?;
            Ok((v.id.clone(), labels))
        })
        .collect()
}

// ── Pseudo-label persistence ───────────────────────────────────────────────

/// Write one video's merged label set: pseudo masks go to
/// `<root>/<id>/pseudo/%04d.png`, ground-truth files are never touched, and
/// the manifest entry is updated in place. Downgrading an available
/// ground-truth frame to pseudo is a conflict.
pub fn save_labelset(
    video_id: &str,
    labels: &LabelSet,
    manifest: &mut DatasetManifest,
    root: &Path,
) -> Result<()> {
    let entry = manifest
        .videos
        .iter_mut()
        .find(|v| v.id == video_id)
        .with_context(|| format!("video {video_id} not in manifest"))?;
    if entry.masks.len() != labels.len() {
        bail!(
            "video {video_id}: {} labels for {} frames",
            labels.len(),
            entry.masks.len()
        );
    }
    let pseudo_dir = root.join(video_id).join("pseudo");
    for (t, ((mask, prov), stream)) in labels
        .masks
        .iter()
        .zip(labels.provenance.iter())
        .zip(labels.source_stream.iter())
        .enumerate()
    {
        let slot = &mut entry.masks[t];
        match prov {
            Provenance::GroundTruth => {
                if !slot.available {
                    bail!(
                        "video {video_id} frame {t}: label set claims ground truth for a hidden mask"
                    );
                }
            }
            Provenance::Pseudo => {
                if slot.available && slot.provenance == Some(Provenance::GroundTruth) {
                    return Err(anyhow::Error::new(CoreError::Conflict(format!(
                        "video {video_id} frame {t}: refusing to overwrite ground truth with pseudo"
                    ))));
                }
                std::fs::create_dir_all(&pseudo_dir)?;
                let path = pseudo_dir.join(format!("{t:04}.png"));
                write_mask_png(&path, mask)?;
                slot.path = Some(relativize(root, &path));
                slot.provenance = Some(Provenance::Pseudo);
                slot.available = true;
                slot.stream = *stream;
            }
        }
    }
    Ok(())
}
