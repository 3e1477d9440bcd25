//! Source-dependent augmentation.
//!
//! Weak transforms (random resize back-cropped/padded to the original size,
//! horizontal flip) apply to every training pair; strong transforms
//! (intensity jitter, Gaussian blur, CutOut, CutMix) apply only to
//! pseudo-labeled pairs, after the weak ones. Geometric edits are recorded
//! and replayable so frame and mask never drift apart; photometric edits
//! never touch the mask.

use crate::types::{Config, Error, Frame, Mask, Result};
use ndarray::Array2;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Labeled,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// One applied transform with enough parameters to replay its geometry.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedOp {
    Resize {
        scale: f64,
        out_h: usize,
        out_w: usize,
        off_y: usize,
        off_x: usize,
    },
    Flip,
    Jitter {
        brightness: f64,
        contrast: f64,
    },
    Blur {
        sigma: f64,
    },
    CutOut {
        rect: Rect,
    },
    CutMix {
        rect: Rect,
    },
}

impl AppliedOp {
    pub fn name(&self) -> &'static str {
        match self {
            AppliedOp::Resize { .. } => "resize",
            AppliedOp::Flip => "flip",
            AppliedOp::Jitter { .. } => "jitter",
            AppliedOp::Blur { .. } => "blur",
            AppliedOp::CutOut { .. } => "cutout",
            AppliedOp::CutMix { .. } => "cutmix",
        }
    }

    pub fn is_strong(&self) -> bool {
        matches!(
            self,
            AppliedOp::Jitter { .. }
                | AppliedOp::Blur { .. }
                | AppliedOp::CutOut { .. }
                | AppliedOp::CutMix { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub frame: Frame,
    pub mask: Mask,
    pub applied_ops: Vec<AppliedOp>,
    pub source: SourceKind,
}

/// Augmentation strengths, lifted out of `Config`.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub cutout_area_min: f64,
    pub cutout_area_max: f64,
    pub cutout_aspect_min: f64,
    pub cutout_aspect_max: f64,
    pub strong_op_prob: f64,
}

impl AugmentParams {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            scale_min: cfg.weak_scale_min,
            scale_max: cfg.weak_scale_max,
            flip_prob: cfg.flip_prob,
            jitter_strength: cfg.jitter_strength,
            blur_sigma_min: cfg.blur_sigma_min,
            blur_sigma_max: cfg.blur_sigma_max,
            cutout_area_min: cfg.cutout_area_min,
            cutout_area_max: cfg.cutout_area_max,
            cutout_aspect_min: 0.5,
            cutout_aspect_max: 2.0,
            strong_op_prob: cfg.strong_op_prob,
        }
    }

    /// Parameters that make every transform a no-op draw.
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            jitter_strength: 0.0,
            blur_sigma_min: 0.5,
            blur_sigma_max: 1.5,
            cutout_area_min: 0.1,
            cutout_area_max: 0.3,
            cutout_aspect_min: 0.5,
            cutout_aspect_max: 2.0,
            strong_op_prob: 0.0,
        }
    }
}

// ── Geometry kernels ───────────────────────────────────────────────────────

fn resize_bilinear(src: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (oh, ow) == (h, w) {
        return src.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[y0, x1]] * (1.0 - dy) * dx
            + src[[y1, x0]] * dy * (1.0 - dx)
            + src[[y1, x1]] * dy * dx
    })
}

fn resize_nearest(src: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    if (oh, ow) == (h, w) {
        return src.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let iy = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let ix = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        src[[iy, ix]]
    })
}

/// Crop (when src axis >= dst axis) or pad with `fill` (when smaller), at
/// the given per-axis offsets.
fn place<T: Copy>(
    src: &Array2<T>,
    dst_h: usize,
    dst_w: usize,
    off_y: usize,
    off_x: usize,
    fill: T,
) -> Array2<T> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((dst_h, dst_w), |(y, x)| {
        let sy = if sh >= dst_h {
            Some(y + off_y)
        } else {
            y.checked_sub(off_y).filter(|&v| v < sh)
        };
        let sx = if sw >= dst_w {
            Some(x + off_x)
        } else {
            x.checked_sub(off_x).filter(|&v| v < sw)
        };
        match (sy, sx) {
            (Some(a), Some(b)) => src[[a, b]],
            _ => fill,
        }
    })
}

fn flip_h<T: Copy>(src: &Array2<T>) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| src[[y, w - 1 - x]])
}

fn axis_offset(rng: &mut impl Rng, src: usize, dst: usize) -> usize {
    let span = src.abs_diff(dst);
    if span == 0 {
        0
    } else {
        rng.gen_range(0..=span)
    }
}

fn gaussian_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut norm = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in &mut kernel {
        *v /= norm;
    }
    let (h, w) = src.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w);
                acc += kv * src[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn draw_rect(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    area_min: f64,
    area_max: f64,
    aspect_min: f64,
    aspect_max: f64,
) -> Rect {
    let area = rng.gen_range(area_min..=area_max) * (h * w) as f64;
    let aspect = rng.gen_range(aspect_min..=aspect_max);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let y = if rh < h { rng.gen_range(0..=h - rh) } else { 0 };
    let x = if rw < w { rng.gen_range(0..=w - rw) } else { 0 };
    Rect { y, x, h: rh, w: rw }
}

fn zero_rect_f(frame: &mut Array2<f64>, r: &Rect) {
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            frame[[y, x]] = 0.0;
        }
    }
}

fn zero_rect_m(mask: &mut Array2<u8>, r: &Rect) {
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            mask[[y, x]] = 0;
        }
    }
}

fn paste_rect_f(dst: &mut Array2<f64>, src: &Array2<f64>, r: &Rect) {
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            dst[[y, x]] = src[[y, x]];
        }
    }
}

fn paste_rect_m(dst: &mut Array2<u8>, src: &Array2<u8>, r: &Rect) {
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            dst[[y, x]] = src[[y, x]];
        }
    }
}

// ── Public operations ──────────────────────────────────────────────────────

/// Random resize (cropped/padded back to the input size) plus horizontal
/// flip, applied jointly to frame and mask.
pub fn weak_augment(
    frame: &Frame,
    mask: &Mask,
    source: SourceKind,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> AugmentedPair {
    let (h, w) = (frame.height(), frame.width());
    let mut ops = Vec::new();

    let scale = rng.gen_range(params.scale_min..=params.scale_max);
    let out_h = ((h as f64 * scale).round() as usize).max(1);
    let out_w = ((w as f64 * scale).round() as usize).max(1);
    let off_y = axis_offset(rng, out_h, h);
    let off_x = axis_offset(rng, out_w, w);
    let mut fpix = place(
        &resize_bilinear(frame.pixels(), out_h, out_w),
        h,
        w,
        off_y,
        off_x,
        0.0,
    );
    let mut mpix = place(
        &resize_nearest(mask.pixels(), out_h, out_w),
        h,
        w,
        off_y,
        off_x,
        0u8,
    );
    ops.push(AppliedOp::Resize {
        scale,
        out_h,
        out_w,
        off_y,
        off_x,
    });

    if rng.gen_bool(params.flip_prob) {
        fpix = flip_h(&fpix);
        mpix = flip_h(&mpix);
        ops.push(AppliedOp::Flip);
    }

    AugmentedPair {
        frame: Frame::new(fpix).expect("weak augment keeps frame valid"),
        mask: Mask::new(mpix).expect("weak augment keeps mask valid"),
        applied_ops: ops,
        source,
    }
}

/// Strong perturbations for pseudo-sourced pairs: intensity jitter, blur,
/// CutOut, CutMix, each drawn independently with `strong_op_prob`.
pub fn strong_augment(
    mut pair: AugmentedPair,
    params: &AugmentParams,
    rng: &mut impl Rng,
    mix_source: Option<&AugmentedPair>,
) -> Result<AugmentedPair> {
    let mut fpix = pair.frame.pixels().clone();
    let mut mpix = pair.mask.pixels().clone();
    let (h, w) = fpix.dim();

    if rng.gen_bool(params.strong_op_prob) {
        let brightness = rng.gen_range(-params.jitter_strength..=params.jitter_strength);
        let contrast = rng.gen_range(-params.jitter_strength..=params.jitter_strength);
        fpix.mapv_inplace(|v| ((v - 0.5) * (1.0 + contrast) + 0.5 + brightness).clamp(0.0, 1.0));
        pair.applied_ops.push(AppliedOp::Jitter {
            brightness,
            contrast,
        });
    }

    if rng.gen_bool(params.strong_op_prob) {
        let sigma = rng.gen_range(params.blur_sigma_min..=params.blur_sigma_max);
        fpix = gaussian_blur(&fpix, sigma);
        pair.applied_ops.push(AppliedOp::Blur { sigma });
    }

    if rng.gen_bool(params.strong_op_prob) {
        let rect = draw_rect(
            rng,
            h,
            w,
            params.cutout_area_min,
            params.cutout_area_max,
            params.cutout_aspect_min,
            params.cutout_aspect_max,
        );
        zero_rect_f(&mut fpix, &rect);
        zero_rect_m(&mut mpix, &rect);
        pair.applied_ops.push(AppliedOp::CutOut { rect });
    }

    if rng.gen_bool(params.strong_op_prob) {
        let src = mix_source.ok_or(Error::MixSource)?;
        if src.frame.pixels().dim() != (h, w) {
            return Err(Error::Shape("cutmix source shape mismatch".into()));
        }
        let rect = draw_rect(
            rng,
            h,
            w,
            params.cutout_area_min,
            params.cutout_area_max,
            params.cutout_aspect_min,
            params.cutout_aspect_max,
        );
        paste_rect_f(&mut fpix, src.frame.pixels(), &rect);
        paste_rect_m(&mut mpix, src.mask.pixels(), &rect);
        pair.applied_ops.push(AppliedOp::CutMix { rect });
    }

    pair.frame = Frame::new(fpix).expect("strong augment keeps frame valid");
    pair.mask = Mask::new(mpix).expect("strong augment keeps mask valid");
    Ok(pair)
}

/// Source-dependent routing: labeled pairs get weak transforms only,
/// pseudo pairs get weak then strong.
pub fn sda(
    frame: &Frame,
    mask: &Mask,
    source: SourceKind,
    params: &AugmentParams,
    rng: &mut impl Rng,
    mix_source: Option<&AugmentedPair>,
) -> Result<AugmentedPair> {
    let pair = weak_augment(frame, mask, source, params, rng);
    match source {
        SourceKind::Labeled => Ok(pair),
        SourceKind::Pseudo => strong_augment(pair, params, rng, mix_source),
    }
}

/// Replay the recorded geometry-affecting ops on an untouched mask.
/// `mix_mask` must be the mix source's mask when the ops contain a CutMix.
pub fn apply_geometry(mask: &Mask, ops: &[AppliedOp], mix_mask: Option<&Mask>) -> Result<Mask> {
    let (h, w) = mask.pixels().dim();
    let mut px = mask.pixels().clone();
    for op in ops {
        match op {
            AppliedOp::Resize {
                out_h,
                out_w,
                off_y,
                off_x,
                ..
            } => {
                px = place(&resize_nearest(&px, *out_h, *out_w), h, w, *off_y, *off_x, 0u8);
            }
            AppliedOp::Flip => px = flip_h(&px),
            AppliedOp::CutOut { rect } => zero_rect_m(&mut px, rect),
            AppliedOp::CutMix { rect } => {
                let src = mix_mask.ok_or(Error::MixSource)?;
                paste_rect_m(&mut px, src.pixels(), rect);
            }
            AppliedOp::Jitter { .. } | AppliedOp::Blur { .. } => {}
        }
    }
    Mask::new(px)
}
