//! Qualitative strips: frames with ground-truth and predicted contours
//! overlaid, concatenated horizontally into one PNG per video.

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use std::path::Path;
use tsvos_core::metrics::boundary_pixels;
use tsvos_core::types::{Frame, Mask};

const GT_COLOR: Rgb<u8> = Rgb([60, 220, 60]);
const PRED_COLOR: Rgb<u8> = Rgb([230, 60, 60]);

fn frame_to_rgb(frame: &Frame) -> RgbImage {
    let (h, w) = (frame.height(), frame.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in frame.pixels().indexed_iter() {
        let g = (v * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
    }
    img
}

fn draw_contour(img: &mut RgbImage, mask: &Mask, color: Rgb<u8>) {
    for (y, x) in boundary_pixels(mask) {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// One frame panel: grayscale frame, GT contour in green, prediction in red.
pub fn overlay_panel(frame: &Frame, gt: Option<&Mask>, pred: Option<&Mask>) -> RgbImage {
    let mut img = frame_to_rgb(frame);
    if let Some(m) = gt {
        draw_contour(&mut img, m, GT_COLOR);
    }
    if let Some(m) = pred {
        draw_contour(&mut img, m, PRED_COLOR);
    }
    img
}

/// Horizontal strip over every `every`-th frame of a video.
pub fn qualitative_strip(
    frames: &[Frame],
    gts: &[Option<Mask>],
    preds: &[Option<Mask>],
    every: usize,
    out_path: &Path,
) -> Result<()> {
    anyhow::ensure!(!frames.is_empty(), "empty video");
    anyhow::ensure!(every >= 1, "every must be >= 1");
    let (h, w) = (frames[0].height(), frames[0].width());
    let picked: Vec<usize> = (0..frames.len()).step_by(every).collect();
    let gap = 2u32;
    let total_w = picked.len() as u32 * (w as u32 + gap) - gap;
    let mut strip = RgbImage::from_pixel(total_w, h as u32, Rgb([255, 255, 255]));
    for (i, &t) in picked.iter().enumerate() {
        let panel = overlay_panel(
            &frames[t],
            gts.get(t).and_then(|m| m.as_ref()),
            preds.get(t).and_then(|m| m.as_ref()),
        );
        let x0 = i as u32 * (w as u32 + gap);
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                strip.put_pixel(x0 + x, y, *panel.get_pixel(x, y));
            }
        }
    }
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    strip
        .save(out_path)
        .with_context(|| format!("writing {}", out_path.display()))
}
