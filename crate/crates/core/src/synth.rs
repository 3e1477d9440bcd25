//! Synthetic ultrasound-like video generation.
//!
//! Each video carries one hypoechoic (darker) elliptical lesion over a
//! brighter background. The ellipse drifts as a reflected random walk, its
//! radii and rotation wander, frames occasionally shift in brightness
//! (probe-pressure changes), and multiplicative speckle noise covers
//! everything. Ground truth is analytic, so every frame has an exact mask.
//! Intensities are quantized to 8 bits at generation time so on-disk PNG
//! round trips are pixel-exact.

use crate::rng::{derive, purpose};
use crate::types::{Error, Frame, Mask, Result, Split};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Center random-walk step, pixels per frame.
    pub sigma_pos: f64,
    /// Radius oscillation step, pixels per frame.
    pub sigma_rad: f64,
    /// Rotation drift, radians per frame.
    pub sigma_rot: f64,
    /// Multiplicative speckle strength: I * (1 + gamma * n).
    pub speckle_gamma: f64,
    pub background_level: f64,
    /// Intensity gap between background and lesion.
    pub contrast: f64,
    pub brightness_shift_prob: f64,
    pub brightness_shift_mag: f64,
    pub test_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 50,
            frames_per_video: 16,
            image_size: 64,
            radius_min: 7.0,
            radius_max: 13.0,
            sigma_pos: 1.2,
            sigma_rad: 0.35,
            sigma_rot: 0.08,
            speckle_gamma: 0.3,
            background_level: 0.62,
            contrast: 0.32,
            brightness_shift_prob: 0.15,
            brightness_shift_mag: 0.12,
            test_fraction: 0.2,
            rng_seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames_per_video < 3 {
            return Err(Error::Value(
                "need at least 1 video and 3 frames per video".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::Value("image_size must be >= 16".into()));
        }
        if !(self.radius_min >= 3.0 && self.radius_max >= self.radius_min) {
            return Err(Error::Value("radius range invalid (min >= 3)".into()));
        }
        if self.radius_max + 4.0 >= self.image_size as f64 / 2.0 {
            return Err(Error::Value(
                "radius_max too large for image_size (lesion must fit with margin)".into(),
            ));
        }
        if self.contrast <= 0.0 || self.background_level <= self.contrast {
            return Err(Error::Value(
                "need background_level > contrast > 0 so the lesion is visible".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Value("test_fraction must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        (self.n_videos as f64 * self.test_fraction).round() as usize
    }

    pub fn n_train(&self) -> usize {
        self.n_videos - self.n_test()
    }

    /// Threshold midway between lesion and background intensity.
    pub fn oracle_threshold(&self) -> f64 {
        self.background_level - self.contrast / 2.0
    }
}

/// One generated video with exact ground truth for every frame.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub id: String,
    pub split: Split,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    /// Axis-aligned half-extents of the rotated ellipse.
    fn extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = ((self.rx * c).powi(2) + (self.ry * s).powi(2)).sqrt();
        let ey = ((self.rx * s).powi(2) + (self.ry * c).powi(2)).sqrt();
        (ey, ex)
    }
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi);
    loop {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return v;
        }
    }
}

const EDGE_MARGIN: f64 = 2.0;

fn clamp_center(e: &mut Ellipse, size: f64) {
    let (ey, ex) = e.extents();
    e.cx = reflect(e.cx, ex + EDGE_MARGIN, size - 1.0 - ex - EDGE_MARGIN);
    e.cy = reflect(e.cy, ey + EDGE_MARGIN, size - 1.0 - ey - EDGE_MARGIN);
}

fn binomial_blur(src: &Array2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let k = [0.25, 0.5, 0.25];
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[[y, clamp(x as isize + i as isize - 1, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[[clamp(y as isize + i as isize - 1, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Generate the corpus; deterministic per (spec, seed). The last
/// `n_test` videos form the test split.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let n_train = spec.n_train();
    (0..spec.n_videos)
        .map(|v| {
            let split = if v < n_train { Split::Train } else { Split::Test };
            generate_video(spec, v, split)
        })
        .collect()
}

fn generate_video(spec: &SyntheticSpec, index: usize, split: Split) -> Result<SynthVideo> {
    let size = spec.image_size;
    let sizef = size as f64;
    let mut rng = derive(spec.rng_seed, &[purpose::SYNTH, index as u64]);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut e = Ellipse {
        cx: 0.0,
        cy: 0.0,
        rx: rng.gen_range(spec.radius_min..=spec.radius_max),
        ry: rng.gen_range(spec.radius_min..=spec.radius_max),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let (ey, ex) = e.extents();
    e.cx = rng.gen_range(ex + EDGE_MARGIN..sizef - 1.0 - ex - EDGE_MARGIN);
    e.cy = rng.gen_range(ey + EDGE_MARGIN..sizef - 1.0 - ey - EDGE_MARGIN);

    let lesion_level = (spec.background_level - spec.contrast).max(0.02);
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut masks = Vec::with_capacity(spec.frames_per_video);

    for _ in 0..spec.frames_per_video {
        let mask_px =
            Array2::from_shape_fn((size, size), |(y, x)| u8::from(e.contains(y as f64, x as f64)));
        let mut base = Array2::from_shape_fn((size, size), |(y, x)| {
            if mask_px[[y, x]] == 1 {
                lesion_level
            } else {
                spec.background_level
            }
        });
        base = binomial_blur(&base);
        if rng.gen_bool(spec.brightness_shift_prob) {
            let shift = rng.gen_range(-spec.brightness_shift_mag..=spec.brightness_shift_mag);
            base.mapv_inplace(|v| v + shift);
        }
        let noisy = base.map(|&v| {
            let n: f64 = normal.sample(&mut rng);
            let val = (v * (1.0 + spec.speckle_gamma * n)).clamp(0.0, 1.0);
            (val * 255.0).round() / 255.0
        });
        frames.push(Frame::new(noisy)?);
        masks.push(Mask::new(mask_px)?);

        // evolve the lesion for the next frame
        e.rx = (e.rx + spec.sigma_rad * normal.sample(&mut rng))
            .clamp(spec.radius_min, spec.radius_max);
        e.ry = (e.ry + spec.sigma_rad * normal.sample(&mut rng))
            .clamp(spec.radius_min, spec.radius_max);
        e.theta += spec.sigma_rot * normal.sample(&mut rng);
        e.cx += spec.sigma_pos * normal.sample(&mut rng);
        e.cy += spec.sigma_pos * normal.sample(&mut rng);
        clamp_center(&mut e, sizef);
    }

    Ok(SynthVideo {
        id: format!("video_{index:04}"),
        split,
        frames,
        masks,
    })
}

/// Blur-then-threshold reference segmenter: pixels darker than the threshold
/// after denoising are lesion. Exercised by the realism-floor checks as an
/// existence proof that the task is learnable but not degenerate.
pub fn oracle_segment(frame: &Frame, threshold: f64) -> Mask {
    let denoised = binomial_blur(&binomial_blur(frame.pixels()));
    Mask::new(denoised.map(|&v| u8::from(v < threshold))).expect("binary by construction")
}

/// How the two labeled frames of a training video are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleStrategy {
    FirstLast,
    RandomPair,
    Stratified,
}

/// Pick the two labeled frame indices for a video of length `t_len`.
pub fn pick_labeled_indices(
    t_len: usize,
    strategy: SubsampleStrategy,
    rng: &mut impl Rng,
) -> (usize, usize) {
    assert!(t_len >= 3);
    match strategy {
        SubsampleStrategy::FirstLast => (0, t_len - 1),
        SubsampleStrategy::RandomPair => {
            let a = rng.gen_range(0..t_len);
            let mut b = rng.gen_range(0..t_len - 1);
            if b >= a {
                b += 1;
            }
            (a.min(b), a.max(b))
        }
        SubsampleStrategy::Stratified => {
            let half = t_len / 2;
            (rng.gen_range(0..half), rng.gen_range(half..t_len))
        }
    }
}
