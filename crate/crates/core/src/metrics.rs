//! Evaluation metrics: region similarity J, boundary accuracy F, their mean
//! J&F, Dice score, and Hausdorff distance, with per-video and corpus
//! aggregation.
//!
//! Boundary metrics run on 4-adjacency boundary pixel sets through an exact
//! squared Euclidean distance transform (lower-envelope of parabolas per
//! axis), so distances are exact integers in f64.

use crate::types::{Error, Mask, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Sentinel base for cells with no source point; large enough to dominate
/// any in-grid squared distance, small enough to stay exact in f64.
const FAR: f64 = 1e15;

/// Boundary pixels: foreground pixels 4-adjacent to background or touching
/// the image edge.
pub fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let m = mask.pixels();
    let (h, w) = m.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m[[y, x]] != 1 {
                continue;
            }
            let on_edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            let bg_neighbor = (y > 0 && m[[y - 1, x]] == 0)
                || (y + 1 < h && m[[y + 1, x]] == 0)
                || (x > 0 && m[[y, x - 1]] == 0)
                || (x + 1 < w && m[[y, x + 1]] == 0);
            if on_edge || bg_neighbor {
                out.push((y, x));
            }
        }
    }
    out
}

fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // replaces the only parabola
            v[k] = q;
            z[k] = f64::NEG_INFINITY;
            z[k + 1] = f64::INFINITY;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = ((q as isize - p as isize).pow(2)) as f64 + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest `true` cell; `FAR`-scale
/// values where no source exists.
pub(crate) fn squared_edt(points: &Array2<bool>) -> Array2<f64> {
    let (h, w) = points.dim();
    let mut grid = Array2::from_shape_fn((h, w), |(y, x)| if points[[y, x]] { 0.0 } else { FAR });
    // columns
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[[y, x]];
        }
        dt_1d(&col, &mut out);
        for y in 0..h {
            grid[[y, x]] = out[y];
        }
    }
    // rows
    let mut row = vec![0.0; w];
    let mut rout = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            row[x] = grid[[y, x]];
        }
        dt_1d(&row, &mut rout);
        for x in 0..w {
            grid[[y, x]] = rout[x];
        }
    }
    grid
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.pixels().dim(),
            b.pixels().dim()
        )));
    }
    Ok(())
}

fn overlap_counts(pred: &Mask, gt: &Mask) -> (u64, u64, u64) {
    let mut inter = 0u64;
    let mut np = 0u64;
    let mut ng = 0u64;
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels().iter()) {
        np += u64::from(p == 1);
        ng += u64::from(g == 1);
        inter += u64::from(p == 1 && g == 1);
    }
    (inter, np, ng)
}

/// Region similarity |pred ∩ gt| / |pred ∪ gt|; 1 when both masks are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, np, ng) = overlap_counts(pred, gt);
    let union = np + ng - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Dice score 2|pred ∩ gt| / (|pred| + |gt|); 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, np, ng) = overlap_counts(pred, gt);
    Ok(if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    })
}

/// DAVIS-style contour accuracy: precision/recall of boundary pixels within
/// `tolerance` (Euclidean, pixels), F = 2PR/(P+R). Both boundaries empty
/// → 1; exactly one empty → 0.
pub fn boundary_f(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (h, w) = pred.pixels().dim();
    let to_points = |pix: &[(usize, usize)]| {
        let mut g = Array2::from_elem((h, w), false);
        for &(y, x) in pix {
            g[[y, x]] = true;
        }
        g
    };
    let d_to_gt = squared_edt(&to_points(&bg));
    let d_to_pred = squared_edt(&to_points(&bp));
    let tol2 = tolerance * tolerance;
    let hits_p = bp.iter().filter(|&&(y, x)| d_to_gt[[y, x]] <= tol2).count();
    let hits_r = bg
        .iter()
        .filter(|&&(y, x)| d_to_pred[[y, x]] <= tol2)
        .count();
    let precision = hits_p as f64 / bp.len() as f64;
    let recall = hits_r as f64 / bg.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

fn directed_sq_distances(from: &[(usize, usize)], edt_to: &Array2<f64>) -> Vec<f64> {
    from.iter().map(|&(y, x)| edt_to[[y, x]]).collect()
}

fn hausdorff_distances(pred: &Mask, gt: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(pred, gt)?;
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (h, w) = pred.pixels().dim();
    let to_points = |pix: &[(usize, usize)]| {
        let mut g = Array2::from_elem((h, w), false);
        for &(y, x) in pix {
            g[[y, x]] = true;
        }
        g
    };
    let d_to_gt = squared_edt(&to_points(&bg));
    let d_to_pred = squared_edt(&to_points(&bp));
    Ok((
        directed_sq_distances(&bp, &d_to_gt),
        directed_sq_distances(&bg, &d_to_pred),
    ))
}

/// Maximum Hausdorff distance between boundary pixel sets, in pixels.
/// Errors with `EmptyMask` when either mask is empty.
pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (d_pg, d_gp) = hausdorff_distances(pred, gt)?;
    let m1 = d_pg.iter().cloned().fold(0.0, f64::max);
    let m2 = d_gp.iter().cloned().fold(0.0, f64::max);
    Ok(m1.max(m2).sqrt())
}

/// 95th-percentile Hausdorff (nearest-rank per direction, max of the two).
pub fn hausdorff95(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (d_pg, d_gp) = hausdorff_distances(pred, gt)?;
    let pct = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    };
    Ok(pct(d_pg).max(pct(d_gp)).sqrt())
}

/// DAVIS default boundary tolerance: 0.8% of the image diagonal, rounded up.
pub fn default_boundary_tolerance(h: usize, w: usize) -> f64 {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// Evaluation switches derived from config.
#[derive(Debug, Clone, Copy)]
pub struct EvalParams {
    /// Boundary tolerance in pixels; 0.0 selects the DAVIS default.
    pub boundary_tolerance: f64,
    pub use_hd95: bool,
}

impl EvalParams {
    pub fn from_config(cfg: &crate::types::Config) -> Self {
        Self {
            boundary_tolerance: cfg.boundary_tolerance,
            use_hd95: cfg.use_hd95,
        }
    }
}

/// Per-video metric row; J/F/JF/DSC in [0,100], HD in pixels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoMetrics {
    pub id: String,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub dsc: f64,
    pub hd: f64,
}

/// Corpus-level report: per-video rows, corpus means, bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub n_videos: usize,
    pub empty_prediction_frames: usize,
    pub videos: Vec<VideoMetrics>,
    pub mean: VideoMetrics,
}

impl MetricReport {
    /// CSV with the exact header `video_id,J,F,JF,DSC,HD`; the corpus mean
    /// is the final row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("video_id,J,F,JF,DSC,HD\n");
        for row in self.videos.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                row.id, row.j, row.f, row.jf, row.dsc, row.hd
            ));
        }
        s
    }

    /// Console/markdown table mirroring the comparison column order.
    pub fn to_table(&self) -> String {
        let mut s = String::from("| video | J&F | J | F | DSC | HD |\n|---|---|---|---|---|---|\n");
        for row in self.videos.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!(
                "| {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.2} |\n",
                row.id, row.jf, row.j, row.f, row.dsc, row.hd
            ));
        }
        s
    }
}

/// One video's aligned prediction/ground-truth sequences. Frame 0 (the given
/// reference) is excluded by the caller, so these are frames 1..T-1.
pub struct CorpusEntry {
    pub id: String,
    pub preds: Vec<Mask>,
    pub gts: Vec<Mask>,
}

/// Per-frame metrics averaged within each video, then across videos.
/// Empty-vs-nonempty Hausdorff frames contribute the image diagonal and are
/// counted in `empty_prediction_frames`.
pub fn evaluate_corpus(
    entries: &[CorpusEntry],
    params: &EvalParams,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    if entries.is_empty() {
        return Err(Error::Value("cannot evaluate an empty corpus".into()));
    }
    let mut videos = Vec::with_capacity(entries.len());
    let mut empties = 0usize;
    for e in entries {
        if e.preds.len() != e.gts.len() || e.preds.is_empty() {
            return Err(Error::Shape(format!(
                "video {}: {} predictions vs {} ground-truth frames",
                e.id,
                e.preds.len(),
                e.gts.len()
            )));
        }
        let (h, w) = e.gts[0].pixels().dim();
        let tol = if params.boundary_tolerance > 0.0 {
            params.boundary_tolerance
        } else {
            default_boundary_tolerance(h, w)
        };
        let diag = ((h * h + w * w) as f64).sqrt();
        let mut acc = [0.0f64; 4]; // j, f, dsc, hd
        for (p, g) in e.preds.iter().zip(e.gts.iter()) {
            let j = jaccard(p, g)?;
            let f = boundary_f(p, g, tol)?;
            let d = dice(p, g)?;
            let hd = if p.foreground_count() == 0 && g.foreground_count() == 0 {
                0.0
            } else {
                match if params.use_hd95 {
                    hausdorff95(p, g)
                } else {
                    hausdorff(p, g)
                } {
                    Ok(v) => v,
                    Err(Error::EmptyMask) => {
                        empties += 1;
                        diag
                    }
                    Err(other) => return Err(other),
                }
            };
            acc[0] += j;
            acc[1] += f;
            acc[2] += d;
            acc[3] += hd;
        }
        let n = e.preds.len() as f64;
        let j = 100.0 * acc[0] / n;
        let f = 100.0 * acc[1] / n;
        videos.push(VideoMetrics {
            id: e.id.clone(),
            j,
            f,
            jf: (j + f) / 2.0,
            dsc: 100.0 * acc[2] / n,
            hd: acc[3] / n,
        });
    }
    let n = videos.len() as f64;
    let mean_j = videos.iter().map(|v| v.j).sum::<f64>() / n;
    let mean_f = videos.iter().map(|v| v.f).sum::<f64>() / n;
    let mean = VideoMetrics {
        id: "mean".into(),
        j: mean_j,
        f: mean_f,
        jf: (mean_j + mean_f) / 2.0,
        dsc: videos.iter().map(|v| v.dsc).sum::<f64>() / n,
        hd: videos.iter().map(|v| v.hd).sum::<f64>() / n,
    };
    Ok(MetricReport {
        schema_version: 1,
        seed,
        config_hash: config_hash.to_string(),
        n_videos: videos.len(),
        empty_prediction_frames: empties,
        videos,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        Mask::new(Array2::from_shape_fn((h, w), |(y, x)| u8::from(f(y, x)))).unwrap()
    }

    fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
        Mask::new(Array2::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(p)))).unwrap()
    }

    // Independent O(n^2) references, deliberately naive.
    fn brute_boundary(mask: &Mask) -> Vec<(usize, usize)> {
        let m = mask.pixels();
        let (h, w) = m.dim();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if m[[y, x]] != 1 {
                    continue;
                }
                let mut is_b = y == 0 || y + 1 == h || x == 0 || x + 1 == w;
                if !is_b {
                    for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                        let (ny, nx) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                        if m[[ny, nx]] == 0 {
                            is_b = true;
                            break;
                        }
                    }
                }
                if is_b {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn brute_min_sq(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
        set.iter()
            .map(|&(y, x)| {
                let dy = p.0 as f64 - y as f64;
                let dx = p.1 as f64 - x as f64;
                dy * dy + dx * dx
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn brute_boundary_f(pred: &Mask, gt: &Mask, tol: f64) -> f64 {
        let bp = brute_boundary(pred);
        let bg = brute_boundary(gt);
        match (bp.is_empty(), bg.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let t2 = tol * tol;
        let p = bp.iter().filter(|&&q| brute_min_sq(q, &bg) <= t2).count() as f64 / bp.len() as f64;
        let r = bg.iter().filter(|&&q| brute_min_sq(q, &bp) <= t2).count() as f64 / bg.len() as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn brute_hausdorff(pred: &Mask, gt: &Mask) -> f64 {
        let bp = brute_boundary(pred);
        let bg = brute_boundary(gt);
        let d1 = bp
            .iter()
            .map(|&q| brute_min_sq(q, &bg))
            .fold(0.0, f64::max);
        let d2 = bg
            .iter()
            .map(|&q| brute_min_sq(q, &bp))
            .fold(0.0, f64::max);
        d1.max(d2).sqrt()
    }

    #[test]
    fn jaccard_basic_cases() {
        let a = mask_from_fn(4, 4, |y, _| y < 2); // top half, 8 px
        let b = mask_from_fn(4, 4, |_, x| x < 2); // left half, 8 px
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let disjoint = mask_from_fn(4, 4, |y, _| y >= 2);
        assert_eq!(jaccard(&a, &disjoint).unwrap(), 0.0);
        // overlap is the top-left 2x2 block: 4 px; union 12
        let j = jaccard(&a, &b).unwrap();
        assert!((j - 4.0 / 12.0).abs() < 1e-12);
        let empty = Mask::zeros(4, 4);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn dice_basic_cases_and_identity() {
        let a = mask_from_fn(4, 4, |y, _| y < 2);
        let b = mask_from_fn(4, 4, |_, x| x < 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-12);

        // DSC = 2J/(1+J), checked as exact rationals from pixel counts
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = rand_mask(&mut rng, 8, 8, 0.4);
            let g = rand_mask(&mut rng, 8, 8, 0.4);
            let (inter, np, ng) = overlap_counts(&p, &g);
            let union = np + ng - inter;
            // 2J/(1+J) with J = inter/union equals 2*inter/(union+inter)
            if np + ng > 0 {
                assert_eq!(union + inter, np + ng);
            }
            let j = jaccard(&p, &g).unwrap();
            let d = dice(&p, &g).unwrap();
            assert!(d >= j - 1e-15 && d <= 1.0);
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_f_identical_and_shifted() {
        let square = mask_from_fn(12, 12, |y, x| (3..9).contains(&y) && (3..9).contains(&x));
        assert_eq!(boundary_f(&square, &square, 1.0).unwrap(), 1.0);

        let shifted = mask_from_fn(12, 12, |y, x| (3..9).contains(&y) && (4..10).contains(&x));
        let f = boundary_f(&shifted, &square, 2.0).unwrap();
        assert_eq!(f, 1.0);
        // and the brute-force oracle agrees
        assert_eq!(brute_boundary_f(&shifted, &square, 2.0), 1.0);

        let empty = Mask::zeros(12, 12);
        assert_eq!(boundary_f(&empty, &square, 2.0).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_basic_cases() {
        let square = mask_from_fn(12, 12, |y, x| (3..9).contains(&y) && (3..9).contains(&x));
        assert_eq!(hausdorff(&square, &square).unwrap(), 0.0);

        let p1 = mask_from_fn(8, 8, |y, x| (y, x) == (0, 0));
        let p2 = mask_from_fn(8, 8, |y, x| (y, x) == (3, 4));
        assert_eq!(hausdorff(&p1, &p2).unwrap(), 5.0);
        assert_eq!(
            hausdorff(&p1, &p2).unwrap(),
            hausdorff(&p2, &p1).unwrap()
        );

        let empty = Mask::zeros(8, 8);
        assert!(matches!(hausdorff(&empty, &p1), Err(Error::EmptyMask)));
    }

    #[test]
    fn boundary_metrics_match_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nonempty_checked = 0;
        for round in 0..60 {
            let h = rng.gen_range(4..=16);
            let w = rng.gen_range(4..=16);
            let p = rand_mask(&mut rng, h, w, 0.35);
            let g = rand_mask(&mut rng, h, w, 0.35);
            for tol in [1.0, 2.0, 3.0] {
                let fast = boundary_f(&p, &g, tol).unwrap();
                let slow = brute_boundary_f(&p, &g, tol);
                assert!(
                    (fast - slow).abs() < 1e-9,
                    "round {round} tol {tol}: {fast} vs {slow}"
                );
            }
            if p.foreground_count() > 0 && g.foreground_count() > 0 {
                let fast = hausdorff(&p, &g).unwrap();
                let slow = brute_hausdorff(&p, &g);
                assert_eq!(fast, slow, "round {round}");
                nonempty_checked += 1;
            }
        }
        assert!(nonempty_checked >= 50);
    }

    #[test]
    fn metrics_invariant_under_joint_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flip = |m: &Mask| {
            let (h, w) = m.pixels().dim();
            Mask::new(Array2::from_shape_fn((h, w), |(y, x)| {
                m.pixels()[[y, w - 1 - x]]
            }))
            .unwrap()
        };
        for _ in 0..20 {
            let p = rand_mask(&mut rng, 10, 10, 0.4);
            let g = rand_mask(&mut rng, 10, 10, 0.4);
            let (pf, gf) = (flip(&p), flip(&g));
            assert_eq!(jaccard(&p, &g).unwrap(), jaccard(&pf, &gf).unwrap());
            assert_eq!(dice(&p, &g).unwrap(), dice(&pf, &gf).unwrap());
            assert_eq!(
                boundary_f(&p, &g, 2.0).unwrap(),
                boundary_f(&pf, &gf, 2.0).unwrap()
            );
            if p.foreground_count() > 0 && g.foreground_count() > 0 {
                assert_eq!(hausdorff(&p, &g).unwrap(), hausdorff(&pf, &gf).unwrap());
            }
        }
    }

    #[test]
    fn default_tolerance_is_one_pixel_at_64() {
        assert_eq!(default_boundary_tolerance(64, 64), 1.0);
    }

    #[test]
    fn evaluate_corpus_perfect_predictions() {
        let square = mask_from_fn(16, 16, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
        let entries = vec![CorpusEntry {
            id: "v0".into(),
            preds: vec![square.clone(); 3],
            gts: vec![square; 3],
        }];
        let params = EvalParams {
            boundary_tolerance: 0.0,
            use_hd95: false,
        };
        let r = evaluate_corpus(&entries, &params, 7, "h").unwrap();
        assert_eq!(r.mean.j, 100.0);
        assert_eq!(r.mean.f, 100.0);
        assert_eq!(r.mean.jf, 100.0);
        assert_eq!(r.mean.dsc, 100.0);
        assert_eq!(r.mean.hd, 0.0);
        // single-video corpus: mean equals that video's row
        assert_eq!(r.videos[0].j, r.mean.j);
        assert_eq!(r.n_videos, 1);
    }

    #[test]
    fn report_jf_column_is_mean_of_j_and_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries: Vec<CorpusEntry> = (0..3)
            .map(|i| CorpusEntry {
                id: format!("v{i}"),
                preds: (0..4).map(|_| rand_mask(&mut rng, 12, 12, 0.4)).collect(),
                gts: (0..4).map(|_| rand_mask(&mut rng, 12, 12, 0.4)).collect(),
            })
            .collect();
        let params = EvalParams {
            boundary_tolerance: 0.0,
            use_hd95: false,
        };
        let r = evaluate_corpus(&entries, &params, 0, "h").unwrap();
        for row in r.videos.iter().chain(std::iter::once(&r.mean)) {
            assert!((row.jf - (row.j + row.f) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_header_is_exact() {
        let square = mask_from_fn(16, 16, |y, x| y < 8 && x < 8);
        let entries = vec![CorpusEntry {
            id: "v0".into(),
            preds: vec![square.clone()],
            gts: vec![square],
        }];
        let params = EvalParams {
            boundary_tolerance: 0.0,
            use_hd95: false,
        };
        let r = evaluate_corpus(&entries, &params, 0, "h").unwrap();
        assert!(r.to_csv().starts_with("video_id,J,F,JF,DSC,HD\n"));
    }

    #[test]
    fn hd95_is_at_most_max_hausdorff() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = rand_mask(&mut rng, 12, 12, 0.4);
            let g = rand_mask(&mut rng, 12, 12, 0.4);
            if p.foreground_count() == 0 || g.foreground_count() == 0 {
                continue;
            }
            let h95 = hausdorff95(&p, &g).unwrap();
            let h = hausdorff(&p, &g).unwrap();
            assert!(h95 <= h + 1e-12);
        }
    }
}
