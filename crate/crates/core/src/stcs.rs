//! Space-time consistency supervision.
//!
//! Samples two successive frames and a free-range anchor frame, matches each
//! patch of the first frame to its best anchor patch through a row-softmax
//! affinity, then pulls the successive frame's patch toward that anchor
//! patch (and away from all others) with a contrastive loss over dot-product
//! logits. The argmax match is a constant during backpropagation.
//!
//! `stcs_term` feeds L2-normalized key rows into the affinity and the loss.
//! Unbounded key norms let the softmax saturate and the contrastive term
//! then rewards norm growth forever, inflating the shared key encoder until
//! segmentation collapses; unit-norm keys cap the logits at cosine range.
//! The affinity/loss algebra itself is unchanged.

use crate::autodiff::{Tape, Var};
use crate::model::{self, BoundParams, ModelState};
use crate::types::{Error, Frame, Result};
use ndarray::Array2;
use rand::Rng;

/// Keys of two successive frames plus an anchor frame, with their indices.
#[derive(Debug, Clone)]
pub struct StcsBatch {
    pub k_t: Array2<f64>,
    pub k_t1: Array2<f64>,
    pub k_tau: Array2<f64>,
    pub t: usize,
    pub tau: usize,
}

impl StcsBatch {
    pub fn new(
        k_t: Array2<f64>,
        k_t1: Array2<f64>,
        k_tau: Array2<f64>,
        t: usize,
        tau: usize,
        t_len: usize,
    ) -> Result<Self> {
        if k_t.dim() != k_t1.dim() || k_t.dim() != k_tau.dim() {
            return Err(Error::Shape(format!(
                "key maps differ: {:?} {:?} {:?}",
                k_t.dim(),
                k_t1.dim(),
                k_tau.dim()
            )));
        }
        check_anchor(t, tau, t_len)?;
        Ok(Self {
            k_t,
            k_t1,
            k_tau,
            t,
            tau,
        })
    }
}

fn check_anchor(t: usize, tau: usize, t_len: usize) -> Result<()> {
    if t + 1 >= t_len {
        return Err(Error::Index(format!(
            "need t+1 < T for successive frames, got t={t}, T={t_len}"
        )));
    }
    if tau >= t_len || tau == t || tau == t + 1 {
        return Err(Error::Index(format!(
            "anchor tau={tau} must lie in [0,{t_len}) away from t={t} and t+1"
        )));
    }
    Ok(())
}

/// Row-stochastic patch affinity: row i is the softmax over anchor patches j
/// of the raw dot product between `k_a` row i and `k_tau` row j.
pub fn anchor_affinity(k_a: &Array2<f64>, k_tau: &Array2<f64>) -> Result<Array2<f64>> {
    if k_a.dim().1 != k_tau.dim().1 {
        return Err(Error::Shape(format!(
            "key dims differ: {} vs {}",
            k_a.dim().1,
            k_tau.dim().1
        )));
    }
    let logits = k_a.dot(&k_tau.t());
    let (m, n) = logits.dim();
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[[i, j]] = e;
            z += e;
        }
        for j in 0..n {
            out[[i, j]] /= z;
        }
    }
    Ok(out)
}

/// Best-matched anchor index per query patch; ties go to the smallest index.
pub fn best_match(a_s: &Array2<f64>) -> Vec<usize> {
    let (m, n) = a_s.dim();
    (0..m)
        .map(|i| {
            let mut best = 0;
            let mut best_v = a_s[[i, 0]];
            for j in 1..n {
                if a_s[[i, j]] > best_v {
                    best_v = a_s[[i, j]];
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Contrastive patch loss. The verbatim form sums the softmax ratios over
/// patches inside the log (and can go negative for HW > 1); the
/// `mean_outside_log` form is the conventional mean of per-patch log ratios,
/// bounded below by zero.
pub fn pcl_loss(
    k_t1: &Array2<f64>,
    k_tau: &Array2<f64>,
    j_star: &[usize],
    mean_outside_log: bool,
) -> Result<f64> {
    validate_pcl_inputs(k_t1, k_tau, j_star)?;
    let mut tape = Tape::new();
    let a = tape.leaf(k_t1.clone().into_dyn());
    let b = tape.leaf(k_tau.clone().into_dyn());
    let loss = pcl_loss_var(&mut tape, a, b, j_star.to_vec(), mean_outside_log);
    Ok(tape.value(loss).as_slice().unwrap()[0])
}

fn validate_pcl_inputs(k_t1: &Array2<f64>, k_tau: &Array2<f64>, j_star: &[usize]) -> Result<()> {
    if k_t1.dim().1 != k_tau.dim().1 {
        return Err(Error::Shape(format!(
            "key dims differ: {} vs {}",
            k_t1.dim().1,
            k_tau.dim().1
        )));
    }
    if j_star.len() != k_t1.dim().0 {
        return Err(Error::Shape(format!(
            "j_star length {} != patch count {}",
            j_star.len(),
            k_t1.dim().0
        )));
    }
    if let Some(&bad) = j_star.iter().find(|&&j| j >= k_tau.dim().0) {
        return Err(Error::Index(format!(
            "j_star entry {bad} out of range for {} anchor patches",
            k_tau.dim().0
        )));
    }
    Ok(())
}

/// Tape-level contrastive loss; `j_star` enters as a constant so no gradient
/// flows through the matching.
pub fn pcl_loss_var(
    tape: &mut Tape,
    k_t1: Var,
    k_tau: Var,
    j_star: Vec<usize>,
    mean_outside_log: bool,
) -> Var {
    let logits = tape.matmul_bt(k_t1, k_tau); // (HW, HW_tau)
    let lse = tape.row_logsumexp(logits);
    let pos = tape.gather_per_row(logits, j_star);
    let z = tape.sub(pos, lse); // log softmax ratio per patch
    if mean_outside_log {
        let m = tape.mean(z);
        tape.neg(m)
    } else {
        let e = tape.exp(z);
        let s = tape.sum(e);
        let l = tape.ln(s);
        tape.neg(l)
    }
}

/// L2-normalize each key row (array form, matching the tape op).
pub fn normalize_keys(k: &Array2<f64>) -> Array2<f64> {
    let mut out = k.clone();
    for mut row in out.rows_mut() {
        let norm = (row.iter().map(|v| v * v).sum::<f64>() + crate::autodiff::ROW_NORM_EPS).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Full consistency term for frames (t, t+1) against anchor tau: keys are
/// encoded and unit-normalized, the match is found on frame t, and the loss
/// is applied to frame t+1 against the anchor.
pub fn stcs_term(
    frames: &[Frame],
    t: usize,
    tau: usize,
    state: &ModelState,
    mean_outside_log: bool,
) -> Result<f64> {
    check_anchor(t, tau, frames.len())?;
    let k_t = normalize_keys(&model::encode_key(&frames[t], state)?);
    let k_tau = normalize_keys(&model::encode_key(&frames[tau], state)?);
    let k_t1 = normalize_keys(&model::encode_key(&frames[t + 1], state)?);
    let a_s = anchor_affinity(&k_t, &k_tau)?;
    let j_star = best_match(&a_s);
    pcl_loss(&k_t1, &k_tau, &j_star, mean_outside_log)
}

/// Tape-level consistency term used inside training steps. The match
/// `j_star` is computed with plain (no-gradient) forward passes on frame t
/// and the anchor; only the keys of frame t+1 and the anchor participate in
/// the differentiable loss.
pub(crate) fn stcs_term_var(
    tape: &mut Tape,
    bound: &BoundParams,
    frame_t: &Frame,
    frame_t1: &Frame,
    frame_tau: &Frame,
    state: &ModelState,
    mean_outside_log: bool,
) -> Result<Var> {
    let k_t = normalize_keys(&model::encode_key(frame_t, state)?);
    let k_tau_plain = normalize_keys(&model::encode_key(frame_tau, state)?);
    let j_star = best_match(&anchor_affinity(&k_t, &k_tau_plain)?);
    let f_t1 = model::frame_leaf(tape, frame_t1);
    let f_tau = model::frame_leaf(tape, frame_tau);
    let k_t1_raw = model::key_head(tape, bound, f_t1);
    let k_tau_raw = model::key_head(tape, bound, f_tau);
    let k_t1 = tape.row_l2_normalize(k_t1_raw);
    let k_tau = tape.row_l2_normalize(k_tau_raw);
    Ok(pcl_loss_var(tape, k_t1, k_tau, j_star, mean_outside_log))
}

/// Draw (t, tau) for a consistency term: t uniform over [0, T-1), tau
/// uniform over [0, T) excluding {t, t+1}.
pub fn sample_anchor(t_len: usize, rng: &mut impl Rng) -> (usize, usize) {
    assert!(t_len >= 3, "need at least 3 frames to sample an anchor");
    let t = rng.gen_range(0..t_len - 1);
    let mut tau = rng.gen_range(0..t_len - 2);
    // skip over {t, t+1} while preserving uniformity on the remainder
    if tau >= t {
        tau += 2;
    }
    (t, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close_rel, numeric_grad, numeric_grad_params};
    use crate::model::{bind_params, Arch};
    use ndarray::{array, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_affinity_matches_hand_computed_softmax() {
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let a = anchor_affinity(&k, &k).unwrap();
        // independent scalar route
        let e = 1.0f64.exp();
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        assert!((a[[0, 0]] - hi).abs() < 1e-12);
        assert!((a[[0, 1]] - lo).abs() < 1e-12);
        assert!((a[[1, 0]] - lo).abs() < 1e-12);
        assert!((a[[1, 1]] - hi).abs() < 1e-12);
        assert!((hi - 0.7311).abs() < 1e-4);
        assert!((lo - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn anchor_affinity_uniform_for_identical_anchor_rows() {
        let k_a = array![[0.3, -0.4], [1.2, 0.9], [0.0, 0.0]];
        let k_tau = Array2::from_elem((5, 2), 0.8);
        let a = anchor_affinity(&k_a, &k_tau).unwrap();
        for v in a.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_affinity_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let k_a = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-3.0..3.0));
            let k_tau = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-3.0..3.0));
            let a = anchor_affinity(&k_a, &k_tau).unwrap();
            for i in 0..6 {
                let s: f64 = a.row(i).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(a.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn best_match_examples() {
        let k = array![[1.0, 0.0], [0.0, 1.0]];
        let a = anchor_affinity(&k, &k).unwrap();
        assert_eq!(best_match(&a), vec![0, 1]);

        let uniform = Array2::from_elem((3, 4), 0.25);
        assert_eq!(best_match(&uniform), vec![0, 0, 0]);

        let onehot = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        assert_eq!(best_match(&onehot), vec![2, 0]);
    }

    #[test]
    fn pcl_single_patch_is_zero() {
        for s in [0.5, 1.0, 10.0] {
            let k = array![[s, 0.0]];
            let l = pcl_loss(&k, &k, &[0], false).unwrap();
            assert!(l.abs() < 1e-12, "got {l}");
        }
    }

    #[test]
    fn pcl_saturated_two_patches_is_minus_log_two() {
        let k = array![[10.0, 0.0], [0.0, 10.0]];
        let l = pcl_loss(&k, &k, &[0, 1], false).unwrap();
        assert!((l - (-(2.0f64.ln()))).abs() < 1e-3, "got {l}");
        // the conventional form stays at zero here
        let l_mean = pcl_loss(&k, &k, &[0, 1], true).unwrap();
        assert!(l_mean.abs() < 1e-3);
    }

    #[test]
    fn pcl_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k_t1 = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let k_tau = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let j_star = vec![1usize, 0, 2];
        for mean_form in [false, true] {
            let inputs = vec![k_t1.clone(), k_tau.clone()];
            let js = j_star.clone();
            let eval = move |ins: &[ArrayD<f64>]| {
                let mut t = Tape::new();
                let a = t.leaf(ins[0].clone());
                let b = t.leaf(ins[1].clone());
                let l = pcl_loss_var(&mut t, a, b, js.clone(), mean_form);
                t.value(l).as_slice().unwrap()[0]
            };
            let mut t = Tape::new();
            let a = t.leaf(inputs[0].clone());
            let b = t.leaf(inputs[1].clone());
            let l = pcl_loss_var(&mut t, a, b, j_star.clone(), mean_form);
            let g = t.backward(l);
            for (slot, var) in [(0usize, a), (1, b)] {
                let num = numeric_grad(&eval, &inputs, slot, 1e-5);
                assert_close_rel(g.get(var).unwrap(), &num, 1e-4);
            }
        }
    }

    #[test]
    fn pcl_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k_t1 = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let k_tau = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let j_star = vec![2usize, 0, 3, 1];
        let base = pcl_loss(&k_t1, &k_tau, &j_star, false).unwrap();

        // permuted[j] = original[perm[j]]
        let perm = [3usize, 0, 2, 1];
        let mut permuted = Array2::zeros((4, 3));
        for (j, &src) in perm.iter().enumerate() {
            permuted.row_mut(j).assign(&k_tau.row(src));
        }
        let inv = |orig: usize| perm.iter().position(|&p| p == orig).unwrap();
        let j_perm: Vec<usize> = j_star.iter().map(|&j| inv(j)).collect();
        let relabeled = pcl_loss(&k_t1, &permuted, &j_perm, false).unwrap();
        assert!((base - relabeled).abs() < 1e-12);
    }

    #[test]
    fn best_match_scale_invariant_when_maxima_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 20 {
            let k_a = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
            let k_tau = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
            let a = anchor_affinity(&k_a, &k_tau).unwrap();
            // require strictly unique row maxima
            let unique = (0..5).all(|i| {
                let row = a.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter().filter(|&&v| (v - mx).abs() < 1e-12).count() == 1
            });
            if !unique {
                continue;
            }
            let j = best_match(&a);
            for c in [1.5, 3.0, 10.0] {
                let scaled = anchor_affinity(&k_a.map(|v| v * c), &k_tau).unwrap();
                assert_eq!(best_match(&scaled), j);
            }
            checked += 1;
        }
    }

    fn toy_arch() -> Arch {
        Arch {
            enc_ch1: 2,
            enc_ch2: 2,
            key_dim: 2,
            value_dim: 2,
            dec_dim: 2,
            patch_stride: 8,
        }
    }

    fn rand_frame(rng: &mut ChaCha8Rng) -> Frame {
        Frame::new(Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn stcs_term_equals_manual_chain() {
        let state = crate::model::ModelState::init(toy_arch(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<Frame> = (0..4).map(|_| rand_frame(&mut rng)).collect();
        let (t, tau) = (1usize, 3usize);
        let term = stcs_term(&frames, t, tau, &state, false).unwrap();
        let k_t = normalize_keys(&model::encode_key(&frames[t], &state).unwrap());
        let k_tau = normalize_keys(&model::encode_key(&frames[tau], &state).unwrap());
        let k_t1 = normalize_keys(&model::encode_key(&frames[t + 1], &state).unwrap());
        let manual = pcl_loss(
            &k_t1,
            &k_tau,
            &best_match(&anchor_affinity(&k_t, &k_tau).unwrap()),
            false,
        )
        .unwrap();
        assert_eq!(term, manual);
    }

    #[test]
    fn stcs_term_on_identical_frames_matches_identical_key_value() {
        let state = crate::model::ModelState::init(toy_arch(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = rand_frame(&mut rng);
        let frames = vec![f.clone(), f.clone(), f.clone()];
        let term = stcs_term(&frames, 0, 2, &state, false).unwrap();
        let k = normalize_keys(&model::encode_key(&f, &state).unwrap());
        let j = best_match(&anchor_affinity(&k, &k).unwrap());
        let expect = pcl_loss(&k, &k, &j, false).unwrap();
        assert_eq!(term, expect);
    }

    #[test]
    fn stcs_accepts_extreme_anchor_positions() {
        let state = crate::model::ModelState::init(toy_arch(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames: Vec<Frame> = (0..5).map(|_| rand_frame(&mut rng)).collect();
        assert!(stcs_term(&frames, 1, 0, &state, false).is_ok());
        assert!(stcs_term(&frames, 1, 4, &state, false).is_ok());
        assert!(stcs_term(&frames, 1, 1, &state, false).is_err());
        assert!(stcs_term(&frames, 1, 2, &state, false).is_err());
    }

    #[test]
    fn stcs_term_gradients_match_finite_differences() {
        let arch = toy_arch();
        let state = crate::model::ModelState::init(arch, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frames: Vec<Frame> = (0..3).map(|_| rand_frame(&mut rng)).collect();
        // fixed match, extracted once, as in training
        let k_t = normalize_keys(&model::encode_key(&frames[0], &state).unwrap());
        let k_tau_plain = normalize_keys(&model::encode_key(&frames[2], &state).unwrap());
        let j_star = best_match(&anchor_affinity(&k_t, &k_tau_plain).unwrap());

        let build = |params: &[ArrayD<f64>]| {
            let mut st = state.clone();
            for (p, src) in st.params_mut().iter_mut().zip(params.iter()) {
                *p = src.clone();
            }
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &st);
            let f1 = model::frame_leaf(&mut tape, &frames[1]);
            let ftau = model::frame_leaf(&mut tape, &frames[2]);
            let k_t1_raw = model::key_head(&mut tape, &bound, f1);
            let k_tau_raw = model::key_head(&mut tape, &bound, ftau);
            let k_t1 = tape.row_l2_normalize(k_t1_raw);
            let k_tau = tape.row_l2_normalize(k_tau_raw);
            let l = pcl_loss_var(&mut tape, k_t1, k_tau, j_star.clone(), false);
            (tape, bound, l)
        };
        let (tape, bound, loss) = build(state.params());
        let grads = tape.backward(loss);
        // only key-encoder parameters receive gradient
        let analytic: Vec<ArrayD<f64>> = bound
            .vars
            .iter()
            .zip(state.params().iter())
            .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
            .collect();
        let numeric = numeric_grad_params(
            |params| {
                let (tape, _, l) = build(params);
                tape.value(l).as_slice().unwrap()[0]
            },
            state.params(),
            1e-5,
        );
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            assert_close_rel(a, n, 1e-4);
            // value encoder and decoder see zero gradient from this loss
            if i >= 6 {
                assert!(a.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn matching_path_carries_no_gradient() {
        // Changing frame t (hence the affinity) while keeping j_star fixed
        // leaves every parameter gradient bit-identical.
        let arch = toy_arch();
        let state = crate::model::ModelState::init(arch, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let frames: Vec<Frame> = (0..3).map(|_| rand_frame(&mut rng)).collect();
        let frame_t_alt = rand_frame(&mut rng);

        let grads_for = |frame_t: &Frame, j_fixed: Option<&[usize]>| {
            let j_star = match j_fixed {
                Some(j) => j.to_vec(),
                None => {
                    let k_t = model::encode_key(frame_t, &state).unwrap();
                    let k_tau = model::encode_key(&frames[2], &state).unwrap();
                    best_match(&anchor_affinity(&k_t, &k_tau).unwrap())
                }
            };
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &state);
            let f1 = model::frame_leaf(&mut tape, &frames[1]);
            let ftau = model::frame_leaf(&mut tape, &frames[2]);
            let k_t1_raw = model::key_head(&mut tape, &bound, f1);
            let k_tau_raw = model::key_head(&mut tape, &bound, ftau);
            let k_t1 = tape.row_l2_normalize(k_t1_raw);
            let k_tau = tape.row_l2_normalize(k_tau_raw);
            let l = pcl_loss_var(&mut tape, k_t1, k_tau, j_star.clone(), false);
            let g = tape.backward(l);
            (
                bound
                    .vars
                    .iter()
                    .zip(state.params().iter())
                    .map(|(v, p)| g.get_or_zeros(*v, p.shape()))
                    .collect::<Vec<_>>(),
                j_star,
            )
        };

        let (g_base, j_star) = grads_for(&frames[0], None);
        let (g_alt, _) = grads_for(&frame_t_alt, Some(&j_star));
        for (a, b) in g_base.iter().zip(g_alt.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sample_anchor_avoids_successive_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut seen_zero = false;
        let mut seen_last = false;
        for _ in 0..2000 {
            let (t, tau) = sample_anchor(8, &mut rng);
            assert!(t + 1 < 8);
            assert!(tau < 8);
            assert_ne!(tau, t);
            assert_ne!(tau, t + 1);
            seen_zero |= tau == 0;
            seen_last |= tau == 7;
        }
        assert!(seen_zero && seen_last);
    }
}
