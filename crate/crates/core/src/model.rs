//! The matching-based segmentation backbone.
//!
//! Three stride-2 conv layers encode a frame into per-patch key vectors
//! (stride 8 total, so a 64x64 frame becomes an 8x8 patch grid). A second
//! encoder conditioned on the mask channel produces value vectors. Queries
//! read from a memory bank through a column-stochastic affinity matrix
//! (dot-product logits scaled by 1/sqrt(key_dim)), and a two-layer
//! upsampling decoder with a full-resolution skip connection turns the
//! read-out into per-pixel lesion probabilities.

use crate::autodiff::{Tape, Var};
use crate::types::{Config, Error, Frame, Mask, Result, VideoSample};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const KERNEL: usize = 3;
pub const CONV_PAD: usize = 1;

/// Backbone channel widths. `patch_stride` is fixed at 8 by the three
/// stride-2 layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub enc_ch1: usize,
    pub enc_ch2: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub dec_dim: usize,
    pub patch_stride: usize,
}

impl Arch {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            enc_ch1: cfg.enc_ch1,
            enc_ch2: cfg.enc_ch2,
            key_dim: cfg.key_dim,
            value_dim: cfg.value_dim,
            dec_dim: cfg.dec_dim,
            patch_stride: cfg.patch_stride,
        }
    }

    /// Widened variant for a heterogeneous student.
    pub fn widened(&self, mult: usize) -> Self {
        Self {
            enc_ch1: self.enc_ch1 * mult,
            enc_ch2: self.enc_ch2 * mult,
            key_dim: self.key_dim * mult,
            value_dim: self.value_dim * mult,
            dec_dim: self.dec_dim * mult,
            patch_stride: self.patch_stride,
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (c1, c2, ck, cv, dd) = (
            self.enc_ch1,
            self.enc_ch2,
            self.key_dim,
            self.value_dim,
            self.dec_dim,
        );
        let k = KERNEL;
        vec![
            ("key.c1.w".into(), vec![c1, 1, k, k]),
            ("key.c1.b".into(), vec![c1]),
            ("key.c2.w".into(), vec![c2, c1, k, k]),
            ("key.c2.b".into(), vec![c2]),
            ("key.c3.w".into(), vec![ck, c2, k, k]),
            ("key.c3.b".into(), vec![ck]),
            ("val.c1.w".into(), vec![c1, 2, k, k]),
            ("val.c1.b".into(), vec![c1]),
            ("val.c2.w".into(), vec![c2, c1, k, k]),
            ("val.c2.b".into(), vec![c2]),
            ("val.c3.w".into(), vec![cv, c2, k, k]),
            ("val.c3.b".into(), vec![cv]),
            ("dec.c1.w".into(), vec![dd, cv, k, k]),
            ("dec.c1.b".into(), vec![dd]),
            ("dec.c2.w".into(), vec![1, dd + 1, k, k]),
            ("dec.c2.b".into(), vec![1]),
        ]
    }
}

/// All learnable parameters plus bookkeeping. Single-writer: exactly one
/// trainer mutates it; inference borrows immutably.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub arch: Arch,
    params: Vec<ArrayD<f64>>,
    pub iteration: u64,
    pub seed: u64,
}

impl ModelState {
    /// He-initialized weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = crate::rng::derive(seed, &[crate::rng::purpose::INIT]);
        let params = arch
            .param_specs()
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".b") {
                    ArrayD::zeros(IxDyn(shape))
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).unwrap();
                    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng))
                }
            })
            .collect();
        Self {
            arch,
            params,
            iteration: 0,
            seed,
        }
    }

    /// All-zero parameters (linearity checks, tests).
    pub fn zeros(arch: Arch) -> Self {
        let params = arch
            .param_specs()
            .iter()
            .map(|(_, shape)| ArrayD::zeros(IxDyn(shape)))
            .collect();
        Self {
            arch,
            params,
            iteration: 0,
            seed: 0,
        }
    }

    pub fn params(&self) -> &[ArrayD<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn grid(&self, frame: &Frame) -> Result<(usize, usize)> {
        let s = self.arch.patch_stride;
        let (h, w) = (frame.height(), frame.width());
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "frame {h}x{w} not divisible by patch stride {s}"
            )));
        }
        Ok((h / s, w / s))
    }
}

// ── Checkpoint serialization ───────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"TSVOSCKP";
const CKPT_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config_hash: String,
    iteration: u64,
    seed: u64,
    arch: Arch,
    params: Vec<(String, Vec<usize>)>,
}

impl ModelState {
    /// Serialize to the checkpoint wire format: magic, JSON header, f64-LE
    /// parameter payload. Round-trips bit-exactly.
    pub fn to_bytes(&self, config_hash: &str) -> Vec<u8> {
        let header = CheckpointHeader {
            schema_version: CKPT_SCHEMA,
            config_hash: config_hash.to_string(),
            iteration: self.iteration,
            seed: self.seed,
            arch: self.arch,
            params: self
                .arch
                .param_specs()
                .into_iter()
                .map(|(n, s)| (n, s))
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize = self.params.iter().map(|p| p.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header_json.len() + payload_len);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for p in &self.params {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Deserialize a checkpoint; returns the state and the recorded config hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let fail = |msg: &str| Error::Value(format!("bad checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(fail("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(fail("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| fail(&format!("header parse: {e}")))?;
        if header.schema_version != CKPT_SCHEMA {
            return Err(fail(&format!(
                "schema version {} unsupported",
                header.schema_version
            )));
        }
        let mut off = 16 + hlen;
        let mut params = Vec::with_capacity(header.params.len());
        for (name, shape) in &header.params {
            let n: usize = shape.iter().product();
            if bytes.len() < off + n * 8 {
                return Err(fail(&format!("truncated payload at {name}")));
            }
            let mut vals = Vec::with_capacity(n);
            for i in 0..n {
                let s = off + i * 8;
                vals.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
            }
            off += n * 8;
            params.push(
                ArrayD::from_shape_vec(IxDyn(shape), vals)
                    .map_err(|e| fail(&format!("shape at {name}: {e}")))?,
            );
        }
        if off != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        let expected = header.arch.param_specs();
        for ((n, s), (en, es)) in header.params.iter().zip(expected.iter()) {
            if n != en || s != es {
                return Err(fail(&format!("param {n} does not match arch spec {en}")));
            }
        }
        Ok((
            Self {
                arch: header.arch,
                params,
                iteration: header.iteration,
                seed: header.seed,
            },
            header.config_hash,
        ))
    }
}

// ── Memory bank ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MemEntry {
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub pinned: bool,
}

/// Per-rollout store of past (key, value) features. The reference entry is
/// pinned; beyond capacity the oldest unpinned entry is evicted first.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    entries: Vec<MemEntry>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory capacity must be >= 1");
        Self {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn push_pinned(&mut self, key: Array2<f64>, value: Array2<f64>) {
        self.insert(MemEntry {
            key,
            value,
            pinned: true,
        });
    }

    pub fn push(&mut self, key: Array2<f64>, value: Array2<f64>) {
        self.insert(MemEntry {
            key,
            value,
            pinned: false,
        });
    }

    fn insert(&mut self, entry: MemEntry) {
        if self.entries.len() == self.capacity {
            match self.entries.iter().position(|e| !e.pinned) {
                Some(i) => {
                    self.entries.remove(i);
                }
                // every slot pinned: drop the incoming entry
                None => return,
            }
        }
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemEntry] {
        &self.entries
    }
}

// ── Tape-level graph builders (shared by inference and training) ──────────

/// Parameter leaves bound onto a tape, index-aligned with `ModelState::params`.
pub(crate) struct BoundParams {
    pub vars: Vec<Var>,
}

pub(crate) fn bind_params(tape: &mut Tape, state: &ModelState) -> BoundParams {
    BoundParams {
        vars: state.params.iter().map(|p| tape.leaf(p.clone())).collect(),
    }
}

fn conv_block(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize, relu: bool) -> Var {
    let y = tape.conv2d(x, w, b, stride, CONV_PAD);
    if relu {
        tape.relu(y)
    } else {
        y
    }
}

/// Key encoder: (1,H,W) frame -> (HW, key_dim) patch keys.
pub(crate) fn key_head(tape: &mut Tape, p: &BoundParams, frame: Var) -> Var {
    let v = &p.vars;
    let h1 = conv_block(tape, frame, v[0], v[1], 2, true);
    let h2 = conv_block(tape, h1, v[2], v[3], 2, true);
    let h3 = conv_block(tape, h2, v[4], v[5], 2, false);
    tape.chw_to_mat(h3)
}

/// Value encoder: frame (1,H,W) + mask channel (1,H,W) -> (HW, value_dim).
pub(crate) fn value_head(tape: &mut Tape, p: &BoundParams, frame: Var, mask: Var) -> Var {
    let v = &p.vars;
    let x = tape.concat_channels(frame, mask);
    let h1 = conv_block(tape, x, v[6], v[7], 2, true);
    let h2 = conv_block(tape, h1, v[8], v[9], 2, true);
    let h3 = conv_block(tape, h2, v[10], v[11], 2, false);
    tape.chw_to_mat(h3)
}

/// Affinity read-out: V_q = V_m · A with A column-stochastic over memory
/// positions, logits scaled by 1/sqrt(key_dim). Returns (V_q, A).
/// Public so verification code can differentiate through the read-out on
/// hand-built graphs.
pub fn read_head(
    tape: &mut Tape,
    k_q: Var,
    entries: &[(Var, Var)],
    key_dim: usize,
) -> (Var, Var) {
    assert!(!entries.is_empty(), "read_head requires memory entries");
    let keys: Vec<Var> = entries.iter().map(|(k, _)| *k).collect();
    let vals: Vec<Var> = entries.iter().map(|(_, v)| *v).collect();
    let k_stack = if keys.len() == 1 {
        keys[0]
    } else {
        tape.concat_rows(&keys)
    };
    let v_stack = if vals.len() == 1 {
        vals[0]
    } else {
        tape.concat_rows(&vals)
    };
    let logits = tape.matmul_bt(k_stack, k_q); // (M, HW)
    let scaled = tape.scale(logits, 1.0 / (key_dim as f64).sqrt());
    let affinity = tape.softmax_cols(scaled);
    let v_q = tape.matmul_at(affinity, v_stack); // (HW, value_dim)
    (v_q, affinity)
}

/// Decoder: read-out (HW, value_dim) + full-resolution skip frame -> (1,H,W)
/// sigmoid probabilities. The hidden conv runs at quarter resolution; the
/// final conv sees the skip frame at full resolution.
pub(crate) fn decode_head(
    tape: &mut Tape,
    p: &BoundParams,
    v_q: Var,
    skip: Var,
    grid_h: usize,
    grid_w: usize,
) -> Var {
    let v = &p.vars;
    let chw = tape.mat_to_chw(v_q, grid_h, grid_w);
    let up1 = tape.upsample_nearest(chw, 2);
    let d1 = conv_block(tape, up1, v[12], v[13], 1, true);
    let up2 = tape.upsample_nearest(d1, 4);
    let cat = tape.concat_channels(up2, skip);
    let logits = conv_block(tape, cat, v[14], v[15], 1, false);
    tape.sigmoid(logits)
}

pub(crate) fn frame_leaf(tape: &mut Tape, frame: &Frame) -> Var {
    let (h, w) = (frame.height(), frame.width());
    let arr = ArrayD::from_shape_vec(
        IxDyn(&[1, h, w]),
        frame.pixels().iter().cloned().collect(),
    )
    .unwrap();
    tape.leaf(arr)
}

pub(crate) fn map_leaf(tape: &mut Tape, map: &Array2<f64>) -> Var {
    let (h, w) = map.dim();
    let arr =
        ArrayD::from_shape_vec(IxDyn(&[1, h, w]), map.iter().cloned().collect()).unwrap();
    tape.leaf(arr)
}

fn var_to_mat(tape: &Tape, v: Var) -> Array2<f64> {
    tape.value(v)
        .to_owned()
        .into_dimensionality()
        .expect("2-d value")
}

pub(crate) fn var_to_map(tape: &Tape, v: Var) -> Array2<f64> {
    let val = tape.value(v);
    let s = val.shape();
    assert_eq!(s[0], 1, "expected single-channel map");
    Array2::from_shape_vec((s[1], s[2]), val.iter().cloned().collect()).unwrap()
}

// ── Public forward operations ──────────────────────────────────────────────

/// Per-patch key vectors for a frame: (HW, key_dim).
pub fn encode_key(frame: &Frame, state: &ModelState) -> Result<Array2<f64>> {
    state.grid(frame)?;
    let mut tape = Tape::new();
    let p = bind_params(&mut tape, state);
    let f = frame_leaf(&mut tape, frame);
    let k = key_head(&mut tape, &p, f);
    Ok(var_to_mat(&tape, k))
}

/// Mask-conditioned per-patch value vectors: (HW, value_dim).
pub fn encode_value(frame: &Frame, mask: &Mask, state: &ModelState) -> Result<Array2<f64>> {
    if mask.pixels().dim() != frame.pixels().dim() {
        return Err(Error::Shape(format!(
            "mask {:?} != frame {:?}",
            mask.pixels().dim(),
            frame.pixels().dim()
        )));
    }
    state.grid(frame)?;
    let mut tape = Tape::new();
    let p = bind_params(&mut tape, state);
    let f = frame_leaf(&mut tape, frame);
    let m = map_leaf(&mut tape, &mask.to_float());
    let v = value_head(&mut tape, &p, f, m);
    Ok(var_to_mat(&tape, v))
}

/// Read from the memory bank: returns (V_q of shape (HW, value_dim), A of
/// shape (N_mem·HW, HW)). Each column of A sums to 1.
pub fn memory_read(k_q: &Array2<f64>, bank: &MemoryBank) -> Result<(Array2<f64>, Array2<f64>)> {
    if bank.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let key_dim = k_q.dim().1;
    for e in bank.entries() {
        if e.key.dim().1 != key_dim {
            return Err(Error::Shape(format!(
                "memory key dim {} != query key dim {key_dim}",
                e.key.dim().1
            )));
        }
    }
    let mut tape = Tape::new();
    let kq = tape.leaf(k_q.clone().into_dyn());
    let entries: Vec<(Var, Var)> = bank
        .entries()
        .iter()
        .map(|e| {
            (
                tape.leaf(e.key.clone().into_dyn()),
                tape.leaf(e.value.clone().into_dyn()),
            )
        })
        .collect();
    let (v_q, a) = read_head(&mut tape, kq, &entries, key_dim);
    Ok((var_to_mat(&tape, v_q), var_to_mat(&tape, a)))
}

/// Decode a read-out into a probability map at full frame resolution.
pub fn decode(v_q: &Array2<f64>, skip: &Frame, state: &ModelState) -> Result<Array2<f64>> {
    let (gh, gw) = state.grid(skip)?;
    let (hw, cv) = v_q.dim();
    if hw != gh * gw || cv != state.arch.value_dim {
        return Err(Error::Shape(format!(
            "read-out {hw}x{cv} inconsistent with grid {gh}x{gw} and value_dim {}",
            state.arch.value_dim
        )));
    }
    let mut tape = Tape::new();
    let p = bind_params(&mut tape, state);
    let vq = tape.leaf(v_q.clone().into_dyn());
    let f = frame_leaf(&mut tape, skip);
    let probs = decode_head(&mut tape, &p, vq, f, gh, gw);
    Ok(var_to_map(&tape, probs))
}

/// encode_key -> memory_read -> decode, returning the intermediates needed
/// for consistency losses and memory updates: (probs, K_q, A).
pub fn segment_step(
    frame: &Frame,
    bank: &MemoryBank,
    state: &ModelState,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let k_q = encode_key(frame, state)?;
    let (v_q, a) = memory_read(&k_q, bank)?;
    let probs = decode(&v_q, frame, state)?;
    Ok((probs, k_q, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

/// Frame indices a rollout visits, in traversal order.
pub fn rollout_indices(t_len: usize, reference: usize, direction: Direction) -> Vec<usize> {
    match direction {
        Direction::Forward => (reference + 1..t_len).collect(),
        Direction::Reverse => (0..reference).rev().collect(),
    }
}

/// Sequentially segment the video from a reference (index, mask), growing
/// the memory bank with predicted-mask value entries every `memory_every`
/// frames. Returns one probability map per visited frame, in traversal
/// order, plus the final bank size (for schedule checks).
pub(crate) fn rollout_impl(
    video: &VideoSample,
    reference: (usize, &Mask),
    direction: Direction,
    state: &ModelState,
    memory_every: usize,
    capacity: usize,
) -> Result<(Vec<Array2<f64>>, usize)> {
    let (ref_idx, ref_mask) = reference;
    if ref_idx >= video.len() {
        return Err(Error::Index(format!(
            "reference index {ref_idx} out of range for T={}",
            video.len()
        )));
    }
    assert!(memory_every >= 1, "memory_every must be >= 1");
    let mut bank = MemoryBank::new(capacity);
    let ref_frame = &video.frames[ref_idx];
    bank.push_pinned(
        encode_key(ref_frame, state)?,
        encode_value(ref_frame, ref_mask, state)?,
    );

    let mut maps = Vec::new();
    for (n, idx) in rollout_indices(video.len(), ref_idx, direction)
        .into_iter()
        .enumerate()
    {
        let frame = &video.frames[idx];
        let (probs, k_q, _) = segment_step(frame, &bank, state)?;
        if (n + 1) % memory_every == 0 {
            let v = encode_value_soft(frame, &probs, state)?;
            bank.push(k_q, v);
        }
        maps.push(probs);
    }
    Ok((maps, bank.len()))
}

pub fn rollout(
    video: &VideoSample,
    reference: (usize, &Mask),
    direction: Direction,
    state: &ModelState,
    memory_every: usize,
    capacity: usize,
) -> Result<Vec<Array2<f64>>> {
    rollout_impl(video, reference, direction, state, memory_every, capacity).map(|(m, _)| m)
}

/// Value encoding conditioned on a soft (probability) mask channel.
pub(crate) fn encode_value_soft(
    frame: &Frame,
    probs: &Array2<f64>,
    state: &ModelState,
) -> Result<Array2<f64>> {
    if probs.dim() != frame.pixels().dim() {
        return Err(Error::Shape("probs shape != frame shape".into()));
    }
    state.grid(frame)?;
    let mut tape = Tape::new();
    let p = bind_params(&mut tape, state);
    let f = frame_leaf(&mut tape, frame);
    let m = map_leaf(&mut tape, probs);
    let v = value_head(&mut tape, &p, f, m);
    Ok(var_to_mat(&tape, v))
}
