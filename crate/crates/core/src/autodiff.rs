//! Minimal reverse-mode tape over `ndarray` values with exactly the
//! operations the segmentation backbone and its losses need.
//!
//! Values are eagerly computed f64 dynamic arrays; `backward` walks the tape
//! in reverse and accumulates gradients per node. Shape misuse is a
//! programmer error and panics; callers validate domain inputs first.

use ndarray::{ArrayD, ArrayViewD, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    ChwToMat {
        x: usize,
    },
    MatToChw {
        x: usize,
        h: usize,
        w: usize,
    },
    /// a (m,k), b (n,k) -> a · bᵀ (m,n)
    MatMulBT {
        a: usize,
        b: usize,
    },
    /// a (k,m), b (k,n) -> aᵀ · b (m,n)
    MatMulAT {
        a: usize,
        b: usize,
    },
    SoftmaxCols {
        x: usize,
    },
    SoftmaxRows {
        x: usize,
    },
    RowLogSumExp {
        x: usize,
    },
    GatherPerRow {
        x: usize,
        idx: Vec<usize>,
    },
    /// Each row scaled to unit L2 norm (plus a small epsilon).
    RowL2Norm {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Ln {
        x: usize,
    },
    Neg {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    /// Mean binary cross-entropy against a constant target, probs clamped to
    /// [eps, 1-eps].
    Bce {
        pred: usize,
        target: ArrayD<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of its shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

pub const BCE_EPS: f64 = 1e-7;
pub const ROW_NORM_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|&v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|&v| sigmoid(v));
        self.push(out, Op::Sigmoid { x: x.0 })
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv);
        let mut out = ArrayD::zeros(IxDyn(&[c, h * factor, w * factor]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let (oh, ow) = (h * factor, w * factor);
            for ci in 0..c {
                for oy in 0..oh {
                    let iy = oy / factor;
                    let src = ci * h * w + iy * w;
                    let dst = ci * oh * ow + oy * ow;
                    for ox in 0..ow {
                        os[dst + ox] = xs[src + ox / factor];
                    }
                }
            }
        }
        self.push(out, Op::UpsampleNearest { x: x.0, factor })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ca, h, w) = dims3(av);
        let (cb, hb, wb) = dims3(bv);
        assert_eq!((h, w), (hb, wb), "concat_channels spatial mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[ca + cb, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            os[..ca * h * w].copy_from_slice(av.as_slice().unwrap());
            os[ca * h * w..].copy_from_slice(bv.as_slice().unwrap());
        }
        self.push(out, Op::ConcatChannels { a: a.0, b: b.0 })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let n = self.nodes[xs[0].0].value.shape()[1];
        let m_total: usize = xs.iter().map(|v| self.nodes[v.0].value.shape()[0]).sum();
        let mut out = ArrayD::zeros(IxDyn(&[m_total, n]));
        {
            let os = out.as_slice_mut().unwrap();
            let mut off = 0;
            for v in xs {
                let val = &self.nodes[v.0].value;
                assert_eq!(val.shape()[1], n, "concat_rows width mismatch");
                let len = val.len();
                os[off..off + len].copy_from_slice(val.as_slice().unwrap());
                off += len;
            }
        }
        self.push(
            out,
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        )
    }

    /// (C,H,W) -> (H·W, C); patch i = row-major spatial index.
    pub fn chw_to_mat(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv);
        let hw = h * w;
        let mut out = ArrayD::zeros(IxDyn(&[hw, c]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for i in 0..hw {
                    os[i * c + ci] = xs[ci * hw + i];
                }
            }
        }
        self.push(out, Op::ChwToMat { x: x.0 })
    }

    /// (H·W, C) -> (C,H,W); inverse of `chw_to_mat`.
    pub fn mat_to_chw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (hw, c) = dims2(xv);
        assert_eq!(hw, h * w, "mat_to_chw size mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for i in 0..hw {
                    os[ci * hw + i] = xs[i * c + ci];
                }
            }
        }
        self.push(out, Op::MatToChw { x: x.0, h, w })
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let av = to2(&self.nodes[a.0].value);
        let bv = to2(&self.nodes[b.0].value);
        assert_eq!(av.shape()[1], bv.shape()[1], "matmul_bt inner dim");
        let out = av.dot(&bv.t());
        self.push(out.into_dyn(), Op::MatMulBT { a: a.0, b: b.0 })
    }

    pub fn matmul_at(&mut self, a: Var, b: Var) -> Var {
        let av = to2(&self.nodes[a.0].value);
        let bv = to2(&self.nodes[b.0].value);
        assert_eq!(av.shape()[0], bv.shape()[0], "matmul_at inner dim");
        let out = av.t().dot(&bv);
        self.push(out.into_dyn(), Op::MatMulAT { a: a.0, b: b.0 })
    }

    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = dims2(xv);
        let mut out = ArrayD::zeros(IxDyn(&[m, n]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for j in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..m {
                    mx = mx.max(xs[i * n + j]);
                }
                let mut z = 0.0;
                for i in 0..m {
                    let e = (xs[i * n + j] - mx).exp();
                    os[i * n + j] = e;
                    z += e;
                }
                for i in 0..m {
                    os[i * n + j] /= z;
                }
            }
        }
        self.push(out, Op::SoftmaxCols { x: x.0 })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = dims2(xv);
        let mut out = ArrayD::zeros(IxDyn(&[m, n]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for i in 0..m {
                let row = &xs[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    os[i * n + j] = e;
                    z += e;
                }
                for j in 0..n {
                    os[i * n + j] /= z;
                }
            }
        }
        self.push(out, Op::SoftmaxRows { x: x.0 })
    }

    pub fn row_logsumexp(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = dims2(xv);
        let mut out = ArrayD::zeros(IxDyn(&[m]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for i in 0..m {
                let row = &xs[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                os[i] = mx + z.ln();
            }
        }
        self.push(out, Op::RowLogSumExp { x: x.0 })
    }

    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = dims2(xv);
        let mut out = ArrayD::zeros(IxDyn(&[m, n]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for i in 0..m {
                let row = &xs[i * n..(i + 1) * n];
                let norm = (row.iter().map(|v| v * v).sum::<f64>() + ROW_NORM_EPS).sqrt();
                for j in 0..n {
                    os[i * n + j] = row[j] / norm;
                }
            }
        }
        self.push(out, Op::RowL2Norm { x: x.0 })
    }

    pub fn gather_per_row(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        let (m, n) = dims2(xv);
        assert_eq!(idx.len(), m, "gather index count");
        let mut out = ArrayD::zeros(IxDyn(&[m]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for i in 0..m {
                assert!(idx[i] < n, "gather index out of range");
                os[i] = xs[i * n + idx[i]];
            }
        }
        self.push(out, Op::GatherPerRow { x: x.0, idx })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.exp());
        self.push(out, Op::Exp { x: x.0 })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.ln());
        self.push(out, Op::Ln { x: x.0 })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| -v);
        self.push(out, Op::Neg { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(out, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(out, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(out, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * c);
        self.push(out, Op::Scale { x: x.0, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(scalar(s), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.sum() / v.len() as f64;
        self.push(scalar(s), Op::Mean { x: x.0 })
    }

    pub fn bce(&mut self, pred: Var, target: ArrayD<f64>) -> Var {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.shape(), target.shape(), "bce shape mismatch");
        let n = pv.len() as f64;
        let mut acc = 0.0;
        for (&p, &t) in pv.iter().zip(target.iter()) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        self.push(scalar(acc / n), Op::Bce { pred: pred.0, target })
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv2d_bwd(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &gout,
                        *stride,
                        *pad,
                    );
                    accum(&mut grads, *x, gx);
                    accum(&mut grads, *w, gw);
                    accum(&mut grads, *b, gb);
                }
                Op::Relu { x } => {
                    let mut g = gout;
                    for (gv, &xv) in g.iter_mut().zip(self.nodes[*x].value.iter()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accum(&mut grads, *x, g);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].value;
                    let g = &gout * &y.map(|&v| v * (1.0 - v));
                    accum(&mut grads, *x, g);
                }
                Op::UpsampleNearest { x, factor } => {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = dims3(xv);
                    let f = *factor;
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    {
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        let (oh, ow) = (h * f, w * f);
                        for ci in 0..c {
                            for oy in 0..oh {
                                let base_o = ci * oh * ow + oy * ow;
                                let base_i = ci * h * w + (oy / f) * w;
                                for ox in 0..ow {
                                    gxs[base_i + ox / f] += gs[base_o + ox];
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::ConcatChannels { a, b } => {
                    let (ca, h, w) = dims3(&self.nodes[*a].value);
                    let len_a = ca * h * w;
                    let gs = gout.as_slice().unwrap();
                    let ga = ArrayD::from_shape_vec(
                        self.nodes[*a].value.raw_dim(),
                        gs[..len_a].to_vec(),
                    )
                    .unwrap();
                    let gb = ArrayD::from_shape_vec(
                        self.nodes[*b].value.raw_dim(),
                        gs[len_a..].to_vec(),
                    )
                    .unwrap();
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::ConcatRows { xs } => {
                    let gs = gout.as_slice().unwrap();
                    let mut off = 0;
                    for &xi in xs {
                        let len = self.nodes[xi].value.len();
                        let g = ArrayD::from_shape_vec(
                            self.nodes[xi].value.raw_dim(),
                            gs[off..off + len].to_vec(),
                        )
                        .unwrap();
                        off += len;
                        accum(&mut grads, xi, g);
                    }
                }
                Op::ChwToMat { x } => {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = dims3(xv);
                    let hw = h * w;
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    {
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        for ci in 0..c {
                            for p in 0..hw {
                                gxs[ci * hw + p] = gs[p * c + ci];
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::MatToChw { x, h, w } => {
                    let xv = &self.nodes[*x].value;
                    let (hw, c) = dims2(xv);
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    {
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        let hw_check = h * w;
                        debug_assert_eq!(hw, hw_check);
                        for ci in 0..c {
                            for p in 0..hw {
                                gxs[p * c + ci] = gs[ci * hw + p];
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::MatMulBT { a, b } => {
                    let av = to2(&self.nodes[*a].value);
                    let bv = to2(&self.nodes[*b].value);
                    let g = to2(&gout);
                    accum(&mut grads, *a, g.dot(&bv).into_dyn());
                    accum(&mut grads, *b, g.t().dot(&av).into_dyn());
                }
                Op::MatMulAT { a, b } => {
                    let av = to2(&self.nodes[*a].value);
                    let bv = to2(&self.nodes[*b].value);
                    let g = to2(&gout);
                    accum(&mut grads, *a, bv.dot(&g.t()).into_dyn());
                    accum(&mut grads, *b, av.dot(&g).into_dyn());
                }
                Op::SoftmaxCols { x } => {
                    let y = &self.nodes[i].value;
                    let (m, n) = dims2(y);
                    let mut gx = ArrayD::zeros(y.raw_dim());
                    {
                        let ys = y.as_slice().unwrap();
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        for j in 0..n {
                            let mut dot = 0.0;
                            for k in 0..m {
                                dot += gs[k * n + j] * ys[k * n + j];
                            }
                            for k in 0..m {
                                gxs[k * n + j] = ys[k * n + j] * (gs[k * n + j] - dot);
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.nodes[i].value;
                    let (m, n) = dims2(y);
                    let mut gx = ArrayD::zeros(y.raw_dim());
                    {
                        let ys = y.as_slice().unwrap();
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        for r in 0..m {
                            let yr = &ys[r * n..(r + 1) * n];
                            let gr = &gs[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                gxs[r * n + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::RowLogSumExp { x } => {
                    let xv = &self.nodes[*x].value;
                    let y = &self.nodes[i].value;
                    let (m, n) = dims2(xv);
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    {
                        let xs = xv.as_slice().unwrap();
                        let ys = y.as_slice().unwrap();
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        for r in 0..m {
                            for j in 0..n {
                                gxs[r * n + j] = gs[r] * (xs[r * n + j] - ys[r]).exp();
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::RowL2Norm { x } => {
                    let xv = &self.nodes[*x].value;
                    let (m, n) = dims2(xv);
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    {
                        let xs = xv.as_slice().unwrap();
                        let ys = self.nodes[i].value.as_slice().unwrap();
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        for r in 0..m {
                            let row = &xs[r * n..(r + 1) * n];
                            let norm =
                                (row.iter().map(|v| v * v).sum::<f64>() + ROW_NORM_EPS).sqrt();
                            let yrow = &ys[r * n..(r + 1) * n];
                            let grow = &gs[r * n..(r + 1) * n];
                            let dot: f64 =
                                grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                gxs[r * n + j] = (grow[j] - yrow[j] * dot) / norm;
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::GatherPerRow { x, idx } => {
                    let xv = &self.nodes[*x].value;
                    let (_, n) = dims2(xv);
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    {
                        let gs = gout.as_slice().unwrap();
                        let gxs = gx.as_slice_mut().unwrap();
                        for (r, &j) in idx.iter().enumerate() {
                            gxs[r * n + j] = gs[r];
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::Exp { x } => {
                    let g = &gout * &self.nodes[i].value;
                    accum(&mut grads, *x, g);
                }
                Op::Ln { x } => {
                    let g = &gout / &self.nodes[*x].value;
                    accum(&mut grads, *x, g);
                }
                Op::Neg { x } => {
                    accum(&mut grads, *x, gout.map(|v| -v));
                }
                Op::Add { a, b } => {
                    accum(&mut grads, *a, gout.clone());
                    accum(&mut grads, *b, gout);
                }
                Op::Sub { a, b } => {
                    accum(&mut grads, *a, gout.clone());
                    accum(&mut grads, *b, gout.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let ga = &gout * &self.nodes[*b].value;
                    let gb = &gout * &self.nodes[*a].value;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Scale { x, c } => {
                    accum(&mut grads, *x, gout.map(|v| v * c));
                }
                Op::Sum { x } => {
                    let g0 = gout.as_slice().unwrap()[0];
                    let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), g0);
                    accum(&mut grads, *x, gx);
                }
                Op::Mean { x } => {
                    let n = self.nodes[*x].value.len() as f64;
                    let g0 = gout.as_slice().unwrap()[0] / n;
                    let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), g0);
                    accum(&mut grads, *x, gx);
                }
                Op::Bce { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let n = pv.len() as f64;
                    let g0 = gout.as_slice().unwrap()[0];
                    let mut gx = ArrayD::zeros(pv.raw_dim());
                    for ((gv, &p), &t) in gx.iter_mut().zip(pv.iter()).zip(target.iter()) {
                        if p > BCE_EPS && p < 1.0 - BCE_EPS {
                            *gv = g0 * (p - t) / (p * (1.0 - p)) / n;
                        }
                    }
                    accum(&mut grads, *pred, gx);
                }
            }
        }
        Gradients { grads }
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accum(grads: &mut [Option<ArrayD<f64>>], idx: usize, g: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn dims3(a: &ArrayD<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected 3-d array, got {s:?}");
    (s[0], s[1], s[2])
}

fn dims2(a: &ArrayD<f64>) -> (usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 2, "expected 2-d array, got {s:?}");
    (s[0], s[1])
}

fn to2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("2-d array")
}

/// Valid output range along one axis so the input index oy*stride + k - pad
/// stays inside [0, in_len).
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize, isize) {
    let shift = k as isize - pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize + stride - 1) / stride
    };
    let hi_num = in_len as isize - 1 - shift;
    if hi_num < 0 {
        return (1, 0, shift); // empty
    }
    let hi = ((hi_num as usize) / stride).min(out_len - 1);
    (lo, hi, shift)
}

fn conv2d_fwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (ci, h, wd) = dims3(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4);
    let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(ci, wci, "conv channel mismatch");
    assert_eq!(b.len(), co);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = ArrayD::zeros(IxDyn(&[co, oh, ow]));
    let xs = x.as_slice().unwrap();
    let wsl = w.as_slice().unwrap();
    let bs = b.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();

    for oc in 0..co {
        let base = oc * oh * ow;
        os[base..base + oh * ow].fill(bs[oc]);
        for ic in 0..ci {
            for ky in 0..kh {
                let (oy_lo, oy_hi, sy) = valid_range(oh, h, stride, ky, pad);
                for kx in 0..kw {
                    let wv = wsl[((oc * ci + ic) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi, sx) = valid_range(ow, wd, stride, kx, pad);
                    if oy_lo > oy_hi || ox_lo > ox_hi {
                        continue;
                    }
                    let n = ox_hi - ox_lo + 1;
                    for oy in oy_lo..=oy_hi {
                        let iy = (oy * stride) as isize + sy;
                        let ix0 = (ox_lo * stride) as isize + sx;
                        let xrow = ic * h * wd + iy as usize * wd + ix0 as usize;
                        let orow = base + oy * ow + ox_lo;
                        let orng = &mut os[orow..orow + n];
                        if stride == 1 {
                            for (o, &xv) in orng.iter_mut().zip(&xs[xrow..xrow + n]) {
                                *o += wv * xv;
                            }
                        } else {
                            for (o, &xv) in orng.iter_mut().zip(xs[xrow..].iter().step_by(stride))
                            {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_bwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (ci, h, wd) = dims3(x);
    let ws = w.shape();
    let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (_, oh, ow) = dims3(gout);
    let mut gx = ArrayD::zeros(x.raw_dim());
    let mut gw = ArrayD::zeros(w.raw_dim());
    let mut gb = ArrayD::zeros(IxDyn(&[co]));

    let xs = x.as_slice().unwrap();
    let wsl = w.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    {
        let gxs = gx.as_slice_mut().unwrap();
        let gws = gw.as_slice_mut().unwrap();
        let gbs = gb.as_slice_mut().unwrap();

        for oc in 0..co {
            let base = oc * oh * ow;
            let mut bacc = 0.0;
            for v in &gs[base..base + oh * ow] {
                bacc += v;
            }
            gbs[oc] = bacc;
            for ic in 0..ci {
                for ky in 0..kh {
                    let (oy_lo, oy_hi, sy) = valid_range(oh, h, stride, ky, pad);
                    for kx in 0..kw {
                        let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let wv = wsl[widx];
                        let (ox_lo, ox_hi, sx) = valid_range(ow, wd, stride, kx, pad);
                        let mut wacc = 0.0;
                        if oy_lo <= oy_hi && ox_lo <= ox_hi {
                            let n = ox_hi - ox_lo + 1;
                            for oy in oy_lo..=oy_hi {
                                let iy = (oy * stride) as isize + sy;
                                let ix0 = (ox_lo * stride) as isize + sx;
                                let xrow = ic * h * wd + iy as usize * wd + ix0 as usize;
                                let orow = base + oy * ow + ox_lo;
                                let grow = &gs[orow..orow + n];
                                if stride == 1 {
                                    let xr = &xs[xrow..xrow + n];
                                    let gxr = &mut gxs[xrow..xrow + n];
                                    for ((gxv, &xv), &g) in
                                        gxr.iter_mut().zip(xr).zip(grow.iter())
                                    {
                                        wacc += g * xv;
                                        *gxv += wv * g;
                                    }
                                } else {
                                    let xr = xs[xrow..].iter().step_by(stride);
                                    let gxr = gxs[xrow..].iter_mut().step_by(stride);
                                    for ((gxv, &xv), &g) in gxr.zip(xr).zip(grow.iter()) {
                                        wacc += g * xv;
                                        *gxv += wv * g;
                                    }
                                }
                            }
                        }
                        gws[widx] = wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
