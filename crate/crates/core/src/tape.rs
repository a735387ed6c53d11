//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! Ops append nodes to the tape; node indices (`Var`) only ever reference
//! earlier nodes, so tape order is a topological order and `backward`
//! visits nodes exactly once in reverse, accumulating gradients additively
//! across fan-out. Tapes are built, differentiated, read and dropped; there
//! is no higher-order differentiation.
//!
//! All arithmetic is f64, including accumulation in matmul/conv/reductions.
//! Every kernel uses a fixed iteration order, so results are reproducible
//! run to run.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[R,C] + [1,C]` row broadcast.
    AddRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Gelu(Var),
    Relu(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn leaf_owned(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is internally consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.nodes[v.0].shape.clone(), g.to_vec())
                .expect("grad matches node shape")
        })
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::BadShape {
                op,
                shape: s.clone(),
                why: "expected a 2-d tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: Var, b: Var, op_name: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::DimMismatch {
                op: op_name,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        self.push(data, shape, rg, Op::Scale(a, c))
    }

    /// `[R,C] + row [1,C]` (or `[C]`), broadcasting the row over all rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "add_row")?;
        let row_len = self.nodes[row.0].data.len();
        if row_len != c {
            return Err(Error::DimMismatch {
                op: "add_row",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[row.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[row.0].data[j];
            }
        }
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(data, vec![r, c], rg, Op::AddRow(a, row)))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::DimMismatch {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose(a)))
    }

    // ── nonlinearities / normalization ───────────────────────────────

    /// Numerically stable row softmax (row-max subtraction).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "softmax_rows")?;
        if c == 0 {
            return Err(Error::BadShape {
                op: "softmax_rows",
                shape: vec![r, c],
                why: "empty rows".into(),
            });
        }
        if !self.nodes[a.0].data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                out[j] = (row[j] - max).exp();
                sum += out[j];
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![r, c], rg, Op::SoftmaxRows(a)))
    }

    /// Layer normalization over the last axis, then affine (gain, bias).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::BadShape {
            op: "layer_norm",
            shape: shape.clone(),
            why: "zero-rank input".into(),
        })?;
        if d == 0 {
            return Err(Error::BadShape {
                op: "layer_norm",
                shape,
                why: "last axis must be >= 1".into(),
            });
        }
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.nodes[v.0].data.len() != d {
                return Err(Error::DimMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    left: shape.clone(),
                    right: self.nodes[v.0].shape.clone(),
                });
            }
        }
        let rows = self.nodes[x.0].data.len() / d;
        let mut data = vec![0.0; rows * d];
        {
            let src = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for i in 0..rows {
                let row = &src[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let istd = 1.0 / (var + eps).sqrt();
                let out = &mut data[i * d..(i + 1) * d];
                for j in 0..d {
                    out[j] = (row[j] - mean) * istd * g[j] + b[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(data, shape, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        self.push(data, shape, rg, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        self.push(data, shape, rg, Op::Relu(a))
    }

    // ── reductions / shape ───────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].data.iter().sum::<f64>();
        let rg = self.requires(a);
        self.push(vec![s], vec![1], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len().max(1);
        let s = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.requires(a);
        self.push(vec![s], vec![1], rg, Op::MeanAll(a))
    }

    /// Column means of a `[R,C]` tensor, producing `[1,C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "mean_rows")?;
        if r == 0 {
            return Err(Error::BadShape {
                op: "mean_rows",
                shape: vec![r, c],
                why: "no rows".into(),
            });
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![1, c], rg, Op::MeanRows(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                why: format!("incompatible with {} elements", self.nodes[a.0].data.len()),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.requires(a);
        Ok(self.push(data, shape, rg, Op::Reshape(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_rows",
                shape: vec![],
                why: "no inputs".into(),
            });
        }
        let (_, c0) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_rows")?;
            if c != c0 {
                return Err(Error::DimMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c0);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(data, vec![rows, c0], rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_cols",
                shape: vec![],
                why: "no inputs".into(),
            });
        }
        let (r0, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_cols")?;
            if r != r0 {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0; r0 * cols];
        let mut col_off = 0;
        for &p in parts {
            let (_, c) = self.rows_cols(p, "concat_cols")?;
            let src = &self.nodes[p.0].data;
            for i in 0..r0 {
                data[i * cols + col_off..i * cols + col_off + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            col_off += c;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(data, vec![r0, cols], rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "slice_rows")?;
        if lo >= hi || hi > r {
            return Err(Error::BadShape {
                op: "slice_rows",
                shape: vec![r, c],
                why: format!("row range {lo}..{hi} out of bounds"),
            });
        }
        let data = self.nodes[a.0].data[lo * c..hi * c].to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, vec![hi - lo, c], rg, Op::SliceRows(a, lo, hi)))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "slice_cols")?;
        if lo >= hi || hi > c {
            return Err(Error::BadShape {
                op: "slice_cols",
                shape: vec![r, c],
                why: format!("column range {lo}..{hi} out of bounds"),
            });
        }
        let w = hi - lo;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + lo..i * c + hi]);
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![r, w], rg, Op::SliceCols(a, lo, hi)))
    }

    // ── convolution ──────────────────────────────────────────────────

    /// 3-d cross-correlation. `x`: `[C_in,H,W,D]`, `w`: `[C_out,C_in,k,k,k]`,
    /// `b`: `[C_out]`. Output extent per axis: `(in + 2*pad - k)/stride + 1`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::BadShape {
                op: "conv3d",
                shape: xs,
                why: "input must be [C,H,W,D]".into(),
            });
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::BadShape {
                op: "conv3d",
                shape: ws,
                why: "kernel must be [C_out,C_in,k,k,k]".into(),
            });
        }
        if ws[1] != xs[0] {
            return Err(Error::DimMismatch {
                op: "conv3d",
                left: xs,
                right: ws,
            });
        }
        if self.nodes[b.0].data.len() != ws[0] {
            return Err(Error::DimMismatch {
                op: "conv3d bias",
                left: ws,
                right: self.nodes[b.0].shape.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv3d stride must be >= 1".into()));
        }
        let k = ws[2];
        let geom = ConvGeom::derive(&xs, k, stride, pad)?;
        let col = im2col(&self.nodes[x.0].data, &geom);
        let c_out = ws[0];
        let q = geom.cin * k * k * k;
        let p = geom.positions();
        let mut data = matmul_raw(&self.nodes[w.0].data, &col, c_out, q, p);
        for (o, bias) in self.nodes[b.0].data.iter().enumerate() {
            for v in data[o * p..(o + 1) * p].iter_mut() {
                *v += bias;
            }
        }
        let out_shape = vec![c_out, geom.ho, geom.wo, geom.d_o];
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(data, out_shape, rg, Op::Conv3d { x, w, b, stride, pad }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate the gradients of every `requires_grad` node reachable from
    /// `loss`, which must be a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
                why: "loss must be a scalar".into(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            // Taken during propagation and restored below so that every
            // visited node keeps a queryable gradient.
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(a, &g);
                    self.accum(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.requires(a) {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(gv, av)| gv * av)
                            .collect();
                        self.accum(b, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                    self.accum(a, &da);
                }
                Op::AddRow(a, row) => {
                    self.accum(a, &g);
                    if self.requires(row) {
                        let c = self.nodes[row.0].data.len();
                        let r = g.len() / c;
                        let mut drow = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                drow[j] += g[i * c + j];
                            }
                        }
                        self.accum(row, &drow);
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.requires(a) {
                        // da = g . b^T
                        let da = matmul_nt(&g, &self.nodes[b.0].data, m, n, k);
                        self.accum(a, &da);
                    }
                    if self.requires(b) {
                        // db = a^T . g
                        let db = matmul_tn(&self.nodes[a.0].data, &g, m, k, n);
                        self.accum(b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let (c, r) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            da[j * c + i] = g[i * r + j];
                        }
                    }
                    self.accum(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let s = &self.nodes[idx].data;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let srow = &s[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for j in 0..c {
                            da[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.accum(a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let rows = self.nodes[x.0].data.len() / d;
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gain.0].data;
                    let mut dx = vec![0.0; rows * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..rows {
                        let row = &xd[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let istd = 1.0 / (var + eps).sqrt();
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * istd;
                            let gh = grow[j] * gd[j];
                            sum_gh += gh;
                            sum_gh_xhat += gh * xhat;
                            dgain[j] += grow[j] * xhat;
                            dbias[j] += grow[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * istd;
                            let gh = grow[j] * gd[j];
                            dx[i * d + j] =
                                istd * (gh - sum_gh * inv_d - xhat * sum_gh_xhat * inv_d);
                        }
                    }
                    if self.requires(x) {
                        self.accum(x, &dx);
                    }
                    if self.requires(gain) {
                        self.accum(gain, &dgain);
                    }
                    if self.requires(bias) {
                        self.accum(bias, &dbias);
                    }
                }
                Op::Gelu(a) => {
                    let xd = &self.nodes[a.0].data;
                    let da: Vec<f64> = xd
                        .iter()
                        .zip(&g)
                        .map(|(&x, gv)| {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    self.accum(a, &da);
                }
                Op::Relu(a) => {
                    let xd = &self.nodes[a.0].data;
                    let da: Vec<f64> = xd
                        .iter()
                        .zip(&g)
                        .map(|(&x, gv)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accum(a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    self.accum(a, &da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].data.len().max(1);
                    let da = vec![g[0] / n as f64; self.nodes[a.0].data.len()];
                    self.accum(a, &da);
                }
                Op::MeanRows(a) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j] / r as f64;
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Reshape(a) => {
                    self.accum(a, &g);
                }
                Op::ConcatRows(parts) => {
                    let c = self.nodes[idx].shape[1];
                    let mut row_off = 0;
                    for p in parts {
                        let r = self.nodes[p.0].shape[0];
                        if self.requires(p) {
                            let dp = g[row_off * c..(row_off + r) * c].to_vec();
                            self.accum(p, &dp);
                        }
                        row_off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, cols) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let mut col_off = 0;
                    for p in parts {
                        let c = self.nodes[p.0].shape[1];
                        if self.requires(p) {
                            let mut dp = vec![0.0; r * c];
                            for i in 0..r {
                                dp[i * c..(i + 1) * c].copy_from_slice(
                                    &g[i * cols + col_off..i * cols + col_off + c],
                                );
                            }
                            self.accum(p, &dp);
                        }
                        col_off += c;
                    }
                }
                Op::SliceRows(a, lo, hi) => {
                    let c = self.nodes[a.0].shape[1];
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    da[lo * c..hi * c].copy_from_slice(&g);
                    self.accum(a, &da);
                }
                Op::SliceCols(a, lo, hi) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let w = hi - lo;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + lo..i * c + hi].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.accum(a, &da);
                }
                Op::Conv3d { x, w, b, stride, pad } => {
                    let xs = &self.nodes[x.0].shape;
                    let k = self.nodes[w.0].shape[2];
                    let c_out = self.nodes[w.0].shape[0];
                    let geom = ConvGeom::derive(xs, k, stride, pad)
                        .expect("geometry validated at forward time");
                    let q = geom.cin * k * k * k;
                    let p = geom.positions();
                    if self.requires(b) {
                        let mut db = vec![0.0; c_out];
                        for o in 0..c_out {
                            db[o] = g[o * p..(o + 1) * p].iter().sum();
                        }
                        self.accum(b, &db);
                    }
                    if self.requires(w) {
                        // dw = g_mat . col^T
                        let col = im2col(&self.nodes[x.0].data, &geom);
                        let dw = matmul_nt(&g, &col, c_out, p, q);
                        self.accum(w, &dw);
                    }
                    if self.requires(x) {
                        // dcol = w_mat^T . g_mat, then scatter back.
                        let dcol = matmul_tn(&self.nodes[w.0].data, &g, c_out, q, p);
                        let dx = col2im(&dcol, &geom);
                        self.accum(x, &dx);
                    }
                }
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

/// `C[m,n] = A[m,k] . B[k,n]`, f64 accumulation, fixed iteration order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

/// `C[m,k] = A[m,n] . B[k,n]^T`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += a_row[j] * b_row[j];
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// `C[k,n] = A[m,k]^T . B[m,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    d: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    d_o: usize,
}

impl ConvGeom {
    fn derive(xs: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let ext = |inp: usize| -> Result<usize> {
            let padded = inp + 2 * pad;
            if padded < k {
                return Err(Error::BadShape {
                    op: "conv3d",
                    shape: xs.to_vec(),
                    why: format!("kernel {k} exceeds padded extent {padded}"),
                });
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            d: xs[3],
            k,
            stride,
            pad,
            ho: ext(xs[1])?,
            wo: ext(xs[2])?,
            d_o: ext(xs[3])?,
        })
    }

    fn positions(&self) -> usize {
        self.ho * self.wo * self.d_o
    }
}

/// Unfold input patches into a `[C_in*k^3, positions]` matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s) = (g.k, g.stride);
    let p = g.positions();
    let mut col = vec![0.0; g.cin * k * k * k * p];
    let mut q = 0;
    for ci in 0..g.cin {
        let x_ch = &x[ci * g.h * g.w * g.d..(ci + 1) * g.h * g.w * g.d];
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let row = &mut col[q * p..(q + 1) * p];
                    let mut pos = 0;
                    for oh in 0..g.ho {
                        let ih = (oh * s + kh) as isize - g.pad as isize;
                        for ow in 0..g.wo {
                            let iw = (ow * s + kw) as isize - g.pad as isize;
                            let in_plane = ih >= 0
                                && (ih as usize) < g.h
                                && iw >= 0
                                && (iw as usize) < g.w;
                            for od in 0..g.d_o {
                                let id = (od * s + kd) as isize - g.pad as isize;
                                if in_plane && id >= 0 && (id as usize) < g.d {
                                    row[pos] = x_ch
                                        [(ih as usize * g.w + iw as usize) * g.d + id as usize];
                                }
                                pos += 1;
                            }
                        }
                    }
                    q += 1;
                }
            }
        }
    }
    col
}

/// Scatter-add a column-matrix gradient back to input layout.
fn col2im(dcol: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s) = (g.k, g.stride);
    let p = g.positions();
    let mut dx = vec![0.0; g.cin * g.h * g.w * g.d];
    let mut q = 0;
    for ci in 0..g.cin {
        let base = ci * g.h * g.w * g.d;
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    let row = &dcol[q * p..(q + 1) * p];
                    let mut pos = 0;
                    for oh in 0..g.ho {
                        let ih = (oh * s + kh) as isize - g.pad as isize;
                        for ow in 0..g.wo {
                            let iw = (ow * s + kw) as isize - g.pad as isize;
                            let in_plane = ih >= 0
                                && (ih as usize) < g.h
                                && iw >= 0
                                && (iw as usize) < g.w;
                            for od in 0..g.d_o {
                                let id = (od * s + kd) as isize - g.pad as isize;
                                if in_plane && id >= 0 && (id as usize) < g.d {
                                    dx[base
                                        + (ih as usize * g.w + iw as usize) * g.d
                                        + id as usize] += row[pos];
                                }
                                pos += 1;
                            }
                        }
                    }
                    q += 1;
                }
            }
        }
    }
    dx
}
