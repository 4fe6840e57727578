//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every node that depends on a trainable leaf.

use std::cell::RefCell;

use rustfft::num_complex::Complex32;

use super::kernels::{self, MatView, MatViewMut, Stft};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range of a packed batch that attends only within itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    MulScalar(Var, Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MeanRows(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Mgu {
        p: Var,
        uf: Var,
        uh: Var,
        gates: Vec<f32>,
        cands: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f32>,
    },
    StftMag {
        x: Var,
        fft: usize,
        hop: usize,
        spectra: Vec<Complex32>,
    },
    L1Loss(Var, Var),
    MseLoss(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn leaf(&self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, true)
    }

    /// A constant: gradients never flow into it.
    pub fn constant(&self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn with_data<R>(&self, v: Var, f: impl FnOnce(&[f32]) -> R) -> R {
        f(self.nodes.borrow()[v.0].value.data())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes.borrow()[v.0].value.dims2()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::matmul(nodes[a.0].value.data(), m, k, nodes[b.0].value.data(), n)
        };
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            self.rg(&[a, b]),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let out = self.with_data(a, |d| kernels::transpose(d, m, n));
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            Op::Transpose(a),
            self.rg(&[a]),
        ))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), self.rg(&[a, b])))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let t = {
            let nodes = self.nodes.borrow();
            let r = nodes[row.0].value.data();
            if r.len() != n {
                return Err(Error::shape("add_row", format!("[{m},{n}] + [{}]", r.len())));
            }
            let mut data = nodes[a.0].value.data().to_vec();
            for chunk in data.chunks_mut(n) {
                chunk.iter_mut().zip(r).for_each(|(x, y)| *x += y);
            }
            Tensor::new(nodes[a.0].value.shape().to_vec(), data)?
        };
        Ok(self.push(t, Op::AddRow(a, row), self.rg(&[a, row])))
    }

    fn unary(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        let data = t.data().iter().map(|x| f(*x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same length")
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        let t = self.unary(a, |x| x * c);
        self.push(t, Op::Scale(a, c), self.rg(&[a]))
    }

    /// Multiplies every element by a trainable scalar `s` (shape `[1]`).
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let sv = {
            let nodes = self.nodes.borrow();
            if nodes[s.0].value.len() != 1 {
                return Err(Error::shape("mul_scalar", "scalar must have one element"));
            }
            nodes[s.0].value.data()[0]
        };
        let t = self.unary(a, |x| x * sv);
        Ok(self.push(t, Op::MulScalar(a, s), self.rg(&[a, s])))
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.unary(a, f32::exp);
        self.push(t, Op::Exp(a), self.rg(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let t = self.unary(a, f32::tanh);
        self.push(t, Op::Tanh(a), self.rg(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let t = self.unary(a, kernels::sigmoid);
        self.push(t, Op::Sigmoid(a), self.rg(&[a]))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let t = self.unary(a, kernels::gelu);
        self.push(t, Op::Gelu(a), self.rg(&[a]))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let g = nodes[gamma.0].value.data();
            let b = nodes[beta.0].value.data();
            if g.len() != n || b.len() != n {
                return Err(Error::shape("layer_norm", format!("width {n}, gamma {} beta {}", g.len(), b.len())));
            }
            let xd = nodes[x.0].value.data();
            let mut out = vec![0.0; m * n];
            let mut xhat = vec![0.0; m * n];
            let mut rstd = vec![0.0; m];
            for r in 0..m {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps as f64).sqrt();
                rstd[r] = rs as f32;
                for c in 0..n {
                    let h = ((row[c] as f64 - mean) * rs) as f32;
                    xhat[r * n + c] = h;
                    out[r * n + c] = h * g[c] + b[c];
                }
            }
            (out, xhat, rstd)
        };
        let shape = self.shape(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            self.rg(&[x, gamma, beta]),
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        let mut t = self.value(x);
        for row in t.data_mut().chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        Ok(self.push(t, Op::Softmax(x), self.rg(&[x])))
    }

    /// Selects rows of `x` (rows may repeat).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let data = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut data = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                if i >= m {
                    return Err(Error::OutOfRange {
                        what: "row",
                        index: i,
                        limit: m,
                    });
                }
                data.extend_from_slice(&xd[i * n..(i + 1) * n]);
            }
            data
        };
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            self.rg(&[x]),
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let (_, n) = self.dims2(parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let (m, c) = nodes[p.0].value.dims2()?;
                if c != n {
                    return Err(Error::shape("concat_rows", format!("width {c} vs {n}")));
                }
                rows += m;
                data.extend_from_slice(nodes[p.0].value.data());
            }
        }
        Ok(self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            self.rg(parts),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), self.rg(&[x])))
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if m == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let data = self.with_data(x, |d| {
            let mut acc = vec![0.0f64; n];
            for row in d.chunks(n) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
            }
            acc.into_iter().map(|a| (a / m as f64) as f32).collect()
        });
        Ok(self.push(Tensor::new(vec![1, n], data)?, Op::MeanRows(x), self.rg(&[x])))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        let mut t = self.value(x);
        let mut norms = Vec::new();
        for row in t.data_mut().chunks_mut(n) {
            let norm = (row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() + 1e-12).sqrt() as f32;
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push(t, Op::L2Normalize { x, norms }, self.rg(&[x])))
    }

    /// Mean negative log-likelihood over rows that carry a target.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.dims2(logits)?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", format!("{m} rows, {} targets", targets.len())));
        }
        let (loss, probs, count) = self.with_data(logits, |d| ce_forward(d, v, targets))?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            self.rg(&[logits]),
        ))
    }

    /// 1-D convolution of `x: [c_in, len]` with `w: [c_out, c_in, kernel]`.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, len) = self.dims2(x)?;
        let ws = self.shape(w);
        let [c_out, wc_in, kernel] = ws[..] else {
            return Err(Error::shape("conv1d", format!("weight rank {}", ws.len())));
        };
        if wc_in != c_in || self.nodes.borrow()[b.0].value.len() != c_out {
            return Err(Error::shape("conv1d", format!("x [{c_in},{len}] w {ws:?}")));
        }
        let out_len = kernels::conv_out_len(len, kernel, stride, pad)
            .ok_or_else(|| Error::shape("conv1d", format!("input length {len} shorter than kernel {kernel}")))?;
        let geom = ConvGeom {
            c_in,
            c_out,
            len,
            kernel,
            stride,
            pad,
            out_len,
        };
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let cols = kernels::im2col(nodes[x.0].value.data(), c_in, len, kernel, stride, pad, out_len);
            let mut out = kernels::matmul(nodes[w.0].value.data(), c_out, c_in * kernel, &cols, out_len);
            let bd = nodes[b.0].value.data();
            for (co, row) in out.chunks_mut(out_len).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[co]);
            }
            (out, cols)
        };
        Ok(self.push(
            Tensor::new(vec![c_out, out_len], out)?,
            Op::Conv1d { x, w, b, geom, cols },
            self.rg(&[x, w, b]),
        ))
    }

    /// Transposed 1-D convolution of `x: [c_in, len]` with `w: [c_in, c_out, kernel]`.
    pub fn conv_transpose1d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, len) = self.dims2(x)?;
        let ws = self.shape(w);
        let [wc_in, c_out, kernel] = ws[..] else {
            return Err(Error::shape("conv_transpose1d", format!("weight rank {}", ws.len())));
        };
        if wc_in != c_in || self.nodes.borrow()[b.0].value.len() != c_out {
            return Err(Error::shape("conv_transpose1d", format!("x [{c_in},{len}] w {ws:?}")));
        }
        let out_len = kernels::conv_transpose_out_len(len, kernel, stride, pad)
            .filter(|l| *l > 0)
            .ok_or_else(|| Error::shape("conv_transpose1d", "empty output"))?;
        let geom = ConvGeom {
            c_in,
            c_out,
            len,
            kernel,
            stride,
            pad,
            out_len,
        };
        let out = {
            let nodes = self.nodes.borrow();
            // z = W^T x : [c_out*kernel, len]
            let wd = nodes[w.0].value.data();
            let mut z = vec![0.0; c_out * kernel * len];
            kernels::gemm(
                MatView::transposed(wd, c_in, c_out * kernel),
                MatView::row_major(nodes[x.0].value.data(), c_in, len),
                MatViewMut::row_major(&mut z, c_out * kernel, len),
                0.0,
            );
            let mut out = vec![0.0; c_out * out_len];
            kernels::col2im(&z, c_out, out_len, kernel, stride, pad, len, &mut out);
            let bd = nodes[b.0].value.data();
            for (co, row) in out.chunks_mut(out_len).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[co]);
            }
            out
        };
        Ok(self.push(
            Tensor::new(vec![c_out, out_len], out)?,
            Op::ConvTranspose1d { x, w, b, geom },
            self.rg(&[x, w, b]),
        ))
    }

    /// Minimal gated recurrent unit scanned over time with a zero initial state.
    ///
    /// `p: [T, 2H]` holds the input projections (gate half first, candidate
    /// half second); `uf`, `uh` are the `[H,H]` recurrent weights.
    ///
    /// ```text
    /// f_t = sigmoid(p_f + h_{t-1} Uf)
    /// c_t = tanh(p_c + (f_t * h_{t-1}) Uh)
    /// h_t = (1 - f_t) * h_{t-1} + f_t * c_t
    /// ```
    pub fn mgu(&self, p: Var, uf: Var, uh: Var) -> Result<Var> {
        let (t_len, two_h) = self.dims2(p)?;
        let h = two_h / 2;
        if two_h % 2 != 0 || self.dims2(uf)? != (h, h) || self.dims2(uh)? != (h, h) {
            return Err(Error::shape("mgu", format!("p [{t_len},{two_h}]")));
        }
        let (out, gates, cands) = {
            let nodes = self.nodes.borrow();
            let pd = nodes[p.0].value.data();
            let ufd = nodes[uf.0].value.data();
            let uhd = nodes[uh.0].value.data();
            let mut out = vec![0.0; t_len * h];
            let mut gates = vec![0.0; t_len * h];
            let mut cands = vec![0.0; t_len * h];
            let mut prev = vec![0.0f32; h];
            let mut fh = vec![0.0f32; h];
            for t in 0..t_len {
                let prow = &pd[t * two_h..(t + 1) * two_h];
                let mut af = prow[..h].to_vec();
                vec_mat_acc(&prev, ufd, h, &mut af);
                for j in 0..h {
                    let f = kernels::sigmoid(af[j]);
                    gates[t * h + j] = f;
                    fh[j] = f * prev[j];
                }
                let mut ac = prow[h..].to_vec();
                vec_mat_acc(&fh, uhd, h, &mut ac);
                for j in 0..h {
                    let c = ac[j].tanh();
                    cands[t * h + j] = c;
                    let f = gates[t * h + j];
                    let hn = (1.0 - f) * prev[j] + f * c;
                    out[t * h + j] = hn;
                }
                prev.copy_from_slice(&out[t * h..(t + 1) * h]);
            }
            (out, gates, cands)
        };
        Ok(self.push(
            Tensor::new(vec![t_len, h], out)?,
            Op::Mgu {
                p,
                uf,
                uh,
                gates,
                cands,
            },
            self.rg(&[p, uf, uh]),
        ))
    }

    /// Multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `[T, D]`; each segment attends only within itself,
    /// and with `causal` each row sees only rows at or before it.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let (t_len, d) = self.dims2(q)?;
        if self.dims2(k)? != (t_len, d) || self.dims2(v)? != (t_len, d) {
            return Err(Error::shape("attention", "q, k, v must share a shape"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        for s in segments {
            if s.len == 0 || s.start + s.len > t_len {
                return Err(Error::shape("attention", format!("segment {s:?} outside {t_len} rows")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qd, kd, vd) = (
                nodes[q.0].value.data(),
                nodes[k.0].value.data(),
                nodes[v.0].value.data(),
            );
            let mut out = vec![0.0; t_len * d];
            let mut probs = Vec::new();
            for s in segments {
                let n = s.len;
                for hd in 0..heads {
                    let off = s.start * d + hd * dh;
                    let mut scores = vec![0.0; n * n];
                    kernels::gemm(
                        head_view(qd, off, n, dh, d),
                        head_view(kd, off, n, dh, d).t(),
                        MatViewMut::row_major(&mut scores, n, n),
                        0.0,
                    );
                    for i in 0..n {
                        let row = &mut scores[i * n..(i + 1) * n];
                        row.iter_mut().for_each(|x| *x *= scale);
                        if causal {
                            row[i + 1..].iter_mut().for_each(|x| *x = f32::NEG_INFINITY);
                        }
                        kernels::softmax_in_place(row);
                    }
                    kernels::gemm(
                        MatView::row_major(&scores, n, n),
                        head_view(vd, off, n, dh, d),
                        head_view_mut(&mut out, off, n, dh, d),
                        0.0,
                    );
                    probs.extend_from_slice(&scores);
                }
            }
            (out, probs)
        };
        Ok(self.push(
            Tensor::new(vec![t_len, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            self.rg(&[q, k, v]),
        ))
    }

    /// Window-normalized STFT magnitudes of a 1-D signal: `[frames, fft/2+1]`.
    pub fn stft_magnitude(&self, x: Var, fft: usize, hop: usize) -> Result<Var> {
        let len = self.nodes.borrow()[x.0].value.len();
        if fft > len {
            return Err(Error::invalid(format!("fft size {fft} exceeds signal length {len}")));
        }
        if hop == 0 || hop > fft {
            return Err(Error::invalid(format!("hop {hop} must be in 1..={fft}")));
        }
        let stft = Stft::new(fft, hop);
        let (mags, spectra) = self.with_data(x, |d| stft.magnitude(d));
        let frames = mags.len() / stft.bins();
        Ok(self.push(
            Tensor::new(vec![frames, stft.bins()], mags)?,
            Op::StftMag { x, fft, hop, spectra },
            self.rg(&[x]),
        ))
    }

    pub fn l1_loss(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "l1_loss", |x, y| (x - y).abs())?;
        let mean = t.data().iter().map(|v| *v as f64).sum::<f64>() / t.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(mean as f32), Op::L1Loss(a, b), self.rg(&[a, b])))
    }

    pub fn mse_loss(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mse_loss", |x, y| (x - y) * (x - y))?;
        let mean = t.data().iter().map(|v| *v as f64).sum::<f64>() / t.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(mean as f32), Op::MseLoss(a, b), self.rg(&[a, b])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.with_data(x, |d| d.iter().map(|v| *v as f64).sum::<f64>());
        self.push(Tensor::scalar(s as f32), Op::Sum(x), self.rg(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, n) = self.with_data(x, |d| (d.iter().map(|v| *v as f64).sum::<f64>(), d.len()));
        self.push(Tensor::scalar((s / n.max(1) as f64) as f32), Op::Mean(x), self.rg(&[x]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        if !nodes[loss.0].value.all_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            backward_node(&nodes, node, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Grads { grads })
    }
}

fn head_view(data: &[f32], off: usize, rows: usize, cols: usize, stride: usize) -> MatView<'_> {
    MatView {
        data: &data[off..],
        rows,
        cols,
        rs: stride,
        cs: 1,
    }
}

fn head_view_mut(data: &mut [f32], off: usize, rows: usize, cols: usize, stride: usize) -> MatViewMut<'_> {
    MatViewMut {
        data: &mut data[off..],
        rows,
        cols,
        rs: stride,
        cs: 1,
    }
}

/// `out += v · M` for a row vector `v` and row-major square `M`.
fn vec_mat_acc(v: &[f32], m: &[f32], n: usize, out: &mut [f32]) {
    for (i, vi) in v.iter().enumerate() {
        if *vi == 0.0 {
            continue;
        }
        let row = &m[i * n..(i + 1) * n];
        out.iter_mut().zip(row).for_each(|(o, w)| *o += vi * w);
    }
}

/// `out += M · v` (i.e. `v · M^T`).
fn mat_vec_acc(m: &[f32], v: &[f32], n: usize, out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f32>();
    }
}

pub(crate) fn ce_forward(
    logits: &[f32],
    v: usize,
    targets: &[Option<usize>],
) -> Result<(f32, Vec<f32>, usize)> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0f64;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= v {
            return Err(Error::OutOfRange {
                what: "target id",
                index: t,
                limit: v,
            });
        }
        let row = &logits[r * v..(r + 1) * v];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|x| (*x as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t] as f64;
        for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
            *p = (*x as f64 - lse).exp() as f32;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("cross_entropy needs at least one target"));
    }
    Ok(((total / count as f64) as f32, probs, count))
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    gout: &[f32],
    grads: &mut [Option<Vec<f32>>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            if needs(*a) {
                let ga = grad_slot(grads, *a, m * k);
                kernels::gemm(
                    MatView::row_major(gout, m, n),
                    MatView::transposed(val(*b).data(), k, n),
                    MatViewMut::row_major(ga, m, k),
                    1.0,
                );
            }
            if needs(*b) {
                let gb = grad_slot(grads, *b, k * n);
                kernels::gemm(
                    MatView::transposed(val(*a).data(), m, k),
                    MatView::row_major(gout, m, n),
                    MatViewMut::row_major(gb, k, n),
                    1.0,
                );
            }
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2()?;
            // gout is [n, m]
            add_into(&mut grads[a.0], &kernels::transpose(gout, n, m));
        }
        Op::Add(a, b) => {
            if needs(*a) {
                add_into(&mut grads[a.0], gout);
            }
            if needs(*b) {
                add_into(&mut grads[b.0], gout);
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                add_into(&mut grads[a.0], gout);
            }
            if needs(*b) {
                let neg: Vec<f32> = gout.iter().map(|g| -g).collect();
                add_into(&mut grads[b.0], &neg);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let g: Vec<f32> = gout.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                add_into(&mut grads[a.0], &g);
            }
            if needs(*b) {
                let g: Vec<f32> = gout.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                add_into(&mut grads[b.0], &g);
            }
        }
        Op::AddRow(a, row) => {
            if needs(*a) {
                add_into(&mut grads[a.0], gout);
            }
            if needs(*row) {
                let n = val(*row).len();
                let mut acc = vec![0.0f64; n];
                for chunk in gout.chunks(n) {
                    acc.iter_mut().zip(chunk).for_each(|(a, g)| *a += *g as f64);
                }
                let g: Vec<f32> = acc.into_iter().map(|a| a as f32).collect();
                add_into(&mut grads[row.0], &g);
            }
        }
        Op::Scale(a, c) => {
            let g: Vec<f32> = gout.iter().map(|g| g * c).collect();
            add_into(&mut grads[a.0], &g);
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).data()[0];
            if needs(*a) {
                let g: Vec<f32> = gout.iter().map(|g| g * sv).collect();
                add_into(&mut grads[a.0], &g);
            }
            if needs(*s) {
                let d: f64 = gout
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| (*g as f64) * (*x as f64))
                    .sum();
                add_into(&mut grads[s.0], &[d as f32]);
            }
        }
        Op::Exp(a) => {
            let g: Vec<f32> = gout.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
            add_into(&mut grads[a.0], &g);
        }
        Op::Tanh(a) => {
            let g: Vec<f32> = gout
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            add_into(&mut grads[a.0], &g);
        }
        Op::Sigmoid(a) => {
            let g: Vec<f32> = gout
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            add_into(&mut grads[a.0], &g);
        }
        Op::Gelu(a) => {
            let g: Vec<f32> = gout
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| g * kernels::gelu_grad(*x))
                .collect();
            add_into(&mut grads[a.0], &g);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = val(*gamma).len();
            let m = rstd.len();
            let gd = val(*gamma).data();
            if needs(*gamma) {
                let mut acc = vec![0.0f64; n];
                for (gr, hr) in gout.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        acc[c] += (gr[c] * hr[c]) as f64;
                    }
                }
                let g: Vec<f32> = acc.into_iter().map(|a| a as f32).collect();
                add_into(&mut grads[gamma.0], &g);
            }
            if needs(*beta) {
                let mut acc = vec![0.0f64; n];
                for gr in gout.chunks(n) {
                    acc.iter_mut().zip(gr).for_each(|(a, g)| *a += *g as f64);
                }
                let g: Vec<f32> = acc.into_iter().map(|a| a as f32).collect();
                add_into(&mut grads[beta.0], &g);
            }
            if needs(*x) {
                let gx = grad_slot(grads, *x, m * n);
                for r in 0..m {
                    let gr = &gout[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0f64;
                    let mut mean_dh = 0.0f64;
                    for c in 0..n {
                        let d = (gr[c] * gd[c]) as f64;
                        mean_d += d;
                        mean_dh += d * hr[c] as f64;
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for c in 0..n {
                        let d = (gr[c] * gd[c]) as f64;
                        gx[r * n + c] += (rstd[r] as f64 * (d - mean_d - hr[c] as f64 * mean_dh)) as f32;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let (_, n) = node.value.dims2()?;
            let y = node.value.data();
            let mut g = vec![0.0; y.len()];
            for ((gr, yr), out) in gout.chunks(n).zip(y.chunks(n)).zip(g.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                for c in 0..n {
                    out[c] = yr[c] * (gr[c] - dot as f32);
                }
            }
            add_into(&mut grads[x.0], &g);
        }
        Op::GatherRows { x, idx } => {
            let (m, n) = val(*x).dims2()?;
            let gx = grad_slot(grads, *x, m * n);
            for (r, &i) in idx.iter().enumerate() {
                let src = &gout[r * n..(r + 1) * n];
                gx[i * n..(i + 1) * n].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = val(*p).len();
                if needs(*p) {
                    add_into(&mut grads[p.0], &gout[off..off + len]);
                }
                off += len;
            }
        }
        Op::Reshape(x) => add_into(&mut grads[x.0], gout),
        Op::MeanRows(x) => {
            let (m, n) = val(*x).dims2()?;
            let gx = grad_slot(grads, *x, m * n);
            let inv = 1.0 / m as f32;
            for row in gx.chunks_mut(n) {
                row.iter_mut().zip(gout).for_each(|(d, g)| *d += g * inv);
            }
        }
        Op::L2Normalize { x, norms } => {
            let n = node.value.len() / norms.len().max(1);
            let y = node.value.data();
            let mut g = vec![0.0; y.len()];
            for r in 0..norms.len() {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &gout[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                for c in 0..n {
                    g[r * n + c] = (gr[c] - yr[c] * dot as f32) / norms[r];
                }
            }
            add_into(&mut grads[x.0], &g);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let (_, v) = val(*logits).dims2()?;
            let scale = gout[0] / *count as f32;
            let gl = grad_slot(grads, *logits, probs.len());
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let row = &mut gl[r * v..(r + 1) * v];
                for (c, d) in row.iter_mut().enumerate() {
                    let onehot = if c == t { 1.0 } else { 0.0 };
                    *d += (probs[r * v + c] - onehot) * scale;
                }
            }
        }
        Op::Conv1d { x, w, b, geom, cols } => {
            let g = *geom;
            let ck = g.c_in * g.kernel;
            if needs(*w) {
                let gw = grad_slot(grads, *w, g.c_out * ck);
                kernels::gemm(
                    MatView::row_major(gout, g.c_out, g.out_len),
                    MatView::transposed(cols, ck, g.out_len),
                    MatViewMut::row_major(gw, g.c_out, ck),
                    1.0,
                );
            }
            if needs(*b) {
                let gb: Vec<f32> = gout
                    .chunks(g.out_len)
                    .map(|r| r.iter().map(|v| *v as f64).sum::<f64>() as f32)
                    .collect();
                add_into(&mut grads[b.0], &gb);
            }
            if needs(*x) {
                let mut dcols = vec![0.0; ck * g.out_len];
                kernels::gemm(
                    MatView::transposed(val(*w).data(), g.c_out, ck),
                    MatView::row_major(gout, g.c_out, g.out_len),
                    MatViewMut::row_major(&mut dcols, ck, g.out_len),
                    0.0,
                );
                let gx = grad_slot(grads, *x, g.c_in * g.len);
                kernels::col2im(&dcols, g.c_in, g.len, g.kernel, g.stride, g.pad, g.out_len, gx);
            }
        }
        Op::ConvTranspose1d { x, w, b, geom } => {
            let g = *geom;
            let ck = g.c_out * g.kernel;
            // dz = im2col(gout) : [c_out*kernel, len]
            let dz = kernels::im2col(gout, g.c_out, g.out_len, g.kernel, g.stride, g.pad, g.len);
            if needs(*w) {
                let gw = grad_slot(grads, *w, g.c_in * ck);
                kernels::gemm(
                    MatView::row_major(val(*x).data(), g.c_in, g.len),
                    MatView::transposed(&dz, ck, g.len),
                    MatViewMut::row_major(gw, g.c_in, ck),
                    1.0,
                );
            }
            if needs(*b) {
                let gb: Vec<f32> = gout
                    .chunks(g.out_len)
                    .map(|r| r.iter().map(|v| *v as f64).sum::<f64>() as f32)
                    .collect();
                add_into(&mut grads[b.0], &gb);
            }
            if needs(*x) {
                let gx = grad_slot(grads, *x, g.c_in * g.len);
                kernels::gemm(
                    MatView::row_major(val(*w).data(), g.c_in, ck),
                    MatView::row_major(&dz, ck, g.len),
                    MatViewMut::row_major(gx, g.c_in, g.len),
                    1.0,
                );
            }
        }
        Op::Mgu {
            p,
            uf,
            uh,
            gates,
            cands,
        } => {
            let (t_len, h) = node.value.dims2()?;
            let hs = node.value.data();
            let ufd = val(*uf).data();
            let uhd = val(*uh).data();
            let mut dp = vec![0.0; t_len * 2 * h];
            let mut duf = vec![0.0; h * h];
            let mut duh = vec![0.0; h * h];
            let mut dh_next = vec![0.0f32; h];
            let zero = vec![0.0f32; h];
            for t in (0..t_len).rev() {
                let prev: &[f32] = if t == 0 { &zero } else { &hs[(t - 1) * h..t * h] };
                let f = &gates[t * h..(t + 1) * h];
                let c = &cands[t * h..(t + 1) * h];
                let mut dh = dh_next.clone();
                dh.iter_mut().zip(&gout[t * h..(t + 1) * h]).for_each(|(a, g)| *a += g);
                let mut dprev = vec![0.0f32; h];
                let mut df = vec![0.0f32; h];
                let mut dac = vec![0.0f32; h];
                for j in 0..h {
                    dprev[j] = dh[j] * (1.0 - f[j]);
                    df[j] = dh[j] * (c[j] - prev[j]);
                    dac[j] = dh[j] * f[j] * (1.0 - c[j] * c[j]);
                }
                // a_c = p_c + (f*prev) Uh
                let fh: Vec<f32> = f.iter().zip(prev).map(|(a, b)| a * b).collect();
                outer_acc(&fh, &dac, &mut duh);
                let mut dfh = vec![0.0f32; h];
                mat_vec_acc(uhd, &dac, h, &mut dfh);
                for j in 0..h {
                    df[j] += dfh[j] * prev[j];
                    dprev[j] += dfh[j] * f[j];
                }
                let daf: Vec<f32> = df.iter().zip(f).map(|(d, f)| d * f * (1.0 - f)).collect();
                outer_acc(prev, &daf, &mut duf);
                mat_vec_acc(ufd, &daf, h, &mut dprev);
                let row = &mut dp[t * 2 * h..(t + 1) * 2 * h];
                row[..h].copy_from_slice(&daf);
                row[h..].copy_from_slice(&dac);
                dh_next = dprev;
            }
            if needs(*p) {
                add_into(&mut grads[p.0], &dp);
            }
            if needs(*uf) {
                add_into(&mut grads[uf.0], &duf);
            }
            if needs(*uh) {
                add_into(&mut grads[uh.0], &duh);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } => {
            let (t_len, d) = val(*q).dims2()?;
            let dh = d / heads;
            let scale = 1.0 / (dh as f32).sqrt();
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut poff = 0;
            for s in segments {
                let n = s.len;
                for hd in 0..*heads {
                    let off = s.start * d + hd * dh;
                    let p = &probs[poff..poff + n * n];
                    poff += n * n;
                    kernels::gemm(
                        MatView::transposed(p, n, n),
                        head_view(gout, off, n, dh, d),
                        head_view_mut(&mut dv, off, n, dh, d),
                        1.0,
                    );
                    let mut dpm = vec![0.0; n * n];
                    kernels::gemm(
                        head_view(gout, off, n, dh, d),
                        head_view(vd, off, n, dh, d).t(),
                        MatViewMut::row_major(&mut dpm, n, n),
                        0.0,
                    );
                    for i in 0..n {
                        let pr = &p[i * n..(i + 1) * n];
                        let dr = &mut dpm[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        for j in 0..n {
                            dr[j] = pr[j] * (dr[j] - dot as f32) * scale;
                        }
                    }
                    kernels::gemm(
                        MatView::row_major(&dpm, n, n),
                        head_view(kd, off, n, dh, d),
                        head_view_mut(&mut dq, off, n, dh, d),
                        1.0,
                    );
                    kernels::gemm(
                        MatView::transposed(&dpm, n, n),
                        head_view(qd, off, n, dh, d),
                        head_view_mut(&mut dk, off, n, dh, d),
                        1.0,
                    );
                }
            }
            if needs(*q) {
                add_into(&mut grads[q.0], &dq);
            }
            if needs(*k) {
                add_into(&mut grads[k.0], &dk);
            }
            if needs(*v) {
                add_into(&mut grads[v.0], &dv);
            }
        }
        Op::StftMag { x, fft, hop, spectra } => {
            let stft = Stft::new(*fft, *hop);
            let n = val(*x).len();
            let gx = grad_slot(grads, *x, n);
            stft.magnitude_backward(spectra, node.value.data(), gout, gx);
        }
        Op::L1Loss(a, b) => {
            let n = val(*a).len().max(1) as f32;
            let g: Vec<f32> = val(*a)
                .data()
                .iter()
                .zip(val(*b).data())
                .map(|(x, y)| {
                    let d = x - y;
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    s * gout[0] / n
                })
                .collect();
            if needs(*a) {
                add_into(&mut grads[a.0], &g);
            }
            if needs(*b) {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                add_into(&mut grads[b.0], &neg);
            }
        }
        Op::MseLoss(a, b) => {
            let n = val(*a).len().max(1) as f32;
            let g: Vec<f32> = val(*a)
                .data()
                .iter()
                .zip(val(*b).data())
                .map(|(x, y)| 2.0 * (x - y) * gout[0] / n)
                .collect();
            if needs(*a) {
                add_into(&mut grads[a.0], &g);
            }
            if needs(*b) {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                add_into(&mut grads[b.0], &neg);
            }
        }
        Op::Sum(x) => {
            let n = val(*x).len();
            add_into(&mut grads[x.0], &vec![gout[0]; n]);
        }
        Op::Mean(x) => {
            let n = val(*x).len();
            add_into(&mut grads[x.0], &vec![gout[0] / n as f32; n]);
        }
    }
    Ok(())
}

/// `m += a^T b` for row vectors `a`, `b` (`m` is `[a.len(), b.len()]`).
fn outer_acc(a: &[f32], b: &[f32], m: &mut [f32]) {
    let n = b.len();
    for (i, ai) in a.iter().enumerate() {
        if *ai == 0.0 {
            continue;
        }
        m[i * n..(i + 1) * n].iter_mut().zip(b).for_each(|(d, bj)| *d += ai * bj);
    }
}
