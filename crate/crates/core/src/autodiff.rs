// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-level reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] records every primitive as it executes. [`Tape::backward`]
//! replays the record in reverse exactly once, accumulating gradients
//! additively across fan-out. Values stay readable after the backward pass so
//! callers can combine intermediate activations with their gradients
//! (per-token weight-gradient terms need both).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Layernorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Identity(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    KlDivergence {
        p: Var,
        q: Var,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRow {
        a: Var,
        row: usize,
    },
    Pick {
        a: Var,
        index: usize,
    },
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materializing zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Ordered record of executed primitives. Single-owner; one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that is detached from gradient flow.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf backed by a shared tensor; no copy is made.
    pub fn shared_leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(t, Op::Leaf, requires_grad)
    }

    pub fn identity(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        let ng = self.ng(a);
        self.push(v, Op::Identity(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).rows_cols();
        let bs = self.value(b).shape().to_vec();
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} rhs {:?}", self.value(a).shape(), bs),
            ));
        }
        let n = bs[1];
        let mut out = vec![0.0; m * n];
        tensor::matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            ng,
        ))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).rows_cols();
        let (n, k2) = self.value(b).rows_cols();
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!(
                    "lhs {:?} rhs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNt { a, b, m, k, n },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Sums a list of equally shaped values left to right.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Usage("add_n of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Adds `bias[n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).rows_cols();
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_row",
                format!("rows of width {n}, bias {:?}", self.value(bias).shape()),
            ));
        }
        let mut t = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..m {
            for (x, y) in t.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddRow { a, bias }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Layernorm over the last axis with learned `gamma`/`beta` of that width.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).rows_cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "width {n}, gamma {:?}, beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::Domain {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let (m, n) = t.rows_cols();
        let mut out = t.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.rows_cols();
        if m != n {
            return Err(Error::shape(
                "causal_softmax",
                format!("{:?} is not square", t.shape()),
            ));
        }
        if !t.all_finite() {
            return Err(Error::Domain {
                op: "causal_softmax",
                detail: "non-finite input".into(),
            });
        }
        let mut out = t.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            softmax_in_place(&mut row[..=r]);
            row[r + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::CausalSoftmax(a), ng))
    }

    /// Gathers rows of `table[v, d]` into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).rows_cols();
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range for {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = t.rows_cols();
        if m != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected one row, got {:?}", t.shape()),
            ));
        }
        if target >= n {
            return Err(Error::Input(format!(
                "target {target} out of range for {n} classes"
            )));
        }
        let mut probs = t.data().to_vec();
        softmax_in_place(&mut probs);
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    /// `sum_i p_i (ln p_i - ln q_i)` per row of the last axis; `p` is detached.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let (m, n) = self.value(p).rows_cols();
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        let mut out = vec![0.0; m];
        for r in 0..m {
            for c in 0..n {
                let (pi, qi) = (pv[r * n + c], qv[r * n + c]);
                if !pi.is_finite() || !qi.is_finite() || pi < 0.0 {
                    return Err(Error::Domain {
                        op: "kl_divergence",
                        detail: format!("invalid probability pair ({pi}, {qi})"),
                    });
                }
                if pi == 0.0 {
                    continue;
                }
                if qi <= 0.0 {
                    return Err(Error::Domain {
                        op: "kl_divergence",
                        detail: format!("log of nonpositive probability {qi}"),
                    });
                }
                out[r] += pi * (pi.ln() - qi.ln());
            }
        }
        let ng = self.ng(q);
        Ok(self.push(Tensor::new(vec![m], out)?, Op::KlDivergence { p, q }, ng))
    }

    /// Columns `start..start+len` of a 2-D value.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).rows_cols();
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of width {n}", start + len),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { a, start },
            ng,
        ))
    }

    /// Concatenates 2-D values with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows_cols().0)
            .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).rows_cols();
                if r == m {
                    Ok(c)
                } else {
                    Err(Error::shape("concat_cols", format!("row count {r} vs {m}")))
                }
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Row `row` of a 2-D value, as a `[1, n]` value.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (m, n) = self.value(a).rows_cols();
        if row >= m {
            return Err(Error::shape("select_row", format!("row {row} of {m}")));
        }
        let data = self.value(a).row(row).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![1, n], data)?, Op::SelectRow { a, row }, ng))
    }

    /// Single element by flat index, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let len = self.value(a).len();
        if index >= len {
            return Err(Error::Input(format!(
                "index {index} out of range for {len} elements"
            )));
        }
        let x = self.value(a).data()[index];
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(x), Op::Pick { a, index }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse pass from `output`. `seed` defaults to 1 for a scalar output.
    ///
    /// Returns `d(seed . output)/dx` for every recorded value that depends on a
    /// [`Tape::param`] leaf. The tape can only be differentiated once.
    pub fn backward(&mut self, output: Var, seed: Option<&Tensor>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage(
                "tape already consumed by a backward pass".into(),
            ));
        }
        let out_shape = self.value(output).shape().to_vec();
        let seed = match seed {
            Some(s) if s.shape() != out_shape.as_slice() => {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} vs output {:?}", s.shape(), out_shape),
                ))
            }
            Some(s) => s.clone(),
            None if self.value(output).is_scalar() => Tensor::full(&out_shape, 1.0),
            None => {
                return Err(Error::Usage(format!(
                    "non-scalar output {out_shape:?} needs an explicit seed"
                )))
            }
        };
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Identity(a) => self.acc(grads, *a, || gd.to_vec()),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    da
                });
                self.acc(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_tn(self.value(*a).data(), gd, &mut db, m, k, n);
                    db
                });
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // out[m,n] = a[m,k] b[n,k]^T
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_nn(gd, self.value(*b).data(), &mut da, m, n, k);
                    da
                });
                self.acc(grads, *b, || {
                    let mut db = vec![0.0; n * k];
                    tensor::matmul_tn(gd, self.value(*a).data(), &mut db, m, n, k);
                    db
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || {
                    gd.iter().zip(vb).map(|(g, y)| g * y).collect()
                });
                self.acc(grads, *b, || {
                    gd.iter().zip(va).map(|(g, x)| g * x).collect()
                });
            }
            Op::AddRow { a, bias } => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *bias, || {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    db
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, || gd.iter().map(|x| x * s).collect()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * n..(r + 1) * n;
                        let (gr, hr) = (&gd[range.clone()], &xhat[range.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..n {
                            let d = gr[c] * gam[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for c in 0..n {
                            let d = gr[c] * gam[c];
                            dx[r * n + c] = rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    dx
                });
                self.acc(grads, *gamma, || {
                    let mut dg = vec![0.0; n];
                    for (grow, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                    dg
                });
                self.acc(grads, *beta, || {
                    let mut db = vec![0.0; n];
                    for grow in gd.chunks(n) {
                        for (d, x) in db.iter_mut().zip(grow) {
                            *d += x;
                        }
                    }
                    db
                });
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                self.acc(grads, *a, || {
                    gd.iter()
                        .zip(xs)
                        .map(|(g, &x)| {
                            let u = GELU_C * (x + GELU_K * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect()
                });
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = node.value.data();
                let (_, n) = node.value.rows_cols();
                self.acc(grads, *a, || {
                    let mut dx = vec![0.0; y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..n {
                            dr[c] = yr[c] * (gr[c] - s);
                        }
                    }
                    dx
                });
            }
            Op::Embedding { table, ids } => {
                let (_, d) = self.value(*table).rows_cols();
                self.acc(grads, *table, || {
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += gd[r * d + c];
                        }
                    }
                    dt
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let s = gd[0];
                self.acc(grads, *logits, || {
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    dl[*target] -= s;
                    dl
                });
            }
            Op::KlDivergence { p, q } => {
                let (_, n) = self.value(*q).rows_cols();
                let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                self.acc(grads, *q, || {
                    (0..pv.len())
                        .map(|j| {
                            if pv[j] == 0.0 {
                                0.0
                            } else {
                                -gd[j / n] * pv[j] / qv[j]
                            }
                        })
                        .collect()
                });
            }
            Op::SliceCols { a, start } => {
                let (m, n) = self.value(*a).rows_cols();
                let (_, len) = node.value.rows_cols();
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        da[r * n + start..r * n + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                    da
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).rows_cols();
                    self.acc(grads, p, || {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        dp
                    });
                    offset += w;
                }
            }
            Op::SelectRow { a, row } => {
                let (m, n) = self.value(*a).rows_cols();
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; m * n];
                    da[row * n..(row + 1) * n].copy_from_slice(gd);
                    da
                });
            }
            Op::Pick { a, index } => {
                let len = self.value(*a).len();
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; len];
                    da[*index] = gd[0];
                    da
                });
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.acc(grads, *a, || vec![gd[0]; len]);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(t) => {
                for (x, y) in t.data_mut().iter_mut().zip(&c) {
                    *x += y;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, c).expect("gradient shape matches value"));
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Maximum relative disagreement between the tape gradient of a scalar
/// function and its central finite difference, over all coordinates of `x`:
/// `max |analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y, None)?.wrt(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).data()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(worst)
}
