//! Reverse-mode differentiation over a linear operation record.
//!
//! Every primitive evaluates eagerly and appends a node holding its output
//! value. `backward` walks the nodes in reverse insertion order, so each op is
//! visited exactly once after all of its consumers.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Probability clamp used by the cross-entropy primitive.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Param,
    Constant,
    MatMul,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Concat,
    MaskApply,
    SelectRows,
    Bce,
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    /// `b` is either the same shape as `a` or a `[1, n]` row broadcast over `a`.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MaskApply {
        input: Var,
        mask: Vec<f64>,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
        w_pos: f64,
        w_neg: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Param => OpKind::Param,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Concat { .. } => OpKind::Concat,
            Op::MaskApply { .. } => OpKind::MaskApply,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`. Panics if `var` is not a parameter of the tape
    /// this was produced from.
    pub fn get(&self, var: Var) -> &Tensor {
        self.grads[var.0]
            .as_ref()
            .expect("gradient requested for a non-parameter node")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean class-weighted binary cross-entropy over probabilities.
///
/// Returns 0 for an empty batch.
pub fn weighted_bce_value(probs: &[f64], targets: &[f64], w_pos: f64, w_neg: f64) -> f64 {
    debug_assert_eq!(probs.len(), targets.len());
    if probs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(targets) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total += -(w_pos * y * p.ln() + w_neg * (1.0 - y) * (1.0 - p).ln());
    }
    total / probs.len() as f64
}

fn checked(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(op, format!("expected 2-D input, got {:?}", t.shape())))
}

/// `c[m,n] = a[m,k] · b[k,n]`. Each output row depends only on the matching
/// input row, accumulated over `k` in a fixed order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Op kinds in execution order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient from [`GradTape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let t = checked("matmul", Tensor::matrix(m, n, out)?)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = if av.same_shape(bv) {
            av.values().iter().zip(bv.values()).map(|(x, y)| x + y).collect()
        } else {
            let (m, n) = require_2d("add", av)?;
            if bv.shape() != [1, n] {
                return Err(Error::shape(
                    "add",
                    format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
                ));
            }
            let mut out = av.values().to_vec();
            for row in out.chunks_mut(n).take(m) {
                for (o, &y) in row.iter_mut().zip(bv.values()) {
                    *o += y;
                }
            }
            out
        };
        let t = checked("add", Tensor::new(av.shape().to_vec(), out)?)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if !av.same_shape(bv) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av.values().iter().zip(bv.values()).map(|(x, y)| x * y).collect();
        let t = checked("mul", Tensor::new(av.shape().to_vec(), out)?)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let out = av.values().iter().map(|x| x * factor).collect();
        let t = checked("scale", Tensor::new(av.shape().to_vec(), out)?)?;
        Ok(self.push(t, Op::Scale(a, factor)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.values().iter().map(|&x| sigmoid(x)).collect();
        let t = checked("sigmoid", Tensor::new(av.shape().to_vec(), out)?)?;
        Ok(self.push(t, Op::Sigmoid(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.values().iter().map(|x| x.tanh()).collect();
        let t = checked("tanh", Tensor::new(av.shape().to_vec(), out)?)?;
        Ok(self.push(t, Op::Tanh(a)))
    }

    /// Concatenates 2-D inputs along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need ≥ 1 input and axis 0 or 1"));
        }
        let dims = inputs
            .iter()
            .map(|&v| require_2d("concat", self.value(v)))
            .collect::<Result<Vec<_>>>()?;
        let t = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::shape("concat", format!("column mismatch {dims:?}")));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for &v in inputs {
                out.extend_from_slice(self.value(v).values());
            }
            Tensor::matrix(rows, cols, out)?
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::shape("concat", format!("row mismatch {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&v, &(_, c)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(v).values()[r * c..(r + 1) * c]);
                }
            }
            Tensor::matrix(rows, cols, out)?
        };
        let t = checked("concat", t)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Multiplies `a` elementwise by a fixed (already scaled) dropout mask.
    pub fn mask_apply(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != mask.len() {
            return Err(Error::shape(
                "mask_apply",
                format!("mask of {} for tensor of {}", mask.len(), av.len()),
            ));
        }
        let out = av.values().iter().zip(mask).map(|(x, m)| x * m).collect();
        let t = checked("mask_apply", Tensor::new(av.shape().to_vec(), out)?)?;
        Ok(self.push(
            t,
            Op::MaskApply {
                input: a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Gathers the listed rows of a 2-D tensor (in the given order).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = require_2d("select_rows", self.value(a))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("select_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a).values();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::matrix(rows.len(), n, out)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Scalar mean of class-weighted BCE between `probs` (any shape, one
    /// probability per element) and 0/1 `targets`.
    pub fn bce(&mut self, probs: Var, targets: &[f64], w_pos: f64, w_neg: f64) -> Result<Var> {
        let pv = self.value(probs);
        if pv.len() != targets.len() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities vs {} targets", pv.len(), targets.len()),
            ));
        }
        let loss = weighted_bce_value(pv.values(), targets, w_pos, w_neg);
        let t = checked("bce", Tensor::scalar(loss))?;
        Ok(self.push(
            t,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                w_pos,
                w_neg,
            },
        ))
    }

    /// Propagates d(loss)/d(node) backwards through the record.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invalid("loss does not belong to this tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2().unwrap();
                    let (_, n) = self.value(*b).dims2().unwrap();
                    let av = self.value(*a).values();
                    let bv = self.value(*b).values();
                    let gv = g.values();
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, &x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?);
                }
                Op::Add(a, b) => {
                    let bshape = self.value(*b).shape().to_vec();
                    if bshape == g.shape() {
                        accumulate(&mut grads, *b, g.clone());
                    } else {
                        let n = bshape[1];
                        let mut db = vec![0.0; n];
                        for row in g.values().chunks(n) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(bshape, db)?);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = zip_map(&g, bv, |x, y| x * y);
                    let db = zip_map(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    let da = map(&g, |x| x * f);
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&g, &node.value, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = zip_map(&g, &node.value, |x, t| x * (1.0 - t * t));
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat { inputs, axis } => {
                    let (rows, cols) = node.value.dims2().unwrap();
                    let gv = g.values();
                    if *axis == 0 {
                        let mut start = 0;
                        for &v in inputs {
                            let (r, _) = self.value(v).dims2().unwrap();
                            let part = gv[start * cols..(start + r) * cols].to_vec();
                            accumulate(&mut grads, v, Tensor::matrix(r, cols, part)?);
                            start += r;
                        }
                    } else {
                        let mut offset = 0;
                        for &v in inputs {
                            let (_, c) = self.value(v).dims2().unwrap();
                            let mut part = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                part.extend_from_slice(&gv[r * cols + offset..r * cols + offset + c]);
                            }
                            accumulate(&mut grads, v, Tensor::matrix(rows, c, part)?);
                            offset += c;
                        }
                    }
                }
                Op::MaskApply { input, mask } => {
                    let da: Vec<f64> = g.values().iter().zip(mask).map(|(x, m)| x * m).collect();
                    accumulate(&mut grads, *input, Tensor::new(g.shape().to_vec(), da)?);
                }
                Op::SelectRows { input, rows } => {
                    let src = self.value(*input);
                    let (_, n) = src.dims2().unwrap();
                    let mut da = Tensor::zeros(src.shape());
                    let dv = da.values_mut();
                    for (out_row, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            dv[r * n + j] += g.values()[out_row * n + j];
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::Bce {
                    probs,
                    targets,
                    w_pos,
                    w_neg,
                } => {
                    let pv = self.value(*probs);
                    let upstream = g.values()[0];
                    let n = targets.len().max(1) as f64;
                    let dp: Vec<f64> = pv
                        .values()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                                0.0
                            } else {
                                -upstream * (w_pos * y / p - w_neg * (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *probs, Tensor::new(pv.shape().to_vec(), dp)?);
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, x) in existing.values_mut().iter_mut().zip(g.values()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let v = t.values().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), v).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), v).unwrap()
}
