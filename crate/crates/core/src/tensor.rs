//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Tensors are immutable after creation; each differentiable op records its
//! inputs so that [`Tensor::backward`] can replay the graph in reverse
//! topological order. Gradients accumulate only into leaf tensors marked
//! trainable. Everything runs in 64-bit precision so finite-difference
//! verification stays tight.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::TensorError;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CHECKED: Cell<bool> = const { Cell::new(false) };
}

/// Run a closure with graph recording disabled (evaluation / decoding path).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let out = f();
        g.set(prev);
        out
    })
}

/// When checked mode is on, every op verifies its output is finite.
pub fn set_checked(on: bool) {
    CHECKED.with(|c| c.set(on));
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn check_finite(vals: &[f64], op: &str) -> Result<(), TensorError> {
    let on = CHECKED.with(|c| c.get());
    if on {
        if let Some(pos) = vals.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.to_string(),
                index: pos,
            });
        }
    }
    Ok(())
}

enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    /// `[m x n] + [n]`, bias broadcast over rows.
    AddBias(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    SliceRows {
        x: Tensor,
        start: usize,
    },
    ConcatRows(Vec<Tensor>),
    SliceCols {
        x: Tensor,
        start: usize,
    },
    ConcatCols(Vec<Tensor>),
    Sum(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        eps: f64,
    },
    /// Row-wise softmax; `causal` masks entries j > i before normalization.
    Softmax {
        x: Tensor,
        causal: bool,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    /// Multiplier already folded with inverted dropout scaling.
    Dropout {
        x: Tensor,
        mult: Vec<f64>,
    },
    Gather {
        table: Tensor,
        ids: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Transpose(x) | Op::Reshape(x) | Op::Sum(x) => {
                vec![x]
            }
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.iter().collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Softmax { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Dropout { x, .. } => vec![x],
            Op::Gather { table, .. } => vec![table],
        }
    }
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Option<Op>,
    backward_done: Cell<bool>,
}

/// Dense f64 tensor; cheap to clone (shared reference).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let needs_grad = requires_grad
            || op
                .as_ref()
                .map(|o| o.inputs().iter().any(|t| t.inner.needs_grad))
                .unwrap_or(false);
        let op = if needs_grad && grad_enabled() { op } else { None };
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad: needs_grad && grad_enabled(),
                op,
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor::new(shape, data, false, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::new(shape, vec![0.0; n], false, None)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v], false, None)
    }

    /// Dense-layer init: uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
        Tensor::new(vec![rows, cols], data, false, None)
    }

    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = numel(&shape);
        // Box-Muller, consuming pairs for determinism.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(r * th.cos() * std);
            if data.len() < n {
                data.push(r * th.sin() * std);
            }
        }
        Tensor::new(shape, data, false, None)
    }

    /// Mark this leaf tensor as trainable. Must be called before use in ops.
    pub fn trainable(self) -> Self {
        assert!(self.inner.op.is_none(), "only leaf tensors can be trainable");
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.inner.data.borrow().clone()),
                grad: RefCell::new(None),
                requires_grad: true,
                needs_grad: true,
                op: None,
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.inner.shape.len() >= 2 {
            self.inner.shape[1]
        } else {
            1
        }
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the stored gradient (optimizer clipping and tests).
    pub fn set_grad(&self, g: Vec<f64>) {
        assert_eq!(g.len(), self.len());
        *self.inner.grad.borrow_mut() = Some(g);
    }

    /// In-place parameter update (optimizer use only; never mid-graph).
    pub fn apply_update(&self, f: impl FnMut(usize, &mut f64)) {
        let mut data = self.inner.data.borrow_mut();
        let mut f = f;
        for (i, v) in data.iter_mut().enumerate() {
            f(i, v);
        }
    }

    pub fn set_data(&self, vals: Vec<f64>) {
        assert_eq!(vals.len(), self.len());
        *self.inner.data.borrow_mut() = vals;
    }

    fn check2d(&self, op: &str) -> Result<(usize, usize), TensorError> {
        if self.inner.shape.len() != 2 {
            return Err(TensorError::NotMatrix {
                op: op.to_string(),
                shape: self.inner.shape.clone(),
            });
        }
        Ok((self.inner.shape[0], self.inner.shape[1]))
    }
}

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.check2d("matmul")?;
        let (k2, n) = other.check2d("matmul")?;
        if k != k2 {
            return Err(TensorError::Dim {
                op: "matmul".to_string(),
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let mut out = vec![0.0; m * n];
        matmul_into(&a, &b, &mut out, m, k, n);
        drop(a);
        drop(b);
        check_finite(&out, "matmul")?;
        Ok(Tensor::new(
            vec![m, n],
            out,
            false,
            Some(Op::MatMul(self.clone(), other.clone())),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.inner.shape != other.inner.shape {
            return Err(TensorError::Dim {
                op: "add".to_string(),
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        check_finite(&out, "add")?;
        Ok(Tensor::new(
            self.inner.shape.clone(),
            out,
            false,
            Some(Op::Add(self.clone(), other.clone())),
        ))
    }

    /// Add a `[n]` bias vector to every row of a `[m x n]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (m, n) = self.check2d("add_bias")?;
        if bias.len() != n {
            return Err(TensorError::Dim {
                op: "add_bias".to_string(),
                lhs: self.inner.shape.clone(),
                rhs: bias.inner.shape.clone(),
            });
        }
        let a = self.inner.data.borrow();
        let b = bias.inner.data.borrow();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(a[i * n + j] + b[j]);
            }
        }
        drop(a);
        drop(b);
        check_finite(&out, "add_bias")?;
        Ok(Tensor::new(
            vec![m, n],
            out,
            false,
            Some(Op::AddBias(self.clone(), bias.clone())),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.inner.shape != other.inner.shape {
            return Err(TensorError::Dim {
                op: "mul".to_string(),
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        drop(a);
        drop(b);
        check_finite(&out, "mul")?;
        Ok(Tensor::new(
            self.inner.shape.clone(),
            out,
            false,
            Some(Op::Mul(self.clone(), other.clone())),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.data.borrow().iter().map(|x| x * c).collect();
        Tensor::new(
            self.inner.shape.clone(),
            out,
            false,
            Some(Op::Scale(self.clone(), c)),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|x| x.max(0.0))
            .collect();
        Tensor::new(
            self.inner.shape.clone(),
            out,
            false,
            Some(Op::Relu(self.clone())),
        )
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.check2d("transpose")?;
        let a = self.inner.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Ok(Tensor::new(
            vec![n, m],
            out,
            false,
            Some(Op::Transpose(self.clone())),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        if numel(&shape) != self.len() {
            return Err(TensorError::ShapeData {
                shape,
                len: self.len(),
            });
        }
        Ok(Tensor::new(
            shape,
            self.inner.data.borrow().clone(),
            false,
            Some(Op::Reshape(self.clone())),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.check2d("slice_rows")?;
        if start + len > m {
            return Err(TensorError::SliceRange {
                op: "slice_rows".to_string(),
                start,
                len,
                size: m,
            });
        }
        let a = self.inner.data.borrow();
        let out = a[start * n..(start + len) * n].to_vec();
        drop(a);
        Ok(Tensor::new(
            vec![len, n],
            out,
            false,
            Some(Op::SliceRows {
                x: self.clone(),
                start,
            }),
        ))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty());
        let (_, n) = parts[0].check2d("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (m, n2) = p.check2d("concat_rows")?;
            if n2 != n {
                return Err(TensorError::Dim {
                    op: "concat_rows".to_string(),
                    lhs: parts[0].inner.shape.clone(),
                    rhs: p.inner.shape.clone(),
                });
            }
            rows += m;
            out.extend_from_slice(&p.inner.data.borrow());
        }
        Ok(Tensor::new(
            vec![rows, n],
            out,
            false,
            Some(Op::ConcatRows(parts.to_vec())),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.check2d("slice_cols")?;
        if start + len > n {
            return Err(TensorError::SliceRange {
                op: "slice_cols".to_string(),
                start,
                len,
                size: n,
            });
        }
        let a = self.inner.data.borrow();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&a[i * n + start..i * n + start + len]);
        }
        drop(a);
        Ok(Tensor::new(
            vec![m, len],
            out,
            false,
            Some(Op::SliceCols {
                x: self.clone(),
                start,
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty());
        let (m, _) = parts[0].check2d("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (m2, n) = p.check2d("concat_cols")?;
            if m2 != m {
                return Err(TensorError::Dim {
                    op: "concat_cols".to_string(),
                    lhs: parts[0].inner.shape.clone(),
                    rhs: p.inner.shape.clone(),
                });
            }
            total += n;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let n = p.cols();
                let a = p.inner.data.borrow();
                out.extend_from_slice(&a[i * n..(i + 1) * n]);
            }
        }
        Ok(Tensor::new(
            vec![m, total],
            out,
            false,
            Some(Op::ConcatCols(parts.to_vec())),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.inner.data.borrow().iter().sum();
        Tensor::new(vec![1], vec![s], false, Some(Op::Sum(self.clone())))
    }

    /// Layer normalization over the last axis with affine gain/bias of size d.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        let d = *self.inner.shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::Dim {
                op: "layer_norm".to_string(),
                lhs: self.inner.shape.clone(),
                rhs: vec![],
            });
        }
        if gain.len() != d || bias.len() != d {
            return Err(TensorError::Dim {
                op: "layer_norm".to_string(),
                lhs: self.inner.shape.clone(),
                rhs: gain.inner.shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::BadEps(eps));
        }
        let rows = self.len() / d;
        let x = self.inner.data.borrow();
        let g = gain.inner.data.borrow();
        let b = bias.inner.data.borrow();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        drop(x);
        drop(g);
        drop(b);
        check_finite(&out, "layer_norm")?;
        Ok(Tensor::new(
            self.inner.shape.clone(),
            out,
            false,
            Some(Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            }),
        ))
    }

    /// Row-wise softmax over a square or rectangular score matrix.
    /// With `causal`, entry (i, j) for j > i is masked out.
    pub fn softmax_rows(&self, causal: bool) -> Result<Tensor, TensorError> {
        let (m, n) = self.check2d("softmax")?;
        let x = self.inner.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let valid = if causal { (i + 1).min(n) } else { n };
            let row = &x[i * n..i * n + valid];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..valid {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..valid {
                out[i * n + j] /= z;
            }
        }
        drop(x);
        check_finite(&out, "softmax")?;
        Ok(Tensor::new(
            vec![m, n],
            out,
            false,
            Some(Op::Softmax {
                x: self.clone(),
                causal,
            }),
        ))
    }

    /// Mean negative log-likelihood over unmasked positions.
    pub fn cross_entropy(
        &self,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Tensor, TensorError> {
        let (t, v) = self.check2d("cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::Dim {
                op: "cross_entropy".to_string(),
                lhs: self.inner.shape.clone(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(TensorError::TargetOutOfRange { id: bad, vocab: v });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::AllMasked);
        }
        let x = self.inner.data.borrow();
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        drop(x);
        let loss = total / count as f64;
        check_finite(&[loss], "cross_entropy")?;
        Ok(Tensor::new(
            vec![1],
            vec![loss],
            false,
            Some(Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            }),
        ))
    }

    /// Inverted dropout: at train time, elements are zeroed with probability p
    /// and survivors scaled by 1/(1-p). In eval mode call sites skip the op.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadDropout(p));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - p;
        let mult: Vec<f64> = (0..self.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let out: Vec<f64> = self
            .inner
            .data
            .borrow()
            .iter()
            .zip(mult.iter())
            .map(|(x, m)| x * m)
            .collect();
        Ok(Tensor::new(
            self.inner.shape.clone(),
            out,
            false,
            Some(Op::Dropout {
                x: self.clone(),
                mult,
            }),
        ))
    }

    /// Embedding lookup: out[i] = table[ids[i]].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        let (v, d) = self.check2d("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TensorError::TargetOutOfRange { id: bad, vocab: v });
        }
        let a = self.inner.data.borrow();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&a[id * d..(id + 1) * d]);
        }
        drop(a);
        Ok(Tensor::new(
            vec![ids.len(), d],
            out,
            false,
            Some(Op::Gather {
                table: self.clone(),
                ids: ids.to_vec(),
            }),
        ))
    }

    /// softmax(q k^T / sqrt(d_h)) v, optionally causal.
    pub fn scaled_dot_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        causal: bool,
    ) -> Result<Tensor, TensorError> {
        let (tq, dh) = q.check2d("attention")?;
        let (tk, dk) = k.check2d("attention")?;
        let (tv, dv) = v.check2d("attention")?;
        if dh != dk || tk != tv || dh != dv || tq != tk {
            return Err(TensorError::Dim {
                op: "attention".to_string(),
                lhs: q.inner.shape.clone(),
                rhs: k.inner.shape.clone(),
            });
        }
        let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        let probs = scores.softmax_rows(causal)?;
        probs.matmul(v)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

impl Tensor {
    /// Populate gradients of every trainable leaf reachable from this scalar.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::BackwardNonScalar(self.inner.shape.clone()));
        }
        if self.inner.backward_done.get() {
            return Err(TensorError::TapeConsumed);
        }
        self.inner.backward_done.set(true);

        // Topological order via iterative DFS.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, processed)) = stack.pop() {
            if processed {
                order.push(t);
                continue;
            }
            if visited.contains_key(&t.inner.id) {
                continue;
            }
            visited.insert(t.inner.id, ());
            stack.push((t.clone(), true));
            if let Some(op) = &t.inner.op {
                for input in op.inputs() {
                    if input.inner.needs_grad && !visited.contains_key(&input.inner.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for node in order.iter().rev() {
            let grad = match grads.remove(&node.inner.id) {
                Some(g) => g,
                None => continue,
            };
            if node.inner.requires_grad {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(g) => {
                        for (gi, d) in g.iter_mut().zip(grad.iter()) {
                            *gi += d;
                        }
                    }
                    None => *slot = Some(grad.clone()),
                }
            }
            let op = match &node.inner.op {
                Some(op) => op,
                None => continue,
            };
            backward_op(node, op, &grad, &mut grads);
        }
        Ok(())
    }
}

fn accum(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, add: impl FnOnce(&mut Vec<f64>)) {
    if !t.inner.needs_grad {
        return;
    }
    let entry = grads
        .entry(t.inner.id)
        .or_insert_with(|| vec![0.0; t.len()]);
    add(entry);
}

fn backward_op(node: &Tensor, op: &Op, grad: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match op {
        Op::MatMul(a, b) => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            accum(grads, a, |ga| {
                // dA += dC . B^T
                let bd = b.inner.data.borrow();
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grad[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            accum(grads, b, |gb| {
                // dB += A^T . dC
                let ad = a.inner.data.borrow();
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += av * grad[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accum(grads, a, |g| {
                for (gi, d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            });
            accum(grads, b, |g| {
                for (gi, d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            });
        }
        Op::AddBias(x, bias) => {
            let n = bias.len();
            accum(grads, x, |g| {
                for (gi, d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            });
            accum(grads, bias, |g| {
                for (i, d) in grad.iter().enumerate() {
                    g[i % n] += d;
                }
            });
        }
        Op::Mul(a, b) => {
            accum(grads, a, |g| {
                let bd = b.inner.data.borrow();
                for i in 0..g.len() {
                    g[i] += grad[i] * bd[i];
                }
            });
            accum(grads, b, |g| {
                let ad = a.inner.data.borrow();
                for i in 0..g.len() {
                    g[i] += grad[i] * ad[i];
                }
            });
        }
        Op::Scale(x, c) => {
            accum(grads, x, |g| {
                for i in 0..g.len() {
                    g[i] += grad[i] * c;
                }
            });
        }
        Op::Relu(x) => {
            accum(grads, x, |g| {
                let xd = x.inner.data.borrow();
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        g[i] += grad[i];
                    }
                }
            });
        }
        Op::Transpose(x) => {
            let (m, n) = (x.rows(), x.cols());
            accum(grads, x, |g| {
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += grad[j * m + i];
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accum(grads, x, |g| {
                for (gi, d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            });
        }
        Op::SliceRows { x, start } => {
            let n = x.cols();
            accum(grads, x, |g| {
                for (i, d) in grad.iter().enumerate() {
                    g[start * n + i] += d;
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let sz = p.len();
                accum(grads, p, |g| {
                    for i in 0..sz {
                        g[i] += grad[offset + i];
                    }
                });
                offset += sz;
            }
        }
        Op::SliceCols { x, start } => {
            let n = x.cols();
            let w = node.cols();
            let m = node.rows();
            accum(grads, x, |g| {
                for i in 0..m {
                    for j in 0..w {
                        g[i * n + start + j] += grad[i * w + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let m = node.rows();
            let total = node.cols();
            let mut offset = 0;
            for p in parts {
                let n = p.cols();
                accum(grads, p, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += grad[i * total + offset + j];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Sum(x) => {
            accum(grads, x, |g| {
                for gi in g.iter_mut() {
                    *gi += grad[0];
                }
            });
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let d = *x.inner.shape.last().unwrap();
            let rows = x.len() / d;
            let xd = x.inner.data.borrow();
            let gd = gain.inner.data.borrow();
            accum(grads, x, |g| {
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dy_hat = grad * gain; then standard layernorm backward.
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dy = grad[r * d + j] * gd[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dy = grad[r * d + j] * gd[j];
                        g[r * d + j] +=
                            inv * (dy - sum_dy / d as f64 - xhat * sum_dy_xhat / d as f64);
                    }
                }
            });
            accum(grads, gain, |g| {
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        g[j] += grad[r * d + j] * (row[j] - mean) * inv;
                    }
                }
            });
            accum(grads, bias, |g| {
                for r in 0..rows {
                    for j in 0..d {
                        g[j] += grad[r * d + j];
                    }
                }
            });
        }
        Op::Softmax { x, causal } => {
            let (m, n) = (node.rows(), node.cols());
            let y = node.inner.data.borrow();
            accum(grads, x, |g| {
                for i in 0..m {
                    let valid = if *causal { (i + 1).min(n) } else { n };
                    let mut dot = 0.0;
                    for j in 0..valid {
                        dot += grad[i * n + j] * y[i * n + j];
                    }
                    for j in 0..valid {
                        g[i * n + j] += y[i * n + j] * (grad[i * n + j] - dot);
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
        } => {
            let (t, v) = (logits.rows(), logits.cols());
            let count = mask.iter().filter(|&&m| m).count() as f64;
            let xd = logits.inner.data.borrow();
            accum(grads, logits, |g| {
                let scale = grad[0] / count;
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    let row = &xd[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - max).exp() / z;
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        g[i * v + j] += scale * (p - onehot);
                    }
                }
            });
        }
        Op::Dropout { x, mult } => {
            accum(grads, x, |g| {
                for i in 0..g.len() {
                    g[i] += grad[i] * mult[i];
                }
            });
        }
        Op::Gather { table, ids } => {
            let d = table.cols();
            accum(grads, table, |g| {
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += grad[i * d + j];
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar() {
        let a = Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), vec![6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::Dim { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_vec(vec![1, 4], vec![5.0; 4]).unwrap();
        let gain = Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let gain = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let bias = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-12).unwrap();
        let d = y.data();
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!((d[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_single_position_returns_v() {
        let q = Tensor::from_vec(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let k = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = Tensor::from_vec(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let out = Tensor::scaled_dot_attention(&q, &k, &v, false).unwrap();
        assert_eq!(out.data(), vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn causal_position_zero_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let k = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let v = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let out1 = Tensor::scaled_dot_attention(&q, &k, &v, true).unwrap();
        // Perturb all v rows except row 0.
        let mut vd = v.data();
        for x in vd[3..].iter_mut() {
            *x += 10.0;
        }
        let v2 = Tensor::from_vec(vec![4, 3], vd).unwrap();
        let out2 = Tensor::scaled_dot_attention(&q, &k, &v2, true).unwrap();
        for j in 0..3 {
            assert!((out1.data()[j] - out2.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 4;
        let dh = 3;
        let q = Tensor::randn(vec![t, dh], 1.0, &mut rng);
        let k = Tensor::randn(vec![t, dh], 1.0, &mut rng);
        let v = Tensor::randn(vec![t, dh], 1.0, &mut rng);
        let out = Tensor::scaled_dot_attention(&q, &k, &v, false).unwrap();
        // Naive reference.
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for j in 0..t {
                for p in 0..dh {
                    scores[j] += qd[i * dh + p] * kd[j * dh + p];
                }
                scores[j] *= scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let probs: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
            for p in 0..dh {
                let mut expect = 0.0;
                for j in 0..t {
                    expect += probs[j] * vd[j * dh + p];
                }
                assert!((out.data()[i * dh + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::zeros(vec![1, 4]);
        let loss = logits.cross_entropy(&[2], &[true]).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut vals = vec![-50.0; 5];
        vals[3] = 50.0;
        let logits = Tensor::from_vec(vec![1, 5], vals).unwrap();
        let loss = logits.cross_entropy(&[3], &[true]).unwrap();
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, v) = (5, 7);
        let logits = Tensor::randn(vec![t, v], 2.0, &mut rng);
        let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
        let mask = vec![true, false, true, true, false];
        let loss = logits.cross_entropy(&targets, &mask).unwrap();
        let xd = logits.data();
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &xd[i * v..(i + 1) * v];
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
            count += 1.0;
        }
        assert!((loss.item() - total / count).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_all_masked_errors() {
        let logits = Tensor::zeros(vec![2, 3]);
        let err = logits.cross_entropy(&[0, 1], &[false, false]);
        assert!(matches!(err, Err(TensorError::AllMasked)));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let w = Tensor::zeros(vec![2, 3]).trainable();
        let loss = w.sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_skips_frozen() {
        let w = Tensor::from_vec(vec![2, 2], vec![1.0; 4]).unwrap(); // frozen
        let u = Tensor::from_vec(vec![2, 2], vec![1.0; 4]).unwrap().trainable();
        let loss = w.matmul(&u).unwrap().sum();
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert!(u.grad().is_some());
    }

    #[test]
    fn backward_twice_is_tape_consumed() {
        let w = Tensor::zeros(vec![2]).trainable();
        let loss = w.sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn dropout_zero_p_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn checked_mode_flags_nan() {
        set_checked(true);
        let a = Tensor::from_vec(vec![1, 1], vec![f64::INFINITY]).unwrap();
        let b = Tensor::from_vec(vec![1, 1], vec![f64::NEG_INFINITY]).unwrap();
        let r = a.add(&b);
        set_checked(false);
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let w = Tensor::zeros(vec![2]).trainable();
        let loss = no_grad(|| w.sum());
        // Graph was not recorded, so backward reaches nothing.
        loss.backward().unwrap();
        assert!(w.grad().is_none());
    }
}
