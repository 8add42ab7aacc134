//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are evaluated eagerly as they are recorded; the tape keeps each
//! node's value and the ids of its inputs. [`Tape::backward`] walks the nodes in
//! reverse id order exactly once and returns the vector-Jacobian product for a
//! given output seed. The tape is not consumed, so several seeds can be pulled
//! back through the same recording.
//!
//! Values are flat `f64` buffers; matrices are row-major. Elementwise binary
//! operations require identical shapes; use [`Tape::broadcast`] to expand.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{invalid, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// rows, columns
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    id: usize,
    shape: Shape,
}

impl Var {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatVec(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Power(usize, f64),
    Tanh(usize),
    Silu(usize),
    Conv1d { x: usize, w: usize, width: usize },
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    Broadcast(usize),
    Atan2(usize, usize),
    Gather { src: usize, indices: Vec<usize> },
    Reshape(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatVec(a, b)
            | Op::MatMul(a, b)
            | Op::Atan2(a, b) => vec![*a, *b],
            Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Power(a, _)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Broadcast(a)
            | Op::Reshape(a) => vec![*a],
            Op::Slice { src, .. } | Op::Gather { src, .. } => vec![*src],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        assert_eq!(var.tape, self.tape, "variable belongs to another tape");
        match self.grads.get(var.id) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; var.len()],
        }
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn shape_of(&self, var: Var) -> Option<Shape> {
        self.shapes.get(var.id).copied()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same(a: Var, b: Var, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return invalid(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        Var {
            tape: self.id,
            id,
            shape,
        }
    }

    fn own(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return invalid("variable is not recorded on this tape");
        }
        Ok(())
    }

    fn leaf(&mut self, shape: Shape, value: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if shape.len() != value.len() {
            return invalid(format!(
                "leaf of shape {shape:?} given {} values",
                value.len()
            ));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            id,
            shape,
        })
    }

    /// Differentiable input.
    pub fn variable(&mut self, shape: Shape, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, shape: Shape, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    pub fn scalar_variable(&mut self, x: f64) -> Var {
        self.leaf(Shape::Scalar, vec![x], true).expect("scalar leaf")
    }

    pub fn vector_variable(&mut self, x: &[f64]) -> Var {
        self.leaf(Shape::Vector(x.len()), x.to_vec(), true)
            .expect("vector leaf")
    }

    pub fn vector_constant(&mut self, x: &[f64]) -> Var {
        self.leaf(Shape::Vector(x.len()), x.to_vec(), false)
            .expect("vector leaf")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.own(a)?;
        self.own(b)?;
        check_same(a, b, name)?;
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(op, a.shape, value))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.own(a)?;
        let value = self.nodes[a.id].value.iter().map(|&x| f(x)).collect();
        Ok(self.push(op, a.shape, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a.id, b.id), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a.id, b.id), |x, y| x * y)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a.id, b.id), |x, y| x / y)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(y, x, "atan2", Op::Atan2(y.id, x.id), f64::atan2)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a.id, factor), |x| factor * x)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a.id), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a.id), f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a.id), f64::ln)
    }

    /// Elementwise `a^p` for a constant exponent.
    pub fn power(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, Op::Power(a.id, p), |x| x.powf(p))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.id), f64::tanh)
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a.id), |x| x * sigmoid(x))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.own(a)?;
        let s = self.nodes[a.id].value.iter().sum();
        Ok(self.push(Op::Sum(a.id), Shape::Scalar, vec![s]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.own(a)?;
        if a.is_empty() {
            return invalid("mean of an empty value");
        }
        let n = a.len() as f64;
        let s = self.nodes[a.id].value.iter().sum::<f64>() / n;
        Ok(self.push(Op::Mean(a.id), Shape::Scalar, vec![s]))
    }

    /// Matrix-vector product.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        self.own(m)?;
        self.own(v)?;
        let (r, c) = match (m.shape, v.shape) {
            (Shape::Matrix(r, c), Shape::Vector(n)) if n == c => (r, c),
            _ => {
                return invalid(format!(
                    "matvec: incompatible shapes {:?} and {:?}",
                    m.shape, v.shape
                ))
            }
        };
        let mv = &self.nodes[m.id].value;
        let vv = &self.nodes[v.id].value;
        let out = (0..r)
            .map(|i| {
                mv[i * c..(i + 1) * c]
                    .iter()
                    .zip(vv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(self.push(Op::MatVec(m.id, v.id), Shape::Vector(r), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.own(a)?;
        self.own(b)?;
        let (r, k, c) = match (a.shape, b.shape) {
            (Shape::Matrix(r, k), Shape::Matrix(k2, c)) if k == k2 => (r, k, c),
            _ => {
                return invalid(format!(
                    "matmul: incompatible shapes {:?} and {:?}",
                    a.shape, b.shape
                ))
            }
        };
        let out = matmul_raw(&self.nodes[a.id].value, &self.nodes[b.id].value, r, k, c);
        Ok(self.push(Op::MatMul(a.id, b.id), Shape::Matrix(r, c), out))
    }

    /// Same-padded 1D convolution (cross-correlation) with an odd kernel width.
    ///
    /// `x` is `(in_channels, length)`, `w` is `(out_channels, in_channels * width)`
    /// with the taps of each input channel stored contiguously.
    pub fn conv1d(&mut self, x: Var, w: Var, width: usize) -> Result<Var> {
        self.own(x)?;
        self.own(w)?;
        if width == 0 || width % 2 == 0 {
            return invalid(format!("conv1d: kernel width {width} must be odd"));
        }
        let (cin, len, cout) = match (x.shape, w.shape) {
            (Shape::Matrix(cin, len), Shape::Matrix(cout, wk)) if wk == cin * width => {
                (cin, len, cout)
            }
            _ => {
                return invalid(format!(
                    "conv1d: incompatible shapes {:?} and {:?} for width {width}",
                    x.shape, w.shape
                ))
            }
        };
        let xv = &self.nodes[x.id].value;
        let wv = &self.nodes[w.id].value;
        let pad = width / 2;
        let mut out = vec![0.0; cout * len];
        for o in 0..cout {
            let row = &mut out[o * len..(o + 1) * len];
            for c in 0..cin {
                let xr = &xv[c * len..(c + 1) * len];
                for j in 0..width {
                    let wt = wv[o * cin * width + c * width + j];
                    if wt == 0.0 {
                        continue;
                    }
                    // out[l] += wt * x[l + j - pad]
                    let lo = pad.saturating_sub(j);
                    let hi = (len + pad).saturating_sub(j).min(len);
                    for l in lo..hi {
                        row[l] += wt * xr[l + j - pad];
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv1d {
                x: x.id,
                w: w.id,
                width,
            },
            Shape::Matrix(cout, len),
            out,
        ))
    }

    /// Flat concatenation. Matrices with equal column counts stack by rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of nothing");
        }
        for p in parts {
            self.own(*p)?;
        }
        let shape = match parts[0].shape {
            Shape::Matrix(_, c) => {
                let mut rows = 0;
                for p in parts {
                    match p.shape {
                        Shape::Matrix(r, c2) if c2 == c => rows += r,
                        s => {
                            return invalid(format!(
                                "concat: cannot stack {s:?} onto {c} columns"
                            ))
                        }
                    }
                }
                Shape::Matrix(rows, c)
            }
            _ => {
                if parts.iter().any(|p| matches!(p.shape, Shape::Matrix(..))) {
                    return invalid("concat: cannot mix matrices and vectors");
                }
                Shape::Vector(parts.iter().map(|p| p.len()).sum())
            }
        };
        let mut value = Vec::with_capacity(shape.len());
        for p in parts {
            value.extend_from_slice(&self.nodes[p.id].value);
        }
        Ok(self.push(
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            shape,
            value,
        ))
    }

    /// Contiguous range of the flat buffer, reinterpreted as `shape`.
    pub fn slice(&mut self, src: Var, start: usize, shape: Shape) -> Result<Var> {
        self.own(src)?;
        let end = start + shape.len();
        if end > src.len() {
            return invalid(format!(
                "slice: range {start}..{end} exceeds length {}",
                src.len()
            ));
        }
        let value = self.nodes[src.id].value[start..end].to_vec();
        Ok(self.push(Op::Slice { src: src.id, start }, shape, value))
    }

    /// Scalar to any shape, or a length-`r` vector to an `(r, c)` matrix by
    /// repeating each entry along its row.
    pub fn broadcast(&mut self, a: Var, shape: Shape) -> Result<Var> {
        self.own(a)?;
        let av = &self.nodes[a.id].value;
        let value = match (a.shape, shape) {
            (Shape::Scalar, s) => vec![av[0]; s.len()],
            (Shape::Vector(r), Shape::Matrix(r2, c)) if r == r2 => {
                av.iter().flat_map(|&x| std::iter::repeat(x).take(c)).collect()
            }
            (from, to) => return invalid(format!("broadcast: {from:?} to {to:?}")),
        };
        Ok(self.push(Op::Broadcast(a.id), shape, value))
    }

    /// `out[k] = src[indices[k]]`
    pub fn gather(&mut self, src: Var, indices: &[usize], shape: Shape) -> Result<Var> {
        self.own(src)?;
        if shape.len() != indices.len() {
            return invalid("gather: shape does not match index count");
        }
        let sv = &self.nodes[src.id].value;
        let mut value = Vec::with_capacity(indices.len());
        for &i in indices {
            match sv.get(i) {
                Some(&x) => value.push(x),
                None => return invalid(format!("gather: index {i} out of range")),
            }
        }
        Ok(self.push(
            Op::Gather {
                src: src.id,
                indices: indices.to_vec(),
            },
            shape,
            value,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        self.own(a)?;
        if shape.len() != a.len() {
            return invalid(format!("reshape: {:?} to {shape:?}", a.shape));
        }
        let value = self.nodes[a.id].value.clone();
        Ok(self.push(Op::Reshape(a.id), shape, value))
    }

    /// Reverse sweep from `output`.
    ///
    /// `seed` defaults to 1 for scalar outputs; otherwise it must match the
    /// output length and the result is the vector-Jacobian product.
    pub fn backward(&self, output: Var, seed: Option<&[f64]>) -> Result<Gradients> {
        self.own(output)?;
        let seed = match seed {
            Some(s) if s.len() == output.len() => s.to_vec(),
            Some(s) => {
                return invalid(format!(
                    "seed length {} does not match output length {}",
                    s.len(),
                    output.len()
                ))
            }
            None if output.shape == Shape::Scalar => vec![1.0],
            None => return invalid("non-scalar output requires an explicit seed"),
        };
        let n = output.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.id] = Some(seed);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes[..n].iter().map(|nd| nd.shape).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.as_slice();
        let wants = |i: usize| self.nodes[i].needs_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[i].needs_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()]);
            f(slot);
        };
        let elementwise = |i: usize, acc: &mut dyn FnMut(usize, &mut dyn FnMut(&mut [f64])), d: &dyn Fn(usize) -> f64| {
            acc(i, &mut |s: &mut [f64]| {
                for (k, sk) in s.iter_mut().enumerate() {
                    *sk += g[k] * d(k);
                }
            });
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                elementwise(a, &mut acc, &|k| vb[k]);
                elementwise(b, &mut acc, &|k| va[k]);
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                elementwise(a, &mut acc, &|k| 1.0 / vb[k]);
                elementwise(b, &mut acc, &|k| -va[k] / (vb[k] * vb[k]));
            }
            &Op::Atan2(y, x) => {
                let (vy, vx) = (val(y), val(x));
                let r2 = |k: usize| vx[k] * vx[k] + vy[k] * vy[k];
                elementwise(y, &mut acc, &|k| vx[k] / r2(k));
                elementwise(x, &mut acc, &|k| -vy[k] / r2(k));
            }
            &Op::Scale(a, f) => elementwise(a, &mut acc, &|_| f),
            &Op::Sin(a) => {
                let va = val(a);
                elementwise(a, &mut acc, &|k| va[k].cos());
            }
            &Op::Cos(a) => {
                let va = val(a);
                elementwise(a, &mut acc, &|k| -va[k].sin());
            }
            &Op::Exp(a) => {
                let out = &node.value;
                elementwise(a, &mut acc, &|k| out[k]);
            }
            &Op::Log(a) => {
                let va = val(a);
                elementwise(a, &mut acc, &|k| 1.0 / va[k]);
            }
            &Op::Power(a, p) => {
                let va = val(a);
                elementwise(a, &mut acc, &|k| p * va[k].powf(p - 1.0));
            }
            &Op::Tanh(a) => {
                let out = &node.value;
                elementwise(a, &mut acc, &|k| 1.0 - out[k] * out[k]);
            }
            &Op::Silu(a) => {
                let va = val(a);
                elementwise(a, &mut acc, &|k| {
                    let s = sigmoid(va[k]);
                    s + va[k] * s * (1.0 - s)
                });
            }
            &Op::Sum(a) => acc(a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean(a) => {
                let n = self.nodes[a].value.len() as f64;
                acc(a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n))
            }
            &Op::MatVec(m, v) => {
                let (mv, vv) = (val(m), val(v));
                let c = vv.len();
                acc(m, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..c {
                            s[i * c + j] += gi * vv[j];
                        }
                    }
                });
                acc(v, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..c {
                            s[j] += mv[i * c + j] * gi;
                        }
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (Shape::Matrix(r, k), Shape::Matrix(_, c)) =
                    (self.nodes[a].shape, self.nodes[b].shape)
                else {
                    unreachable!()
                };
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    // dA = G B^T
                    acc(a, &mut |s| {
                        for i in 0..r {
                            for p in 0..k {
                                let mut t = 0.0;
                                for j in 0..c {
                                    t += g[i * c + j] * vb[p * c + j];
                                }
                                s[i * k + p] += t;
                            }
                        }
                    });
                }
                if wants(b) {
                    // dB = A^T G
                    acc(b, &mut |s| {
                        for i in 0..r {
                            for p in 0..k {
                                let aip = va[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..c {
                                    s[p * c + j] += aip * g[i * c + j];
                                }
                            }
                        }
                    });
                }
            }
            &Op::Conv1d { x, w, width } => {
                let (Shape::Matrix(cin, len), Shape::Matrix(cout, _)) =
                    (self.nodes[x].shape, node.shape)
                else {
                    unreachable!()
                };
                let (xv, wv) = (val(x), val(w));
                let pad = width / 2;
                if wants(x) {
                    acc(x, &mut |s| {
                        for o in 0..cout {
                            let go = &g[o * len..(o + 1) * len];
                            for c in 0..cin {
                                for j in 0..width {
                                    let wt = wv[o * cin * width + c * width + j];
                                    let lo = pad.saturating_sub(j);
                                    let hi = (len + pad).saturating_sub(j).min(len);
                                    for l in lo..hi {
                                        s[c * len + l + j - pad] += wt * go[l];
                                    }
                                }
                            }
                        }
                    });
                }
                if wants(w) {
                    acc(w, &mut |s| {
                        for o in 0..cout {
                            let go = &g[o * len..(o + 1) * len];
                            for c in 0..cin {
                                let xr = &xv[c * len..(c + 1) * len];
                                for j in 0..width {
                                    let lo = pad.saturating_sub(j);
                                    let hi = (len + pad).saturating_sub(j).min(len);
                                    let mut t = 0.0;
                                    for l in lo..hi {
                                        t += xr[l + j - pad] * go[l];
                                    }
                                    s[o * cin * width + c * width + j] += t;
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    acc(p, &mut |s| {
                        s.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(x, y)| *x += y)
                    });
                    off += n;
                }
            }
            &Op::Slice { src, start } => {
                acc(src, &mut |s| {
                    s[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y)
                });
            }
            &Op::Broadcast(a) => match self.nodes[a].shape {
                Shape::Scalar => acc(a, &mut |s| s[0] += g.iter().sum::<f64>()),
                Shape::Vector(r) => {
                    let c = g.len() / r;
                    acc(a, &mut |s| {
                        for (i, si) in s.iter_mut().enumerate() {
                            *si += g[i * c..(i + 1) * c].iter().sum::<f64>();
                        }
                    })
                }
                Shape::Matrix(..) => unreachable!(),
            },
            Op::Gather { src, indices } => {
                acc(*src, &mut |s| {
                    for (k, &i) in indices.iter().enumerate() {
                        s[i] += g[k];
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}
