//! Elementwise, reduction and shape operations.

use super::{same_shape, Backward, Tape, Tensor, Var};
use crate::error::{invalid, FlowError, Result};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "min",
            Binary::Max => "max",
        }
    }

    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
            Binary::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
            Binary::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    fn partials(self, a: f32, b: f32) -> (f32, f32) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
            // ties route to the first operand
            Binary::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Binary::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        Binary::name(*self)
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
        let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
        for i in 0..grad.numel() {
            let (da, db) = self.partials(a.data()[i], b.data()[i]);
            let g = grad.data()[i];
            if let Some(ga) = ga.as_mut() {
                ga.data_mut()[i] = g * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb.data_mut()[i] = g * db;
            }
        }
        Ok(vec![ga, gb])
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sqrt,
    Exp,
    Abs,
    AddScalar(f32),
    MulScalar(f32),
    MinScalar(f32),
    MaxScalar(f32),
    LeakyRelu(f32),
}

impl Unary {
    fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::AddScalar(s) => x + s,
            Unary::MulScalar(s) => x * s,
            Unary::MinScalar(s) => {
                if x <= s {
                    x
                } else {
                    s
                }
            }
            Unary::MaxScalar(s) => {
                if x >= s {
                    x
                } else {
                    s
                }
            }
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Sqrt => 0.5 / y,
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::AddScalar(_) => 1.0,
            Unary::MulScalar(s) => s,
            Unary::MinScalar(s) => f32::from(x <= s),
            Unary::MaxScalar(s) => f32::from(x >= s),
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

impl Backward for Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Abs => "abs",
            Unary::AddScalar(_) => "add_scalar",
            Unary::MulScalar(_) => "mul_scalar",
            Unary::MinScalar(_) => "min_scalar",
            Unary::MaxScalar(_) => "max_scalar",
            Unary::LeakyRelu(_) => "leaky_relu",
        }
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let g = Tensor::from_fn(x.shape(), |i| {
            grad.data()[i] * self.derivative(x.data()[i], output.data()[i])
        });
        Ok(vec![Some(g)])
    }
}

/// Maps every flat index of `big` onto the flat index of `small`, where each
/// dimension of `small` either equals the one in `big` or is 1 (broadcast).
fn broadcast_map(big: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let mut small_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        small_strides[d] = if small[d] == 1 { 0 } else { stride };
        stride *= small[d];
    }
    let n: usize = big.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&small_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

struct SumOp {
    map: Vec<usize>,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "reduce_sum"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = Tensor::from_fn(inputs[0].shape(), |i| grad.data()[self.map[i]]);
        Ok(vec![Some(g)])
    }
}

struct ExpandOp {
    map: Vec<usize>,
}

impl Backward for ExpandOp {
    fn name(&self) -> &'static str {
        "expand"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        for (i, &j) in self.map.iter().enumerate() {
            g.data_mut()[j] += grad.data()[i];
        }
        Ok(vec![Some(g)])
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.reshape(inputs[0].shape())?)])
    }
}

/// (outer, dim, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct NarrowOp {
    axis: usize,
    start: usize,
}

impl Backward for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (outer, dim, inner) = split_axis(inputs[0].shape(), self.axis);
        let len = grad.shape()[self.axis];
        let mut g = Tensor::zeros(inputs[0].shape());
        for o in 0..outer {
            let src = &grad.data()[o * len * inner..(o + 1) * len * inner];
            let dst = o * dim * inner + self.start * inner;
            g.data_mut()[dst..dst + len * inner].copy_from_slice(src);
        }
        Ok(vec![Some(g)])
    }
}

struct ConcatOp {
    axis: usize,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (outer, total, inner) = split_axis(grad.shape(), self.axis);
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let dim = t.shape()[self.axis];
            if need {
                let mut g = Tensor::zeros(t.shape());
                for o in 0..outer {
                    let src = o * total * inner + offset * inner;
                    g.data_mut()[o * dim * inner..(o + 1) * dim * inner]
                        .copy_from_slice(&grad.data()[src..src + dim * inner]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += dim;
        }
        Ok(out)
    }
}

impl Tape {
    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op.name(), ta, tb)?;
        if matches!(op, Binary::Div) && tb.data().iter().any(|&v| v == 0.0) {
            return Err(FlowError::DivideByZero("div"));
        }
        let out = Tensor::from_fn(ta.shape(), |i| op.apply(ta.data()[i], tb.data()[i]));
        self.record(out, &[a, b], op)
    }

    fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| op.apply(ta.data()[i]));
        self.record(out, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(invalid("sqrt of a negative value"));
        }
        self.unary(Unary::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(Unary::AddScalar(s), a)
    }

    pub fn sub_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(Unary::AddScalar(-s), a)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(Unary::MulScalar(s), a)
    }

    pub fn div_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        if s == 0.0 {
            return Err(FlowError::DivideByZero("div_scalar"));
        }
        self.unary(Unary::MulScalar(1.0 / s), a)
    }

    pub fn min_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(Unary::MinScalar(s), a)
    }

    pub fn max_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(Unary::MaxScalar(s), a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::MulScalar(-1.0), a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    /// Sum over `axes` (all axes when `None`); reduced axes are removed.
    pub fn reduce_sum(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut keep = shape.clone();
        match axes {
            None => keep.iter_mut().for_each(|d| *d = 1),
            Some(axes) => {
                for &ax in axes {
                    if ax >= rank {
                        return Err(FlowError::InvalidAxis {
                            op: "reduce_sum",
                            axis: ax,
                            rank,
                        });
                    }
                    keep[ax] = 1;
                }
            }
        }
        let out_shape: Vec<usize> = match axes {
            None => Vec::new(),
            Some(axes) => (0..rank).filter(|d| !axes.contains(d)).map(|d| shape[d]).collect(),
        };
        let map = broadcast_map(&shape, &keep);
        let mut acc = vec![0.0f64; out_shape.iter().product()];
        let src = self.value(a).data();
        for (i, &j) in map.iter().enumerate() {
            acc[j] += f64::from(src[i]);
        }
        let out = Tensor::new(&out_shape, acc.into_iter().map(|v| v as f32).collect())?;
        self.record(out, &[a], SumOp { map })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce_sum(a, None)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.div_scalar(s, n as f32)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.record(out, &[a], ReshapeOp)
    }

    /// Broadcasts size-1 dimensions of `a` up to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let small = self.shape(a).to_vec();
        let ok = small.len() == shape.len()
            && small.iter().zip(shape).all(|(&s, &b)| s == b || s == 1);
        if !ok {
            return Err(FlowError::ShapeMismatch {
                op: "expand",
                lhs: small,
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_map(shape, &small);
        let src = self.value(a).data();
        let out = Tensor::new(shape, map.iter().map(|&j| src[j]).collect())?;
        self.record(out, &[a], ExpandOp { map })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(FlowError::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(invalid(format!(
                "narrow {start}+{len} exceeds dimension {}",
                shape[axis]
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * dim * inner + start * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        self.record(out, &[a], NarrowOp { axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(FlowError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(FlowError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let dim = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let out = Tensor::new(&out_shape, data)?;
        self.record(out, parts, ConcatOp { axis })
    }
}
