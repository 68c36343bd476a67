//! Pointwise primitives.
//!
//! Binary operands must have equal shapes, or the shape of one must be a
//! trailing suffix of the other's, in which case it is repeated over the
//! leading dimensions. No other broadcasting is performed.

use crate::error::{shape_err, DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::DTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Exp,
    Sigmoid,
    Negate,
    Sin,
    Cos,
    Abs,
}

/// Selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Binary(BinaryOp),
    Unary(UnaryOp),
    Scale(T),
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    shape_err(op, a, b)
}

/// Sums a full-size gradient down to a suffix-broadcast operand.
fn reduce_to<T>(g: &[T], n: usize) -> Vec<T>
where
    T: Scalar,
{
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

#[derive(Debug)]
struct BinaryRule {
    op: BinaryOp,
}

impl<T: Scalar> Backward<T> for BinaryRule {
    fn name(&self) -> &'static str {
        match self.op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (na, nb) = (a.len(), b.len());
        match self.op {
            BinaryOp::Add => vec![Some(reduce_to(grad, na)), Some(reduce_to(grad, nb))],
            BinaryOp::Sub => {
                let gb: Vec<T> = grad.iter().map(|&g| -g).collect();
                vec![Some(reduce_to(grad, na)), Some(reduce_to(&gb, nb))]
            }
            BinaryOp::Mul => {
                let ga: Vec<T> = grad.iter().enumerate().map(|(i, &g)| g * b[i % nb]).collect();
                let gb: Vec<T> = grad.iter().enumerate().map(|(i, &g)| g * a[i % na]).collect();
                vec![Some(reduce_to(&ga, na)), Some(reduce_to(&gb, nb))]
            }
        }
    }
}

#[derive(Debug)]
struct UnaryRule {
    op: UnaryOp,
}

impl<T: Scalar> Backward<T> for UnaryRule {
    fn name(&self) -> &'static str {
        match self.op {
            UnaryOp::Tanh => "tanh",
            UnaryOp::Exp => "exp",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Negate => "negate",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Abs => "abs",
        }
    }

    fn backward(&self, inputs: &[&DTensor<T>], output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let y = output.data();
        let one = T::one();
        let g: Vec<T> = match self.op {
            UnaryOp::Tanh => grad.iter().zip(y).map(|(&g, &y)| g * (one - y * y)).collect(),
            UnaryOp::Exp => grad.iter().zip(y).map(|(&g, &y)| g * y).collect(),
            UnaryOp::Sigmoid => grad.iter().zip(y).map(|(&g, &y)| g * y * (one - y)).collect(),
            UnaryOp::Negate => grad.iter().map(|&g| -g).collect(),
            UnaryOp::Sin => grad.iter().zip(x).map(|(&g, &x)| g * x.cos()).collect(),
            UnaryOp::Cos => grad.iter().zip(x).map(|(&g, &x)| -g * x.sin()).collect(),
            UnaryOp::Abs => grad
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        };
        vec![Some(g)]
    }
}

#[derive(Debug)]
struct ScaleRule<T> {
    factor: T,
}

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _inputs: &[&DTensor<T>], _output: &DTensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.factor).collect())]
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so large |x| never overflows exp.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let (na, nb) = (da.len(), db.len());
        let numel: usize = shape.iter().product();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<T> = (0..numel).map(|i| f(da[i % na], db[i % nb])).collect();
        let out = DTensor::new(&shape, data)?;
        Ok(self.push(out, vec![a, b], Box::new(BinaryRule { op })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let src = self.value(x);
        let f = |v: T| match op {
            UnaryOp::Tanh => v.tanh(),
            UnaryOp::Exp => v.exp(),
            UnaryOp::Sigmoid => sigmoid(v),
            UnaryOp::Negate => -v,
            UnaryOp::Sin => v.sin(),
            UnaryOp::Cos => v.cos(),
            UnaryOp::Abs => v.abs(),
        };
        let out = DTensor::from_fn(src.shape(), |i| f(src.data()[i]));
        self.push(out, vec![x], Box::new(UnaryRule { op }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Negate, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Cos, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Abs, x)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let src = self.value(x);
        let out = DTensor::from_fn(src.shape(), |i| src.data()[i] * factor);
        self.push(out, vec![x], Box::new(ScaleRule { factor }))
    }

    /// Single entry point over every pointwise primitive.
    pub fn elementwise(&mut self, op: Elementwise<T>, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Binary(_) => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(DiffError::Invalid {
                op: "elementwise",
                msg: format!("expected {arity} operands, got {}", inputs.len()),
            });
        }
        match op {
            Elementwise::Binary(b) => self.binary(b, inputs[0], inputs[1]),
            Elementwise::Unary(u) => Ok(self.unary(u, inputs[0])),
            Elementwise::Scale(c) => Ok(self.scale(inputs[0], c)),
        }
    }
}
