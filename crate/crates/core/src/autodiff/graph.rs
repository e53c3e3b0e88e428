use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{matmul_raw, softmax_raw, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with graph recording switched on or off, restoring the previous mode afterwards.
pub fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(enabled)));
    f()
}

/// Evaluate `f` without recording any graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

/// The closed operation set. `MatMul` carries transpose flags and `Expand`/`Scatter`
/// exist only as adjoints of `Sum`/`IndexSelect`.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul { ta: bool, tb: bool },
    Relu,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    IndexSelect { indices: Rc<[usize]>, shape: Vec<usize> },
    Concat { axis: usize },
    ScalarMul(f64),
    SoftmaxLogits,
    Expand { shape: Vec<usize> },
    Scatter { indices: Rc<[usize]>, shape: Vec<usize> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul { .. } => "matmul",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::IndexSelect { .. } => "index_select",
            OpKind::Concat { .. } => "concat",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::SoftmaxLogits => "softmax_logits",
            OpKind::Expand { .. } => "expand",
            OpKind::Scatter { .. } => "scatter",
        }
    }
}

pub(crate) enum Origin {
    Leaf,
    Op(OpKind),
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Tensor,
    pub(crate) origin: Origin,
    pub(crate) parents: Vec<Var>,
    pub(crate) requires_grad: bool,
}

/// A node of the differentiable computation graph.
///
/// Cloning is cheap and shares the node. Graphs are `!Send`: each lives on the worker
/// that built it.
#[derive(Clone)]
pub struct Var(pub(crate) Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape { op, detail: format!("argument shapes {:?}", shapes) }
}

impl Var {
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            origin: Origin::Leaf,
            parents: Vec::new(),
            requires_grad,
        }))
    }

    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    pub fn scalar(value: f64) -> Var {
        Var::constant(Tensor::scalar(value))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.origin, Origin::Leaf)
    }

    pub fn op(&self) -> Option<&OpKind> {
        match &self.0.origin {
            Origin::Leaf => None,
            Origin::Op(op) => Some(op),
        }
    }

    pub fn parents(&self) -> &[Var] {
        &self.0.parents
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.0.value.data()[0]
    }

    /// Same value, severed from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn validate_finite(&self) -> bool {
        self.0.value.all_finite()
    }

    pub(crate) fn record(op: OpKind, value: Tensor, parents: &[Var]) -> Var {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            origin: Origin::Op(op),
            parents: if requires_grad { parents.to_vec() } else { Vec::new() },
            requires_grad,
        }))
    }

    fn same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(shape_err(op, &[self.shape(), other.shape()]))
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "add")?;
        Ok(self.add_(other))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "sub")?;
        Ok(self.sub_(other))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "mul")?;
        Ok(self.mul_(other))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposition of either operand.
    pub fn matmul_t(&self, other: &Var, ta: bool, tb: bool) -> Result<Var> {
        let err = || shape_err("matmul", &[self.shape(), other.shape()]);
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(err());
        }
        let (ar, ac) = (self.shape()[0], self.shape()[1]);
        let (br, bc) = (other.shape()[0], other.shape()[1]);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(err());
        }
        Ok(self.matmul_(other, ta, tb))
    }

    pub fn relu(&self) -> Var {
        Var::record(OpKind::Relu, self.value().map(|v| v.max(0.0)), std::slice::from_ref(self))
    }

    pub fn tanh(&self) -> Var {
        Var::record(OpKind::Tanh, self.value().map(f64::tanh), std::slice::from_ref(self))
    }

    pub fn exp(&self) -> Var {
        Var::record(OpKind::Exp, self.value().map(f64::exp), std::slice::from_ref(self))
    }

    pub fn log(&self) -> Var {
        Var::record(OpKind::Log, self.value().map(f64::ln), std::slice::from_ref(self))
    }

    pub fn sum(&self) -> Var {
        let total: f64 = self.value().data().iter().sum();
        Var::record(OpKind::Sum, Tensor::scalar(total), std::slice::from_ref(self))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel().max(1) as f64;
        let total: f64 = self.value().data().iter().sum();
        Var::record(OpKind::Mean, Tensor::scalar(total / n), std::slice::from_ref(self))
    }

    pub fn scalar_mul(&self, c: f64) -> Var {
        Var::record(OpKind::ScalarMul(c), self.value().map(|v| v * c), std::slice::from_ref(self))
    }

    pub fn neg(&self) -> Var {
        self.scalar_mul(-1.0)
    }

    /// Gather flat entries `indices` into a tensor of `shape`. Doubles as reshape.
    pub fn index_select(&self, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let numel = self.value().numel();
        if indices.iter().any(|&i| i >= numel) || shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Shape {
                op: "index_select",
                detail: format!(
                    "{} indices into {:?} (numel {}) for output shape {:?}",
                    indices.len(),
                    self.shape(),
                    numel,
                    shape
                ),
            });
        }
        Ok(self.index_select_(indices.into(), shape.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let indices: Vec<usize> = (0..self.value().numel()).collect();
        self.index_select(&indices, shape)
    }

    /// Row-wise softmax over the last axis (max-subtracted).
    pub fn softmax_logits(&self) -> Var {
        Var::record(OpKind::SoftmaxLogits, softmax_raw(self.value()), std::slice::from_ref(self))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "no arguments".into(),
        })?;
        let rank = first.shape().len();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
        if axis >= rank
            || parts.iter().any(|p| {
                p.shape().len() != rank
                    || (0..rank).any(|d| d != axis && p.shape()[d] != first.shape()[d])
            })
        {
            return Err(shape_err("concat", &shapes));
        }
        Ok(Var::concat_(parts, axis))
    }

    // Unchecked variants used by the adjoints, where shapes are known to agree.

    pub(crate) fn add_(&self, other: &Var) -> Var {
        Var::record(OpKind::Add, self.value().zip(other.value(), |a, b| a + b), &[self.clone(), other.clone()])
    }

    pub(crate) fn sub_(&self, other: &Var) -> Var {
        Var::record(OpKind::Sub, self.value().zip(other.value(), |a, b| a - b), &[self.clone(), other.clone()])
    }

    pub(crate) fn mul_(&self, other: &Var) -> Var {
        Var::record(OpKind::Mul, self.value().zip(other.value(), |a, b| a * b), &[self.clone(), other.clone()])
    }

    pub(crate) fn matmul_(&self, other: &Var, ta: bool, tb: bool) -> Var {
        Var::record(
            OpKind::MatMul { ta, tb },
            matmul_raw(self.value(), other.value(), ta, tb),
            &[self.clone(), other.clone()],
        )
    }

    pub(crate) fn index_select_(&self, indices: Rc<[usize]>, shape: Vec<usize>) -> Var {
        let src = self.value().data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(shape.clone(), data);
        Var::record(OpKind::IndexSelect { indices, shape }, value, std::slice::from_ref(self))
    }

    pub(crate) fn scatter_(&self, indices: Rc<[usize]>, shape: Vec<usize>) -> Var {
        let mut data = vec![0.0; shape.iter().product()];
        for (&i, &v) in indices.iter().zip(self.value().data()) {
            data[i] += v;
        }
        let value = Tensor::from_parts(shape.clone(), data);
        Var::record(OpKind::Scatter { indices, shape }, value, std::slice::from_ref(self))
    }

    pub(crate) fn expand_(&self, shape: Vec<usize>) -> Var {
        let value = Tensor::full(&shape, self.item());
        Var::record(OpKind::Expand { shape }, value, std::slice::from_ref(self))
    }

    pub(crate) fn concat_(parts: &[Var], axis: usize) -> Var {
        let (outer, inner, dims) = concat_geometry(parts.iter().map(|p| p.shape()), axis);
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                let block = d * inner;
                data.extend_from_slice(&p.value().data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total;
        Var::record(OpKind::Concat { axis }, Tensor::from_parts(shape, data), parts)
    }
}

/// `(outer, inner, per-part axis sizes)` for a concatenation along `axis`.
pub(crate) fn concat_geometry<'a>(
    shapes: impl Iterator<Item = &'a [usize]>,
    axis: usize,
) -> (usize, usize, Vec<usize>) {
    let mut outer = 1;
    let mut inner = 1;
    let mut dims = Vec::new();
    for (k, s) in shapes.enumerate() {
        if k == 0 {
            outer = s[..axis].iter().product();
            inner = s[axis + 1..].iter().product();
        }
        dims.push(s[axis]);
    }
    (outer, inner, dims)
}

/// Generic entry point over the operation set.
pub fn apply(op: &OpKind, args: &[Var]) -> Result<Var> {
    let arity = |n: usize| -> Result<()> {
        if args.len() == n {
            Ok(())
        } else {
            Err(Error::Shape { op: op.name(), detail: format!("expected {} arguments, got {}", n, args.len()) })
        }
    };
    match op {
        OpKind::Add => {
            arity(2)?;
            args[0].add(&args[1])
        }
        OpKind::Sub => {
            arity(2)?;
            args[0].sub(&args[1])
        }
        OpKind::Mul => {
            arity(2)?;
            args[0].mul(&args[1])
        }
        OpKind::MatMul { ta, tb } => {
            arity(2)?;
            args[0].matmul_t(&args[1], *ta, *tb)
        }
        OpKind::Relu => arity(1).map(|_| args[0].relu()),
        OpKind::Tanh => arity(1).map(|_| args[0].tanh()),
        OpKind::Exp => arity(1).map(|_| args[0].exp()),
        OpKind::Log => arity(1).map(|_| args[0].log()),
        OpKind::Sum => arity(1).map(|_| args[0].sum()),
        OpKind::Mean => arity(1).map(|_| args[0].mean()),
        OpKind::ScalarMul(c) => arity(1).map(|_| args[0].scalar_mul(*c)),
        OpKind::SoftmaxLogits => arity(1).map(|_| args[0].softmax_logits()),
        OpKind::IndexSelect { indices, shape } => {
            arity(1)?;
            args[0].index_select(indices, shape)
        }
        OpKind::Concat { axis } => Var::concat(args, *axis),
        OpKind::Expand { shape } => {
            arity(1)?;
            if !args[0].value().is_scalar() {
                return Err(shape_err("expand", &[args[0].shape()]));
            }
            Ok(args[0].expand_(shape.clone()))
        }
        OpKind::Scatter { indices, shape } => {
            arity(1)?;
            let numel: usize = shape.iter().product();
            if indices.len() != args[0].value().numel() || indices.iter().any(|&i| i >= numel) {
                return Err(shape_err("scatter", &[args[0].shape()]));
            }
            Ok(args[0].scatter_(indices.clone(), shape.clone()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Var {
        Var::constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn leaf_preserves_value_and_shape() {
        let x = Var::leaf(Tensor::scalar(3.0), true);
        assert_eq!(x.value().data(), &[3.0]);
        let m = Var::leaf(Tensor::zeros(&[2, 3]), true);
        assert_eq!(m.shape(), &[2, 3]);
    }

    #[test]
    fn forward_values() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[1., 1.]);
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3., 7.]);
        let p = t(&[4], &[0.; 4]).softmax_logits();
        assert_eq!(p.value().data(), &[0.25; 4]);
        assert_eq!(t(&[2], &[-1., 2.]).relu().value().data(), &[0., 2.]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = t(&[2, 2], &[0.; 4]);
        let b = t(&[3, 1], &[0.; 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
        assert!(a.add(&b).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn concat_along_columns() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.value().data(), &[1., 3., 4., 2., 5., 6.]);
    }

    #[test]
    fn validate_finite_flags_overflow() {
        assert!(!t(&[1], &[0.0]).log().validate_finite());
        assert!(!t(&[1], &[1e6]).exp().validate_finite());
        assert!(t(&[2], &[0.5, -0.5]).tanh().validate_finite());
    }

    #[test]
    fn detach_keeps_bits() {
        let x = Var::leaf(Tensor::vector(vec![0.1, f64::MIN_POSITIVE, -3.5]), true);
        let d = x.detach();
        assert!(!d.requires_grad());
        let bits = |v: &Var| v.value().data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&d));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Var::leaf(Tensor::scalar(2.0), true);
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(y.parents().is_empty());
        assert!(x.mul(&x).unwrap().requires_grad());
    }
}
