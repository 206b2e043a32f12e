//! Elementwise, reduction, shape and matrix operations.
//!
//! Every backward rule is expressed with graph operations so gradients of
//! gradients stay exact. Rules that need a local derivative that is itself
//! non-differentiable (relu / clamp masks) insert the mask as a constant
//! leaf, which is the correct almost-everywhere derivative.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::{push, GraphExt, Op, Tensor, Var};

fn assert_same_shape(a: &Var, b: &Var, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

fn unary(v: &Var, value: Tensor, op: Rc<dyn Op>) -> Var {
    push(v.graph(), value, Some(op), vec![v.id()])
}

fn binary(a: &Var, b: &Var, value: Tensor, op: Rc<dyn Op>) -> Var {
    assert!(
        Rc::ptr_eq(a.graph(), b.graph()),
        "operands belong to different graphs"
    );
    push(a.graph(), value, Some(op), vec![a.id(), b.id()])
}

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

struct AddOp;
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.clone()), Some(cot.clone())]
    }
}

struct SubOp;
impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.clone()), Some(cot.neg())]
    }
}

struct MulOp;
impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.mul(&inputs[1])), Some(cot.mul(&inputs[0]))]
    }
}

struct DivOp;
impl Op for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn vjp(&self, inputs: &[Var], output: &Var, cot: &Var) -> Vec<Option<Var>> {
        // d(a/b)/da = 1/b ; d(a/b)/db = -out/b
        let da = cot.div(&inputs[1]);
        let db = cot.mul(output).div(&inputs[1]).neg();
        vec![Some(da), Some(db)]
    }
}

struct NegOp;
impl Op for NegOp {
    fn name(&self) -> &'static str {
        "neg"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.neg())]
    }
}

struct ScaleOp(f64);
impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.scale(self.0))]
    }
}

struct AddConstOp;
impl Op for AddConstOp {
    fn name(&self) -> &'static str {
        "add_const"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.clone())]
    }
}

/// c - x
struct RsubConstOp;
impl Op for RsubConstOp {
    fn name(&self) -> &'static str {
        "rsub_const"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.neg())]
    }
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

struct ExpOp;
impl Op for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn vjp(&self, _inputs: &[Var], output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.mul(output))]
    }
}

struct LogOp;
impl Op for LogOp {
    fn name(&self) -> &'static str {
        "log"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.div(&inputs[0]))]
    }
}

struct SigmoidOp;
impl Op for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn vjp(&self, _inputs: &[Var], output: &Var, cot: &Var) -> Vec<Option<Var>> {
        // s' = s (1 - s)
        let one_minus = output.rsub_const(1.0);
        vec![Some(cot.mul(output).mul(&one_minus))]
    }
}

struct SiluOp;
impl Op for SiluOp {
    fn name(&self) -> &'static str {
        "silu"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        // d/dx x·σ(x) = σ(x)·(1 + x·(1 - σ(x)))
        let x = &inputs[0];
        let s = x.sigmoid();
        let d = s.mul(&x.mul(&s.rsub_const(1.0)).add_const(1.0));
        vec![Some(cot.mul(&d))]
    }
}

struct ReluOp;
impl Op for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let mask = inputs[0].value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mask = inputs[0].graph().leaf(mask);
        vec![Some(cot.mul(&mask))]
    }
}

struct ClampOp {
    lo: f64,
    hi: f64,
}
impl Op for ClampOp {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let (lo, hi) = (self.lo, self.hi);
        let mask = inputs[0]
            .value()
            .mapv(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
        let mask = inputs[0].graph().leaf(mask);
        vec![Some(cot.mul(&mask))]
    }
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (adjoint pairs)
// ---------------------------------------------------------------------------

struct SumAllOp;
impl Op for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.broadcast_full(&inputs[0].shape()))]
    }
}

struct BroadcastFullOp;
impl Op for BroadcastFullOp {
    fn name(&self) -> &'static str {
        "broadcast_full"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.sum_all())]
    }
}

/// [n, rest..] -> [rest..]
struct SumAxis0Op;
impl Op for SumAxis0Op {
    fn name(&self) -> &'static str {
        "sum_axis0"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let n = inputs[0].shape()[0];
        vec![Some(cot.broadcast_axis0(n))]
    }
}

/// [rest..] -> [n, rest..]
struct BroadcastAxis0Op;
impl Op for BroadcastAxis0Op {
    fn name(&self) -> &'static str {
        "broadcast_axis0"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.sum_axis0())]
    }
}

/// [c, h, w] -> [c]
struct SumSpatialOp;
impl Op for SumSpatialOp {
    fn name(&self) -> &'static str {
        "sum_spatial"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let shape = inputs[0].shape();
        vec![Some(cot.broadcast_spatial(shape[1], shape[2]))]
    }
}

/// [c] -> [c, h, w]
struct BroadcastSpatialOp;
impl Op for BroadcastSpatialOp {
    fn name(&self) -> &'static str {
        "broadcast_spatial"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.sum_spatial())]
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

struct ReshapeOp {
    original: Vec<usize>,
}
impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.reshape(&self.original))]
    }
}

struct TransposeOp;
impl Op for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.transpose2())]
    }
}

struct TakeOp {
    index: usize,
}
impl Op for TakeOp {
    fn name(&self) -> &'static str {
        "take"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let n = inputs[0].shape()[0];
        vec![Some(cot.scatter(self.index, n))]
    }
}

struct ScatterOp {
    index: usize,
}
impl Op for ScatterOp {
    fn name(&self) -> &'static str {
        "scatter"
    }
    fn vjp(&self, _inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        vec![Some(cot.take(self.index))]
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

struct MatMulOp;
impl Op for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let da = cot.matmul(&inputs[1].transpose2());
        let db = inputs[0].transpose2().matmul(cot);
        vec![Some(da), Some(db)]
    }
}

pub(crate) fn as_mat(t: &Tensor) -> Array2<f64> {
    let shape = t.shape();
    assert_eq!(shape.len(), 2, "as_mat on tensor of rank {}", shape.len());
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 tensor")
        .to_owned()
}

// ---------------------------------------------------------------------------
// Var API
// ---------------------------------------------------------------------------

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        assert_same_shape(self, other, "add");
        let v = &*self.value() + &*other.value();
        binary(self, other, v, Rc::new(AddOp))
    }

    pub fn sub(&self, other: &Var) -> Var {
        assert_same_shape(self, other, "sub");
        let v = &*self.value() - &*other.value();
        binary(self, other, v, Rc::new(SubOp))
    }

    pub fn mul(&self, other: &Var) -> Var {
        assert_same_shape(self, other, "mul");
        let v = &*self.value() * &*other.value();
        binary(self, other, v, Rc::new(MulOp))
    }

    pub fn div(&self, other: &Var) -> Var {
        assert_same_shape(self, other, "div");
        let v = &*self.value() / &*other.value();
        binary(self, other, v, Rc::new(DivOp))
    }

    pub fn neg(&self) -> Var {
        let v = self.value().mapv(|x| -x);
        unary(self, v, Rc::new(NegOp))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().mapv(|x| c * x);
        unary(self, v, Rc::new(ScaleOp(c)))
    }

    pub fn add_const(&self, c: f64) -> Var {
        let v = self.value().mapv(|x| x + c);
        unary(self, v, Rc::new(AddConstOp))
    }

    /// c - x
    pub fn rsub_const(&self, c: f64) -> Var {
        let v = self.value().mapv(|x| c - x);
        unary(self, v, Rc::new(RsubConstOp))
    }

    pub fn exp(&self) -> Var {
        let v = self.value().mapv(f64::exp);
        unary(self, v, Rc::new(ExpOp))
    }

    pub fn log(&self) -> Var {
        let v = self.value().mapv(f64::ln);
        unary(self, v, Rc::new(LogOp))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        unary(self, v, Rc::new(SigmoidOp))
    }

    pub fn silu(&self) -> Var {
        let v = self.value().mapv(|x| x / (1.0 + (-x).exp()));
        unary(self, v, Rc::new(SiluOp))
    }

    pub fn relu(&self) -> Var {
        let v = self.value().mapv(|x| x.max(0.0));
        unary(self, v, Rc::new(ReluOp))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let v = self.value().mapv(|x| x.clamp(lo, hi));
        unary(self, v, Rc::new(ClampOp { lo, hi }))
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum_all(&self) -> Var {
        let s: f64 = self.value().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        unary(self, v, Rc::new(SumAllOp))
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean_all(&self) -> Var {
        let n = self.value().len();
        assert!(n > 0, "mean_all on empty tensor");
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Broadcast a 0-d tensor to `shape`.
    pub fn broadcast_full(&self, shape: &[usize]) -> Var {
        let s = self.scalar();
        let v = ArrayD::from_elem(IxDyn(shape), s);
        unary(self, v, Rc::new(BroadcastFullOp))
    }

    pub fn sum_axis0(&self) -> Var {
        let v = self.value().sum_axis(Axis(0));
        unary(self, v, Rc::new(SumAxis0Op))
    }

    pub fn broadcast_axis0(&self, n: usize) -> Var {
        let src = self.value();
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let v = src
            .view()
            .insert_axis(Axis(0))
            .broadcast(IxDyn(&shape))
            .expect("broadcast_axis0")
            .to_owned();
        unary(self, v, Rc::new(BroadcastAxis0Op))
    }

    /// [c, h, w] -> [c]: sum over the spatial axes.
    pub fn sum_spatial(&self) -> Var {
        let src = self.value();
        assert_eq!(src.ndim(), 3, "sum_spatial expects [c, h, w]");
        let v = src.sum_axis(Axis(2)).sum_axis(Axis(1));
        unary(self, v, Rc::new(SumSpatialOp))
    }

    /// [c] -> [c, h, w]: repeat each channel value over a spatial grid.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Var {
        let src = self.value();
        assert_eq!(src.ndim(), 1, "broadcast_spatial expects [c]");
        let c = src.len();
        let mut v = ArrayD::zeros(IxDyn(&[c, h, w]));
        for (ci, &x) in src.iter().enumerate() {
            v.slice_mut(ndarray::s![ci, .., ..]).fill(x);
        }
        unary(self, v, Rc::new(BroadcastSpatialOp))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let original = self.shape();
        let n: usize = shape.iter().product();
        assert_eq!(self.value().len(), n, "reshape element count mismatch");
        let v = self
            .value()
            .view()
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .to_owned();
        unary(self, v, Rc::new(ReshapeOp { original }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Var {
        let src = self.value();
        assert_eq!(src.ndim(), 2, "transpose2 expects a matrix");
        let v = src.t().to_owned().into_dyn();
        unary(self, v, Rc::new(TransposeOp))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let a = as_mat(&self.value());
        let b = as_mat(&other.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
        let v = a.dot(&b).into_dyn();
        binary(self, other, v, Rc::new(MatMulOp))
    }

    /// Single element of a rank-1 tensor, as a 0-d tensor.
    pub fn take(&self, index: usize) -> Var {
        let src = self.value();
        assert_eq!(src.ndim(), 1, "take expects a vector");
        let v = ArrayD::from_elem(IxDyn(&[]), src[[index]]);
        unary(self, v, Rc::new(TakeOp { index }))
    }

    /// Embed a 0-d tensor at `index` of a zero vector of length `n`.
    pub fn scatter(&self, index: usize, n: usize) -> Var {
        let s = self.scalar();
        let mut v = ArrayD::zeros(IxDyn(&[n]));
        v[[index]] = s;
        unary(self, v, Rc::new(ScatterOp { index }))
    }
}
