//! 2-d convolution and its two adjoints.
//!
//! The three kernels are linked by the trilinear identity
//! `<conv2d(x, w), y> = <x, conv2d_vjp_input(y, w)> = <w, conv2d_vjp_weight(x, y)>`,
//! so each one's backward rule is built from the other two and the set is
//! closed under repeated differentiation.
//!
//! Layout: input `[cin, h, w]`, weight `[cout, cin, kh, kw]`, output
//! `[cout, ho, wo]` with `ho = floor((h + 2 pad - kh) / stride) + 1`. Floor
//! division means strided kernels may never read the last rows or columns;
//! the input adjoint therefore takes the original spatial size explicitly
//! (it is not recoverable from the output size alone). Lowering is im2col
//! with column index `oy * wo + ox` and row index `(ci * kh + u) * kw + v`.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};

use super::{push, Op, Tensor, Var};

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let span = input + 2 * pad;
    assert!(span >= kernel, "kernel larger than padded input");
    (span - kernel) / stride + 1
}

fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(w, kw, stride, pad);
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[cin, h, w]));
    for ci in 0..cin {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[[ci, iy as usize, ix as usize]] += col[[row, oy * wo + ox]];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(x.shape()[0], cin, "conv2d channel mismatch");
    let ho = out_extent(x.shape()[1], kh, stride, pad);
    let wo = out_extent(x.shape()[2], kw, stride, pad);
    let col = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .view()
        .to_shape((cout, cin * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let ymat = wmat.dot(&col);
    ymat.into_shape_with_order(IxDyn(&[cout, ho, wo]))
        .expect("conv output reshape")
}

fn vjp_input_forward(
    ybar: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Tensor {
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ybar.shape()[0], cout, "vjp_input channel mismatch");
    let (ho, wo) = (ybar.shape()[1], ybar.shape()[2]);
    assert_eq!(ho, out_extent(h, kh, stride, pad), "vjp_input ho");
    assert_eq!(wo, out_extent(wd, kw, stride, pad), "vjp_input wo");
    let wmat = w
        .view()
        .to_shape((cout, cin * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let gmat = ybar
        .view()
        .to_shape((cout, ho * wo))
        .expect("cotangent reshape")
        .to_owned();
    let colbar = wmat.t().dot(&gmat);
    col2im(&colbar, cin, h, wd, kh, kw, stride, pad)
}

fn vjp_weight_forward(
    x: &Tensor,
    ybar: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let cin = x.shape()[0];
    let cout = ybar.shape()[0];
    let (ho, wo) = (ybar.shape()[1], ybar.shape()[2]);
    assert_eq!(ho, out_extent(x.shape()[1], kh, stride, pad), "vjp_weight ho");
    assert_eq!(wo, out_extent(x.shape()[2], kw, stride, pad), "vjp_weight wo");
    let col = im2col(x, kh, kw, stride, pad);
    let gmat = ybar
        .view()
        .to_shape((cout, ho * wo))
        .expect("cotangent reshape")
        .to_owned();
    let wmat = gmat.dot(&col.t());
    wmat.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
        .expect("weight gradient reshape")
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}
impl Op for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let xs = x.shape();
        let ws = w.shape();
        let dx = conv2d_vjp_input(cot, w, self.stride, self.pad, xs[1], xs[2]);
        let dw = conv2d_vjp_weight(x, cot, ws[2], ws[3], self.stride, self.pad);
        vec![Some(dx), Some(dw)]
    }
}

struct ConvVjpInputOp {
    stride: usize,
    pad: usize,
}
impl Op for ConvVjpInputOp {
    fn name(&self) -> &'static str {
        "conv2d_vjp_input"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let (ybar, w) = (&inputs[0], &inputs[1]);
        let ws = w.shape();
        let dy = conv2d(cot, w, self.stride, self.pad);
        let dw = conv2d_vjp_weight(cot, ybar, ws[2], ws[3], self.stride, self.pad);
        vec![Some(dy), Some(dw)]
    }
}

struct ConvVjpWeightOp {
    stride: usize,
    pad: usize,
}
impl Op for ConvVjpWeightOp {
    fn name(&self) -> &'static str {
        "conv2d_vjp_weight"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let (x, ybar) = (&inputs[0], &inputs[1]);
        let xs = x.shape();
        let dx = conv2d_vjp_input(ybar, cot, self.stride, self.pad, xs[1], xs[2]);
        let dy = conv2d(x, cot, self.stride, self.pad);
        vec![Some(dx), Some(dy)]
    }
}

fn binary(a: &Var, b: &Var, value: Tensor, op: Rc<dyn Op>) -> Var {
    assert!(
        Rc::ptr_eq(a.graph(), b.graph()),
        "operands belong to different graphs"
    );
    push(a.graph(), value, Some(op), vec![a.id(), b.id()])
}

/// `[cin, h, w] * [cout, cin, kh, kw] -> [cout, ho, wo]`.
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    let v = conv_forward(&x.value(), &w.value(), stride, pad);
    binary(x, w, v, Rc::new(Conv2dOp { stride, pad }))
}

/// Gradient of `conv2d` with respect to its input: maps an output cotangent
/// `[cout, ho, wo]` back to input space `[cin, h, w]` (transposed
/// convolution). `h` and `w` are the original input extents.
pub fn conv2d_vjp_input(
    ybar: &Var,
    w: &Var,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Var {
    let v = vjp_input_forward(&ybar.value(), &w.value(), stride, pad, h, wd);
    binary(ybar, w, v, Rc::new(ConvVjpInputOp { stride, pad }))
}

/// Gradient of `conv2d` with respect to its weight: correlates the input with
/// an output cotangent to produce `[cout, cin, kh, kw]`.
pub fn conv2d_vjp_weight(
    x: &Var,
    ybar: &Var,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Var {
    let v = vjp_weight_forward(&x.value(), &ybar.value(), kh, kw, stride, pad);
    binary(x, ybar, v, Rc::new(ConvVjpWeightOp { stride, pad }))
}
