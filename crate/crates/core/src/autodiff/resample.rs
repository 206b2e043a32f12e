//! Bilinear resampling on `[c, h, w]` tensors.
//!
//! Corner pixels map onto corner pixels (the `align_corners` convention):
//! source coordinate for output index `i` is `i * (in - 1) / (out - 1)`, or 0
//! when the output axis has a single element. The map is linear in the input,
//! so upsample and its adjoint form an exact transpose pair and both stay
//! differentiable to any order.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::{push, Op, Tensor, Var};

/// (low index, high index, weight on the high index)
fn lerp_axis(n_in: usize, n_out: usize, i_out: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let s = i_out as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0);
    let s = s.min(n_in as f64 - 1.0);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

fn upsample_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = ArrayD::<f64>::zeros(IxDyn(&[c, out_h, out_w]));
    for oy in 0..out_h {
        let (y0, y1, wy) = lerp_axis(h, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, wx) = lerp_axis(w, out_w, ox);
            for ci in 0..c {
                let v = (1.0 - wy) * (1.0 - wx) * x[[ci, y0, x0]]
                    + (1.0 - wy) * wx * x[[ci, y0, x1]]
                    + wy * (1.0 - wx) * x[[ci, y1, x0]]
                    + wy * wx * x[[ci, y1, x1]];
                y[[ci, oy, ox]] = v;
            }
        }
    }
    y
}

fn adjoint_forward(g: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, out_h, out_w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[c, in_h, in_w]));
    for oy in 0..out_h {
        let (y0, y1, wy) = lerp_axis(in_h, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, wx) = lerp_axis(in_w, out_w, ox);
            for ci in 0..c {
                let gv = g[[ci, oy, ox]];
                x[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * gv;
                x[[ci, y0, x1]] += (1.0 - wy) * wx * gv;
                x[[ci, y1, x0]] += wy * (1.0 - wx) * gv;
                x[[ci, y1, x1]] += wy * wx * gv;
            }
        }
    }
    x
}

struct BilinearUpOp;
impl Op for BilinearUpOp {
    fn name(&self) -> &'static str {
        "bilinear_upsample"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let s = inputs[0].shape();
        vec![Some(bilinear_adjoint(cot, s[1], s[2]))]
    }
}

struct BilinearAdjointOp;
impl Op for BilinearAdjointOp {
    fn name(&self) -> &'static str {
        "bilinear_adjoint"
    }
    fn vjp(&self, inputs: &[Var], _output: &Var, cot: &Var) -> Vec<Option<Var>> {
        let s = inputs[0].shape();
        vec![Some(bilinear_upsample(cot, s[1], s[2]))]
    }
}

/// Resample `[c, h, w]` to `[c, out_h, out_w]` by bilinear interpolation.
pub fn bilinear_upsample(x: &Var, out_h: usize, out_w: usize) -> Var {
    assert_eq!(x.shape().len(), 3, "bilinear_upsample expects [c, h, w]");
    let v = upsample_forward(&x.value(), out_h, out_w);
    push(x.graph(), v, Some(Rc::new(BilinearUpOp)), vec![x.id()])
}

/// Transpose of [`bilinear_upsample`]: scatter a fine-grid cotangent back to a
/// `[c, in_h, in_w]` grid.
pub fn bilinear_adjoint(g: &Var, in_h: usize, in_w: usize) -> Var {
    assert_eq!(g.shape().len(), 3, "bilinear_adjoint expects [c, h, w]");
    let v = adjoint_forward(&g.value(), in_h, in_w);
    push(g.graph(), v, Some(Rc::new(BilinearAdjointOp)), vec![g.id()])
}
