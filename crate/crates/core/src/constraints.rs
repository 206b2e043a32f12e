//! Attention-size constraint and the penalties that enforce it.
//!
//! The constraint asks the per-image attention map `a` to cover at least a
//! `1 - p` fraction of the image: `f(a) = (1 - mean(a)) - p <= 0`. Training
//! relaxes it with the extended log-barrier, a convex C1 function that is a
//! scaled `-log(-z)` on the feasible side and switches to a tangent line of
//! slope `t` at `z = -1/t^2`, so gradients stay finite when the constraint
//! is violated (which it always is early in training).

use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphExt, Var};

/// Penalty used to enforce the attention-size constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Extended log-barrier on the image-level size constraint.
    #[serde(alias = "log_barrier")]
    Barrier,
    /// Squared hinge on the image-level size constraint.
    L2Image,
    /// Squared hinge applied per pixel before averaging.
    L2Pixel,
    /// Plain expansion pressure `mean(1 - a)` with no target size.
    L1Expansion,
    /// No attention objective (vanilla model).
    None,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 5] = [
        ConstraintKind::Barrier,
        ConstraintKind::L2Image,
        ConstraintKind::L2Pixel,
        ConstraintKind::L1Expansion,
        ConstraintKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::Barrier => "barrier",
            ConstraintKind::L2Image => "l2_image",
            ConstraintKind::L2Pixel => "l2_pixel",
            ConstraintKind::L1Expansion => "l1_expansion",
            ConstraintKind::None => "none",
        }
    }
}

/// `psi_t(z)`: `-(1/t) ln(-z)` for `z <= -1/t^2`, else the tangent line
/// `t z - (1/t) ln(1/t^2) + 1/t`. Convex, C1 and non-decreasing on all of R.
pub fn extended_log_barrier(z: f64, t: f64) -> f64 {
    assert!(t > 0.0, "barrier temperature must be positive");
    let knee = -1.0 / (t * t);
    if z <= knee {
        -(-z).ln() / t
    } else {
        t * z - (1.0 / (t * t)).ln() / t + 1.0 / t
    }
}

/// Signed violation of the attention-size constraint; satisfied iff `<= 0`.
pub fn size_constraint(mean_attention: f64, p: f64) -> f64 {
    (1.0 - mean_attention) - p
}

/// Graph version of [`extended_log_barrier`], applied elementwise.
///
/// Branch selection is a constant mask; the inactive log branch is evaluated
/// at a clamped argument so it never sees a non-negative input.
pub fn barrier(z: &Var, t: f64) -> Var {
    assert!(t > 0.0, "barrier temperature must be positive");
    let knee = -1.0 / (t * t);
    let shift = -(1.0 / (t * t)).ln() / t + 1.0 / t;

    let mask = z.value().mapv(|v| if v <= knee { 1.0 } else { 0.0 });
    let mask = z.graph().leaf(mask);
    let log_branch = z.clamp(-f64::MAX, knee).neg().log().scale(-1.0 / t);
    let lin_branch = z.scale(t).add_const(shift);
    log_branch
        .mul(&mask)
        .add(&lin_branch.mul(&mask.rsub_const(1.0)))
}

/// Graph version of [`size_constraint`] on an attention map of any shape.
pub fn size_constraint_term(attention: &Var, p: f64) -> Var {
    attention.mean_all().rsub_const(1.0 - p)
}

/// Image-level barrier penalty `psi_t((1 - mean(a)) - p)`.
pub fn barrier_penalty(attention: &Var, p: f64, t: f64) -> Var {
    barrier(&size_constraint_term(attention, p), t)
}

/// Squared hinge on the image-level constraint: `max(0, f(a))^2`.
pub fn l2_image_penalty(attention: &Var, p: f64) -> Var {
    let f = size_constraint_term(attention, p).relu();
    f.mul(&f)
}

/// Per-pixel squared hinge: `mean(max(0, (1 - a) - p)^2)`.
pub fn l2_pixel_penalty(attention: &Var, p: f64) -> Var {
    let f = attention.rsub_const(1.0 - p).relu();
    f.mul(&f).mean_all()
}

/// Expansion pressure without a size target: `mean(1 - a)`.
pub fn l1_expansion_penalty(attention: &Var) -> Var {
    attention.rsub_const(1.0).mean_all()
}

/// Penalty of the chosen kind for one attention map, `None` for
/// [`ConstraintKind::None`].
pub fn penalty(attention: &Var, kind: ConstraintKind, p: f64, t: f64) -> Option<Var> {
    match kind {
        ConstraintKind::Barrier => Some(barrier_penalty(attention, p, t)),
        ConstraintKind::L2Image => Some(l2_image_penalty(attention, p)),
        ConstraintKind::L2Pixel => Some(l2_pixel_penalty(attention, p)),
        ConstraintKind::L1Expansion => Some(l1_expansion_penalty(attention)),
        ConstraintKind::None => None,
    }
}
