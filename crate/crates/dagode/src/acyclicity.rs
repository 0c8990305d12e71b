//! Differentiable acyclicity constraint h and its gradient, in the
//! matrix-exponential form h(W) = Tr(e^{W∘W}) - d and the polynomial form
//! h(W) = Tr[(I + a W∘W)^d] - d, plus the Jacobian variant used by the
//! nonlinear learner (diagonal masked before evaluation).

use crate::ndtensor::{Matrix, Tape};
use crate::{Error, Result};

/// Constraint value and its gradient with respect to the input matrix.
#[derive(Debug, Clone)]
pub struct ConstraintValue {
    pub h: f64,
    pub grad: Matrix,
}

/// h(W) = Tr(e^{W∘W}) - d with gradient (e^{W∘W})^T ∘ 2W.
pub fn h_exp(w: &Matrix) -> Result<ConstraintValue> {
    if !w.is_square() {
        return Err(Error::Contract("h_exp requires a square matrix".into()));
    }
    let d = w.rows();
    let e = w.hadamard(w).expm()?;
    // tiny negative round-off is floored at zero
    let h = (e.trace() - d as f64).max(0.0);
    let grad = e.transpose().hadamard(&w.scale(2.0));
    if !h.is_finite() || !grad.all_finite() {
        return Err(Error::Numeric("acyclicity constraint overflowed".into()));
    }
    Ok(ConstraintValue { h, grad })
}

/// Polynomial form h(W) = Tr[(I + a W∘W)^d] - d for a > 0; the gradient is
/// obtained through the differentiation tape.
pub fn h_poly(w: &Matrix, alpha: f64) -> Result<ConstraintValue> {
    if !w.is_square() {
        return Err(Error::Contract("h_poly requires a square matrix".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Contract("h_poly requires alpha > 0".into()));
    }
    let d = w.rows();
    let mut tape = Tape::new();
    let wn = tape.var(w.clone());
    let m = tape.hadamard(wn, wn);
    let am = tape.scale(m, alpha);
    let s = tape.add_const(am, &Matrix::identity(d));
    let mut p = s;
    for _ in 1..d {
        p = tape.matmul(p, s);
    }
    let tr = tape.trace(p);
    let h = (tape.scalar(tr) - d as f64).max(0.0);
    let grad = tape.grad(tr, &[wn])?.remove(0);
    Ok(ConstraintValue { h, grad })
}

/// Constraint on an averaged absolute input-Jacobian: the diagonal is masked
/// to zero first (continuous-time self-dependence is not a causal cycle),
/// then the computation is identical to `h_exp`.
pub fn h_jacobian(jbar: &Matrix) -> Result<ConstraintValue> {
    h_exp(&mask_diagonal(jbar))
}

/// Copy with the diagonal zeroed.
pub fn mask_diagonal(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows().min(m.cols()) {
        out.set(i, i, 0.0);
    }
    out
}
