//! Dense tensors, tape-based reverse-mode differentiation, Adam, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_with_finite_differences, finite_diff_check, relative_error, CheckOptions,
    GradCheckReport, ParamCheck,
};
pub use graph::{softmax_rows, Graph, Var};
pub(crate) use graph::entropy_of;
pub use params::{AdamConfig, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

use crate::error::Result;

/// Standalone matrix product of two 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone())?, g.input(b.clone())?);
    let c = g.matmul(va, vb)?;
    Ok(g.value(c).clone())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.input(x.clone())?;
    let y = g.silu(v)?;
    Ok(g.value(y).clone())
}

pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (vx, vg) = (g.input(x.clone())?, g.input(gain.clone())?);
    let y = g.rms_norm(vx, vg, eps)?;
    Ok(g.value(y).clone())
}

pub fn masked_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], loss_mask: &[bool]) -> Result<T> {
    let mut g = Graph::new();
    let v = g.input(logits.clone())?;
    let l = g.cross_entropy(v, targets, loss_mask)?;
    Ok(g.value(l).item())
}
