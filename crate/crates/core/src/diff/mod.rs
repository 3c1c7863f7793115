//! Minimal reverse-mode differentiable array engine.
//!
//! Everything is `f64`. Broadcasting is limited to a single-element operand
//! against a tensor of any shape; anything wider goes through dedicated ops
//! such as [`Var::add_row_bias`].

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, RELATIVE_FLOOR};
pub use tape::{topk_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Dilated valid-mode convolution of one multichannel sequence.
///
/// `x` is `[c_in, T]`, `filters` is `[c_out, c_in, d]`, and the result is
/// `[c_out, T - (d-1)·dilation]`.
pub fn conv1d_dilated<'t>(x: &Var<'t>, filters: &Var<'t>, dilation: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(crate::Error::shape("conv1d_dilated", &shape, &filters.shape()));
    }
    let (c_in, t) = (shape[0], shape[1]);
    let seq = x.t()?.reshape(&[1, t, c_in])?;
    let y = seq.conv1d(filters, dilation)?;
    let (t_out, c_out) = (y.shape()[1], y.shape()[2]);
    y.reshape(&[t_out, c_out])?.t()
}
