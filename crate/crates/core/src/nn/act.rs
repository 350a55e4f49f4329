//! Elementwise activations.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::losses::sigmoid;

fn same_len(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

/// Gradient passes where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_len(input, grad_out)?;
    let g = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), g)
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    map(x, sigmoid)
}

/// Takes the forward *output* `s` and uses `ds/dx = s (1 - s)`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_len(output, grad_out)?;
    let g = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(output.shape(), g)
}
