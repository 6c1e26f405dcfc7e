//! Central finite-difference gradient oracle.
//!
//! Only ever evaluates forward passes, so it stays independent of the
//! hand-written adjoints it is used to check.

use crate::tensor::Tensor;

/// Default step for 64-bit central differences.
pub const FD_STEP: f64 = 1e-5;

/// `d <seed, f(inputs)> / d inputs[which][index]` by central differences.
pub fn central_difference(
    f: &mut dyn FnMut(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    seed: &Tensor,
    which: usize,
    index: usize,
    h: f64,
) -> f64 {
    let mut probe = inputs.to_vec();
    let x0 = probe[which].data()[index];
    probe[which].data_mut()[index] = x0 + h;
    let plus = seed.dot(&f(&probe)).expect("seed shape");
    probe[which].data_mut()[index] = x0 - h;
    let minus = seed.dot(&f(&probe)).expect("seed shape");
    (plus - minus) / (2.0 * h)
}

/// Full numerical gradient of `<seed, f(inputs)>` with respect to `inputs[which]`.
pub fn numerical_gradient(
    f: &mut dyn FnMut(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    seed: &Tensor,
    which: usize,
    h: f64,
) -> Tensor {
    let shape = inputs[which].shape().to_vec();
    let n = inputs[which].len();
    let data = (0..n)
        .map(|i| central_difference(f, inputs, seed, which, i, h))
        .collect();
    Tensor::new(shape, data).expect("same shape as input")
}
