use crate::autograd::Var;
use crate::gradcheck::{check_gradients, random_tensor};
use crate::tensor::Tensor;

pub(crate) fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed)
}

/// Asserts every tape gradient matches central differences to 1e-6 relative.
pub(crate) fn check_grad<F>(inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let r = check_gradients(inputs, 1e-5, usize::MAX, 1e-3, f);
    assert!(r.max_rel_err < 1e-6, "gradient mismatch: {r:?}");
}
