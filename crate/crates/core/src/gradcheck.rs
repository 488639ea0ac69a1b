//! Central finite-difference verification of tape gradients (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares tape gradients of a scalar function of `inputs` with central
/// differences of step `h`.
///
/// At most `max_per_input` coordinates of each input are probed (evenly
/// strided); pass `usize::MAX` to probe all of them. `floor` keeps the
/// relative error meaningful where both gradients vanish.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_per_input: usize, floor: f64, f: F) -> GradReport
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var<'_, f64>> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&vars).item()
    };

    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = (n / max_per_input.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let fp = eval(&probe);
            probe[k].data_mut()[i] = orig - h;
            let fm = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}

/// Deterministic tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
