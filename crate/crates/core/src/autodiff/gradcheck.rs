//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of a scalar function at `x` against central
/// differences with step `eps` and returns the largest relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf(point.clone());
        let out = f(&mut tape, input)?;
        Ok(tape.scalar(out))
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct ParamCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Analytic and central-difference values at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Probes skipped because `x - eps` and `x + eps` fell on different
    /// sides of a ReLU kink, where a central difference is meaningless.
    pub kinks: usize,
}

/// Finite-difference check over the parameters of `store`. At most
/// `per_param` randomly chosen elements of each tensor are probed.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut analytic = store.clone();
    grads.write_to(&mut analytic);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ParamCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_values: (0.0, 0.0),
        checked: 0,
        kinks: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.get(id).value.numel();
        let grad = analytic
            .get(id)
            .grad
            .clone()
            .ok_or_else(|| Error::Config(format!("no gradient for {}", store.get(id).name)))?;
        let picks = sample(&mut rng, numel, per_param.min(numel));
        for i in picks.iter() {
            let orig = store.get(id).value.data()[i];
            let mut eval = |v: f64| -> Result<(f64, Vec<bool>)> {
                store.get_mut(id).value.data_mut()[i] = v;
                let mut tape = Tape::new();
                let out = f(&mut tape, store)?;
                Ok((tape.scalar(out), tape.relu_pattern()))
            };
            let (plus, plus_pattern) = eval(orig + eps)?;
            let (minus, minus_pattern) = eval(orig - eps)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if plus_pattern != minus_pattern {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_values = (grad.data()[i], numeric);
            }
        }
    }
    Ok(report)
}
