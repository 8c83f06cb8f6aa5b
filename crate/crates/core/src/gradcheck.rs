//! Central finite-difference gradient checks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// Largest discrepancy found for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor)`.
    pub relative_error: f64,
    pub max_abs_error: f64,
}

/// Compares `analytic` gradients (store order, trainable tensors only)
/// against central differences of `loss` with step `h`. Every coordinate is
/// probed; keep the model tiny. `floor` keeps the relative error of
/// vanishing gradients finite.
pub fn check_gradients(
    store: &ParameterStore<f64>,
    analytic: &[crate::tensor::Tensor<f64>],
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParameterStore<f64>) -> Result<f64>,
) -> Result<Vec<GradCheck>> {
    let names: Vec<String> = store.trainable().map(|e| e.name.clone()).collect();
    if names.len() != analytic.len() {
        return Err(Error::Config(format!(
            "{} analytic gradients for {} trainable tensors",
            analytic.len(),
            names.len()
        )));
    }
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(names.len());
    for (name, grad) in names.iter().zip(analytic) {
        let n = probe.get(name)?.len();
        if grad.len() != n {
            return Err(Error::Config(format!("gradient of {name} has {} values, expected {n}", grad.len())));
        }
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let orig = probe.get(name)?.data()[k];
            probe.get_mut(name)?.data_mut()[k] = orig + h;
            let up = loss(&probe)?;
            probe.get_mut(name)?.data_mut()[k] = orig - h;
            let down = loss(&probe)?;
            probe.get_mut(name)?.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max(Float::abs(a - numeric));
        }
        let scale = Float::sqrt(a2).max(Float::sqrt(n2)).max(floor);
        out.push(GradCheck {
            name: name.clone(),
            relative_error: Float::sqrt(diff2) / scale,
            max_abs_error: max_abs,
        });
    }
    Ok(out)
}
