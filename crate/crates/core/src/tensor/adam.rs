//! Bias-corrected Adam with lazily allocated per-parameter moments.

use std::collections::BTreeMap;

use crate::error::{CrtError, Result};
use crate::Scalar;

use super::TensorData;

/// Optimizer hyperparameters. Defaults are the usual 0.9 / 0.999 / 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamHyper<T> {
    fn default() -> Self {
        AdamHyper {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// First/second moment buffers plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub hyper: AdamHyper<T>,
    pub t: u64,
    pub(crate) moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(hyper: AdamHyper<T>) -> Self {
        AdamState { hyper, t: 0, moments: BTreeMap::new() }
    }

    /// Moment buffers for a parameter, if the optimizer has touched it.
    pub fn moments_of(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|mo| (mo.m.as_slice(), mo.v.as_slice()))
    }

    pub(crate) fn insert_moments(&mut self, name: String, m: Vec<T>, v: Vec<T>) {
        self.moments.insert(name, Moments { m, v });
    }

    pub(crate) fn moment_names(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(AdamHyper::default())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The whole step was skipped because a gradient was non-finite; the
    /// step counter is left untouched.
    SkippedNonFinite { name: String, index: usize },
}

/// Apply one bias-corrected Adam update to every parameter named in `grads`.
///
/// Gradients are scanned for non-finite values first; any hit skips the
/// entire step (moments and `t` untouched) and reports the offending
/// parameter, which keeps a diverging adversarial run inspectable.
pub fn adam_step<T: Scalar>(
    params: &mut BTreeMap<String, TensorData<T>>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<StepOutcome> {
    if lr <= T::zero() {
        return Err(CrtError::Usage(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| CrtError::Usage(format!("gradient for unknown parameter {name}")))?;
        if g.len() != p.data.len() {
            return Err(CrtError::Usage(format!(
                "gradient length {} does not match parameter {name} of {} elements",
                g.len(),
                p.data.len()
            )));
        }
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite { name: name.clone(), index });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let bc1 = T::one() - beta1.powi(t);
    let bc2 = T::one() - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let mo = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments { m: vec![T::zero(); g.len()], v: vec![T::zero(); g.len()] });
        for i in 0..g.len() {
            let gi = g[i];
            mo.m[i] = beta1 * mo.m[i] + (T::one() - beta1) * gi;
            mo.v[i] = beta2 * mo.v[i] + (T::one() - beta2) * gi * gi;
            let m_hat = mo.m[i] / bc1;
            let v_hat = mo.v[i] / bc2;
            p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
