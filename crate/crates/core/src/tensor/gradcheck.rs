//! Central-difference verification of reverse-mode gradients.
//!
//! Runs in f64 only: finite differences are too noisy in single precision
//! to make a trustworthy oracle.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CrtError, Result};

use super::{Graph, TensorData, VarId};

/// Result of a gradient check over one or more leaves.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked components of |analytic−numeric| / max(|a|,|n|,1e-8)
    pub max_rel_err: f64,
    /// (leaf index, component index) where the maximum occurred.
    pub worst: (usize, usize),
    pub components_checked: usize,
}

/// Check the gradient of a scalar function of a single tensor.
pub fn grad_check<F>(f: F, point: &TensorData<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, VarId) -> VarId,
{
    grad_check_leaves(|g, vars| f(g, vars[0]), std::slice::from_ref(point), eps, None)
}

/// Multi-leaf variant. `sample` limits the number of components perturbed
/// per leaf (chosen by a seeded shuffle) so large parameter sets stay
/// checkable under a time budget; `None` checks every component.
pub fn grad_check_leaves<F>(
    f: F,
    points: &[TensorData<f64>],
    eps: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[VarId]) -> VarId,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(CrtError::Usage(format!("grad_check eps {eps} outside [1e-6, 1e-2]")));
    }

    // Analytic pass.
    let graph = Graph::new();
    let vars: Vec<VarId> =
        points.iter().map(|p| graph.leaf(p.data.clone(), &p.shape)).collect();
    let root = f(&graph, &vars);
    if graph.data(root).len() != 1 {
        return Err(CrtError::Usage(format!(
            "grad_check function must return a scalar, got shape {:?}",
            graph.shape(root)
        )));
    }
    graph.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points.iter())
        .map(|(&v, p)| graph.grad(v).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for (li, grad) in analytic.iter().enumerate() {
        if let Some(ci) = grad.iter().position(|x| !x.is_finite()) {
            return Err(CrtError::Numerical(format!(
                "non-finite analytic gradient at leaf {li} component {ci}"
            )));
        }
    }

    let eval = |pts: &[TensorData<f64>]| -> f64 {
        let g = Graph::inference();
        let vs: Vec<VarId> = pts.iter().map(|p| g.constant(p.data.clone(), &p.shape)).collect();
        g.item(f(&g, &vs))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), components_checked: 0 };
    let mut work: Vec<TensorData<f64>> = points.to_vec();
    for li in 0..points.len() {
        let n = points[li].numel();
        let indices: Vec<usize> = match sample {
            Some((cap, seed)) if cap < n => {
                let mut all: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (li as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                all.shuffle(&mut rng);
                all.truncate(cap);
                all
            }
            _ => (0..n).collect(),
        };
        for ci in indices {
            let orig = work[li].data[ci];
            work[li].data[ci] = orig + eps;
            let fp = eval(&work);
            work[li].data[ci] = orig - eps;
            let fm = eval(&work);
            work[li].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(CrtError::Numerical(format!(
                    "non-finite numeric gradient at leaf {li} component {ci}"
                )));
            }
            let a = analytic[li][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (li, ci);
            }
            report.components_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let point = TensorData::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]);
        let rep = grad_check(|g, x| g.sum_all(x), &point, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-6, "err {}", rep.max_rel_err);
    }

    #[test]
    fn two_layer_perceptron_mse_checks_out() {
        // 16-dim input through two small dense layers against a fixed target.
        let dims = (16usize, 8usize, 4usize);
        let mut seed = 0x1234_5678_u64;
        let mut next = move || {
            // splitmix64, plenty for test data
            seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = seed;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            ((z ^ (z >> 31)) as f64 / u64::MAX as f64) - 0.5
        };
        let w1: Vec<f64> = (0..dims.0 * dims.1).map(|_| next()).collect();
        let w2: Vec<f64> = (0..dims.1 * dims.2).map(|_| next()).collect();
        let target: Vec<f64> = (0..dims.2).map(|_| next()).collect();
        let x: Vec<f64> = (0..dims.0).map(|_| next()).collect();

        let point = TensorData::new(vec![16], x);
        let rep = grad_check(
            move |g, xv| {
                let w1v = g.constant(w1.clone(), &[dims.0, dims.1]);
                let w2v = g.constant(w2.clone(), &[dims.1, dims.2]);
                let tv = g.constant(target.clone(), &[1, dims.2]);
                let h = g.gelu(g.matmul(g.reshape(xv, &[1, dims.0]), w1v));
                let y = g.matmul(h, w2v);
                let d = g.sub(y, tv);
                g.mean_all(g.mul(d, d))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "err {}", rep.max_rel_err);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let point = TensorData::scalar(1.0);
        assert!(grad_check(|g, x| g.sum_all(x), &point, 1.0).is_err());
    }

    #[test]
    fn reports_non_finite_gradient() {
        let point = TensorData::scalar(0.0);
        // log clamps at 1e-12, so perturbing around 0 gives fp = log(eps),
        // fm = log(clamp) — finite; use division by x instead to blow up.
        let err = grad_check(
            |g, x| {
                let one = g.scalar(1.0);
                g.sum_all(g.div(one, x))
            },
            &point,
            1e-5,
        );
        assert!(err.is_err());
    }
}
