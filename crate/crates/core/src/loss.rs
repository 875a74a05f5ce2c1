//! Differentiable SSIM and the composite adversarial objectives.
//!
//! The generator minimizes
//! `l1 * mean|x - x̂| + ssim * (1 - SSIM(x, x̂)) + adv * (-log D(x̂))`
//! (non-saturating adversarial term); the discriminator minimizes standard
//! binary cross-entropy on (real, restored) pairs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::SsimParams;
use crate::model::{
    discriminator_forward, discriminator_forward_node, generator_forward, ModelConfig,
    TrackedParams,
};
use crate::tensor::{Graph, VarId};
use crate::Scalar;

/// Weights of the three generator loss terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 10.0, ssim: 1.0, adv: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("ssim", self.ssim), ("adv", self.adv)] {
            if v < 0.0 || !v.is_finite() {
                return Err(crate::CrtError::Usage(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Differentiable twin of [`crate::imaging::ssim`]: identical windowed
/// statistics built from the fixed-kernel correlation op, so gradients flow
/// to both images. Inputs are planar `[3, H, W]` tensors.
pub fn ssim_graph<T: Scalar>(g: &Graph<T>, a: VarId, b: VarId, p: &SsimParams) -> VarId {
    let kernel: Vec<T> = p.weights_2d().iter().map(|&w| T::from_f64(w)).collect();
    let k = p.window;
    let corr = |v: VarId| g.correlate2d(v, &kernel, k, k);
    let mu_a = corr(a);
    let mu_b = corr(b);
    let e_aa = corr(g.mul(a, a));
    let e_bb = corr(g.mul(b, b));
    let e_ab = corr(g.mul(a, b));
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);
    let c1 = g.scalar(T::from_f64(p.c1));
    let c2 = g.scalar(T::from_f64(p.c2));
    let two = T::from_f64(2.0);
    let num = g.mul(
        g.add(g.scalar_mul(mu_ab, two), c1),
        g.add(g.scalar_mul(cov, two), c2),
    );
    let den = g.mul(
        g.add(g.add(mu_aa, mu_bb), c1),
        g.add(g.add(var_a, var_b), c2),
    );
    g.mean_all(g.div(num, den))
}

/// `1 - SSIM` as a scalar graph node.
pub fn ssim_loss_graph<T: Scalar>(g: &Graph<T>, a: VarId, b: VarId, p: &SsimParams) -> VarId {
    let one = g.scalar(T::one());
    g.sub(one, ssim_graph(g, a, b, p))
}

/// Weighted generator loss terms for one image pair, each a scalar node.
/// `total` is the exact sum of the three components.
pub struct GeneratorLossParts {
    pub total: VarId,
    pub l1: VarId,
    pub ssim: VarId,
    pub adv: VarId,
    /// The restored image node, reusable by the caller.
    pub restored: VarId,
}

/// Build the full generator objective for one (corrupted, clean) pair.
/// `disc_tp` should be tracked non-trainable so discriminator feedback
/// reaches the generator only through the adversarial term. `minimax`
/// selects `log(1 - D(x̂))` over the default non-saturating `-log D(x̂)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_graph<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    gen_tp: &TrackedParams,
    disc_tp: &TrackedParams,
    clean_planar: &[T],
    corrupted_planar: &[T],
    weights: &LossWeights,
    ssim_params: &SsimParams,
    minimax: bool,
) -> Result<GeneratorLossParts> {
    weights.validate()?;
    let side = cfg.image_side;
    let restored = generator_forward(g, cfg, gen_tp, corrupted_planar)?;
    let clean = g.constant(clean_planar.to_vec(), &[3, side, side]);

    let l1_raw = g.mean_all(g.abs(g.sub(clean, restored)));
    let ssim_raw = ssim_loss_graph(g, clean, restored, ssim_params);
    // Score the live restored node so the adversarial gradient reaches the
    // generator through the discriminator's (frozen) weights.
    let score = discriminator_forward_node(g, cfg, disc_tp, restored)?;
    let adv_raw = if minimax {
        let one = g.scalar(T::one());
        g.log(g.sub(one, score))
    } else {
        g.neg(g.log(score))
    };

    let l1 = g.scalar_mul(l1_raw, T::from_f64(weights.l1));
    let ssim = g.scalar_mul(ssim_raw, T::from_f64(weights.ssim));
    let adv = g.scalar_mul(adv_raw, T::from_f64(weights.adv));
    let total = g.add(g.add(l1, ssim), adv);
    Ok(GeneratorLossParts { total, l1, ssim, adv, restored })
}

/// `-(log d_real + log(1 - d_fake))` for scalar scores.
pub(crate) fn bce_pair<T: Scalar>(g: &Graph<T>, d_real: VarId, d_fake: VarId) -> VarId {
    let one = g.scalar(T::one());
    g.neg(g.add(g.log(d_real), g.log(g.sub(one, d_fake))))
}

/// Binary cross-entropy for one (real, restored) pair:
/// `-(log D(x) + log(1 - D(x̂)))`. The restored planar buffer must already
/// be detached from any generator graph.
pub fn discriminator_loss_graph<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    disc_tp: &TrackedParams,
    clean_planar: &[T],
    restored_planar: &[T],
) -> Result<VarId> {
    let d_real = discriminator_forward(g, cfg, disc_tp, clean_planar)?;
    let d_fake = discriminator_forward(g, cfg, disc_tp, restored_planar)?;
    Ok(bce_pair(g, d_real, d_fake))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ssim;
    use crate::model::{init_params, track_params};
    use crate::synth;
    use crate::tensor::{grad_check_leaves, TensorData};

    #[test]
    fn differentiable_ssim_matches_reference() {
        let p = SsimParams::default();
        for seed in 0..20u64 {
            let a = synth::render_frame(32, 32, seed as usize, 1);
            let b = synth::noisy_frame(32, 32, seed + 100);
            let reference = ssim(&a, &b, &p).unwrap();
            let g: Graph<f64> = Graph::inference();
            let av = g.constant(a.to_planar::<f64>(), &[3, 32, 32]);
            let bv = g.constant(b.to_planar::<f64>(), &[3, 32, 32]);
            let twin = g.item(ssim_graph(&g, av, bv, &p));
            assert!(
                (twin - reference).abs() < 1e-6,
                "seed {seed}: twin {twin} vs reference {reference}"
            );
        }
    }

    #[test]
    fn differentiable_ssim_self_is_one() {
        let img = synth::render_frame(32, 32, 5, 2);
        let g: Graph<f64> = Graph::inference();
        let v = g.constant(img.to_planar::<f64>(), &[3, 32, 32]);
        assert!((g.item(ssim_graph(&g, v, v, &SsimParams::default())) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_loss_gradient_passes_finite_differences() {
        let a = synth::render_frame(16, 16, 0, 0).to_planar::<f64>();
        let b = synth::noisy_frame(16, 16, 3).to_planar::<f64>();
        let p = SsimParams::default();
        let points =
            [TensorData::new(vec![3, 16, 16], a), TensorData::new(vec![3, 16, 16], b)];
        let rep = grad_check_leaves(
            |g, vars| ssim_loss_graph(g, vars[0], vars[1], &p),
            &points,
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-3, "err {}", rep.max_rel_err);
    }

    #[test]
    fn generator_loss_components_sum_to_total() {
        let cfg = ModelConfig::toy();
        let params = init_params(&cfg, 2).unwrap().map_to::<f64>();
        let clean = synth::render_frame(32, 32, 0, 0).to_planar::<f64>();
        let corrupted = synth::noisy_frame(32, 32, 1).to_planar::<f64>();
        let g: Graph<f64> = Graph::new();
        let gen_tp = track_params(&g, &params, "gen.", true);
        let disc_tp = track_params(&g, &params, "disc.", false);
        let parts = generator_loss_graph(
            &g,
            &cfg,
            &gen_tp,
            &disc_tp,
            &clean,
            &corrupted,
            &LossWeights::default(),
            &SsimParams::default(),
            false,
        )
        .unwrap();
        let total = g.item(parts.total);
        let sum = g.item(parts.l1) + g.item(parts.ssim) + g.item(parts.adv);
        assert!((total - sum).abs() < 1e-6);
        assert!(total.is_finite());
    }

    #[test]
    fn adversarial_component_closed_form_when_d_is_half() {
        let cfg = ModelConfig::toy();
        let mut params = init_params(&cfg, 2).unwrap();
        // Zeroing the final head makes D output sigmoid(0) = 0.5 exactly.
        params.entries.get_mut("disc.head.fc2.weight").unwrap().data.fill(0.0);
        let params = params.map_to::<f64>();
        let clean = synth::render_frame(32, 32, 0, 0).to_planar::<f64>();
        let corrupted = synth::noisy_frame(32, 32, 1).to_planar::<f64>();
        let g: Graph<f64> = Graph::new();
        let gen_tp = track_params(&g, &params, "gen.", true);
        let disc_tp = track_params(&g, &params, "disc.", false);
        let parts = generator_loss_graph(
            &g,
            &cfg,
            &gen_tp,
            &disc_tp,
            &clean,
            &corrupted,
            &LossWeights::default(),
            &SsimParams::default(),
            false,
        )
        .unwrap();
        let expect = 0.05 * 2.0f64.ln();
        assert!((g.item(parts.adv) - expect).abs() < 1e-9, "{}", g.item(parts.adv));
    }

    #[test]
    fn identical_images_zero_the_reconstruction_terms() {
        // With x̂ == x the L1 and SSIM terms vanish; only -log D remains.
        let g: Graph<f64> = Graph::inference();
        let x = synth::render_frame(32, 32, 3, 0).to_planar::<f64>();
        let a = g.constant(x.clone(), &[3, 32, 32]);
        let b = g.constant(x, &[3, 32, 32]);
        let l1 = g.item(g.mean_all(g.abs(g.sub(a, b))));
        assert_eq!(l1, 0.0);
        let sl = g.item(ssim_loss_graph(&g, a, b, &SsimParams::default()));
        assert!(sl.abs() < 1e-9);
    }

    #[test]
    fn bce_closed_forms() {
        let g: Graph<f64> = Graph::inference();
        let half = g.constant(vec![0.5], &[1]);
        let loss = g.item(bce_pair(&g, half, half));
        assert!((loss - 2.0 * 2.0f64.ln()).abs() < 1e-12);

        let eps = 1e-6;
        let good = g.constant(vec![1.0 - eps], &[1]);
        let bad = g.constant(vec![eps], &[1]);
        let sharp = g.item(bce_pair(&g, good, bad));
        assert!(sharp > 0.0 && sharp < 1e-5, "perfect discriminator loss {sharp}");
    }

    #[test]
    fn discriminator_loss_when_scores_are_half() {
        let cfg = ModelConfig::toy();
        let mut params = init_params(&cfg, 5).unwrap();
        params.entries.get_mut("disc.head.fc2.weight").unwrap().data.fill(0.0);
        let params = params.map_to::<f64>();
        let clean = synth::render_frame(32, 32, 0, 0).to_planar::<f64>();
        let fake = synth::noisy_frame(32, 32, 2).to_planar::<f64>();
        let g: Graph<f64> = Graph::new();
        let disc_tp = track_params(&g, &params, "disc.", true);
        let loss = discriminator_loss_graph(&g, &cfg, &disc_tp, &clean, &fake).unwrap();
        assert!((g.item(loss) - 2.0 * 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights { l1: -1.0, ssim: 1.0, adv: 0.05 }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights::default();
        assert_eq!((w.l1, w.ssim, w.adv), (10.0, 1.0, 0.05));
    }
}
