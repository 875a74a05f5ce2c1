//! Finite-difference gradient suites: every tensor op against central
//! differences on small random tensors, plus the differentiable SSIM and
//! both full training objectives at the toy model size. The CLI `gradcheck`
//! subcommand runs exactly these.

use std::collections::BTreeMap;

use crate::imaging::SsimParams;
use crate::loss::{discriminator_loss_graph, generator_loss_graph, ssim_loss_graph, LossWeights};
use crate::model::{
    build_axial_tables, init_params, track_params, ModelConfig, TrackedParams,
};
use crate::seeding::unit_hash;
use crate::synth;
use crate::tensor::{grad_check_leaves, Graph, TensorData, VarId};

/// Per-op suites check every component; the model-level suites sample this
/// many components per parameter tensor to stay within the time budget.
const MODEL_SAMPLE_PER_TENSOR: usize = 8;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Loss-level checks perturb by a larger step: gradients that are
/// structurally near zero (for example key biases, which softmax rows are
/// almost invariant to) would otherwise drown in f64 cancellation noise.
const MODEL_EPS: f64 = 1e-3;

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub components: usize,
    pub passed: bool,
    pub error: Option<String>,
}

impl SuiteOutcome {
    pub fn line(&self) -> String {
        match &self.error {
            Some(e) => format!("[FAIL] {:<28} error: {e}", self.name),
            None => format!(
                "[{}] {:<28} max rel err {:.3e} (tol {:.0e}, {} components)",
                if self.passed { "PASS" } else { "FAIL" },
                self.name,
                self.max_rel_err,
                self.tolerance,
                self.components
            ),
        }
    }
}

fn rand_tensor(shape: &[usize], key: u64, lo: f64, hi: f64) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| lo + (hi - lo) * unit_hash(&[0x7e57, key, i as u64])).collect();
    TensorData::new(shape.to_vec(), data)
}

/// Weighted sum against a fixed pseudo-random tensor, so upstream gradients
/// are non-uniform.
fn weighted_sum(g: &Graph<f64>, v: VarId, key: u64) -> VarId {
    let shape = g.shape(v);
    let w = rand_tensor(&shape, key ^ 0xafaf, -1.0, 1.0);
    let wv = g.constant(w.data, &shape);
    g.sum_all(g.mul(v, wv))
}

fn check<F>(name: &str, tolerance: f64, points: &[TensorData<f64>], f: F) -> SuiteOutcome
where
    F: Fn(&Graph<f64>, &[VarId]) -> VarId,
{
    check_sampled(name, tolerance, points, 1e-5, None, f)
}

fn check_sampled<F>(
    name: &str,
    tolerance: f64,
    points: &[TensorData<f64>],
    eps: f64,
    sample: Option<(usize, u64)>,
    f: F,
) -> SuiteOutcome
where
    F: Fn(&Graph<f64>, &[VarId]) -> VarId,
{
    match grad_check_leaves(f, points, eps, sample) {
        Ok(rep) => SuiteOutcome {
            name: name.to_string(),
            max_rel_err: rep.max_rel_err,
            tolerance,
            components: rep.components_checked,
            passed: rep.max_rel_err < tolerance,
            error: None,
        },
        Err(e) => SuiteOutcome {
            name: name.to_string(),
            max_rel_err: f64::INFINITY,
            tolerance,
            components: 0,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}

/// Finite-difference checks for every autodiff op kind.
pub fn op_suites() -> Vec<SuiteOutcome> {
    let t = OP_TOLERANCE;
    let a234 = || rand_tensor(&[2, 3, 4], 1, -1.0, 1.0);
    let b31 = || rand_tensor(&[3, 1], 2, -1.0, 1.0);
    vec![
        check("op.add", t, &[a234(), b31()], |g, v| weighted_sum(g, g.add(v[0], v[1]), 10)),
        check("op.sub", t, &[a234(), b31()], |g, v| weighted_sum(g, g.sub(v[0], v[1]), 11)),
        check("op.mul", t, &[a234(), b31()], |g, v| weighted_sum(g, g.mul(v[0], v[1]), 12)),
        check(
            "op.div",
            t,
            &[a234(), rand_tensor(&[3, 1], 3, 0.5, 1.5)],
            |g, v| weighted_sum(g, g.div(v[0], v[1]), 13),
        ),
        check("op.scalar-mul", t, &[a234()], |g, v| {
            weighted_sum(g, g.scalar_mul(v[0], -1.7), 14)
        }),
        check(
            "op.matmul",
            t,
            &[rand_tensor(&[2, 3, 4], 4, -1.0, 1.0), rand_tensor(&[4, 5], 5, -1.0, 1.0)],
            |g, v| weighted_sum(g, g.matmul(v[0], v[1]), 15),
        ),
        check("op.permute", t, &[a234()], |g, v| {
            weighted_sum(g, g.permute(v[0], &[2, 0, 1]), 16)
        }),
        check("op.transpose", t, &[a234()], |g, v| weighted_sum(g, g.transpose(v[0]), 17)),
        check("op.reshape", t, &[a234()], |g, v| {
            weighted_sum(g, g.reshape(v[0], &[4, 6]), 18)
        }),
        check(
            "op.concat",
            t,
            &[rand_tensor(&[2, 3], 6, -1.0, 1.0), rand_tensor(&[2, 2], 7, -1.0, 1.0)],
            |g, v| weighted_sum(g, g.concat(&[v[0], v[1]], 1), 19),
        ),
        check("op.slice", t, &[rand_tensor(&[3, 5], 8, -1.0, 1.0)], |g, v| {
            weighted_sum(g, g.slice(v[0], 1, 1, 3), 20)
        }),
        check("op.sum", t, &[a234()], |g, v| g.sum_all(v[0])),
        check("op.sum-axis", t, &[a234()], |g, v| weighted_sum(g, g.sum_axis(v[0], 1), 21)),
        check("op.mean", t, &[a234()], |g, v| g.mean_all(v[0])),
        check("op.mean-axis", t, &[a234()], |g, v| {
            weighted_sum(g, g.mean_axis(v[0], 0), 22)
        }),
        check("op.softmax", t, &[rand_tensor(&[4, 5], 9, -2.0, 2.0)], |g, v| {
            weighted_sum(g, g.softmax(v[0]), 23)
        }),
        check(
            "op.layer-norm",
            t,
            &[
                rand_tensor(&[4, 6], 10, -1.0, 1.0),
                rand_tensor(&[6], 11, 0.5, 1.5),
                rand_tensor(&[6], 12, -0.5, 0.5),
            ],
            |g, v| weighted_sum(g, g.layer_norm(v[0], v[1], v[2], 1e-5), 24),
        ),
        check("op.gelu", t, &[rand_tensor(&[3, 4], 13, -2.0, 2.0)], |g, v| {
            weighted_sum(g, g.gelu(v[0]), 25)
        }),
        check("op.sigmoid", t, &[rand_tensor(&[3, 4], 14, -3.0, 3.0)], |g, v| {
            weighted_sum(g, g.sigmoid(v[0]), 26)
        }),
        check("op.log", t, &[rand_tensor(&[3, 4], 15, 0.2, 2.0)], |g, v| {
            weighted_sum(g, g.log(v[0]), 27)
        }),
        check("op.exp", t, &[rand_tensor(&[3, 4], 16, -1.5, 1.5)], |g, v| {
            weighted_sum(g, g.exp(v[0]), 28)
        }),
        check("op.abs", t, &[rand_tensor(&[3, 4], 17, 0.1, 1.0)], |g, v| {
            // keep inputs away from the kink at zero
            let shifted = g.sub(v[0], g.scalar(2.0));
            weighted_sum(g, g.abs(shifted), 29)
        }),
        check(
            "op.correlate2d",
            t,
            &[rand_tensor(&[3, 8, 8], 18, 0.0, 1.0)],
            |g, v| {
                let kernel = rand_tensor(&[9], 19, 0.0, 0.3);
                weighted_sum(g, g.correlate2d(v[0], &kernel.data, 3, 3), 30)
            },
        ),
        check("op.rope", t, &[rand_tensor(&[2, 9, 8], 20, -1.0, 1.0)], |g, v| {
            let tables = build_axial_tables::<f64>(3, 8, 10000.0);
            weighted_sum(g, g.rope(v[0], &tables), 31)
        }),
    ]
}

fn named_points(cfg: &ModelConfig, prefix: &str, seed: u64) -> (Vec<String>, Vec<TensorData<f64>>) {
    let params = init_params(cfg, seed).expect("toy config is valid").map_to::<f64>();
    let names: Vec<String> =
        params.entries.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
    let points: Vec<TensorData<f64>> =
        names.iter().map(|n| params.entries[n].clone()).collect();
    (names, points)
}

/// Differentiable SSIM plus the two full training objectives, checked at
/// the toy model size (32x32, two blocks) in double precision.
pub fn model_suites() -> Vec<SuiteOutcome> {
    let cfg = ModelConfig::toy();
    let mut out = Vec::new();

    let a = synth::render_frame(16, 16, 0, 0).to_planar::<f64>();
    let b = synth::noisy_frame(16, 16, 1).to_planar::<f64>();
    let p = SsimParams::default();
    out.push(check_sampled(
        "model.ssim-loss",
        MODEL_TOLERANCE,
        &[TensorData::new(vec![3, 16, 16], a), TensorData::new(vec![3, 16, 16], b)],
        MODEL_EPS,
        None,
        |g, v| ssim_loss_graph(g, v[0], v[1], &p),
    ));

    // A bright constant target keeps |x - x̂| away from the abs kink: an
    // untrained generator emits mid-gray, so eps-sized perturbations never
    // flip a pixel's sign inside the L1 term and central differences stay
    // valid.
    let clean = crate::imaging::Image::filled(32, 32, [0.85, 0.8, 0.9])
        .expect("constant image is valid")
        .to_planar::<f64>();
    let corrupted = synth::noisy_frame(32, 32, 3).to_planar::<f64>();
    let full = init_params(&cfg, 40).expect("toy config is valid").map_to::<f64>();

    let (gen_names, gen_points) = named_points(&cfg, "gen.", 40);
    {
        let cfg = cfg.clone();
        let clean = clean.clone();
        let corrupted = corrupted.clone();
        let full = full.clone();
        out.push(check_sampled(
            "model.generator-loss",
            MODEL_TOLERANCE,
            &gen_points,
            MODEL_EPS,
            Some((MODEL_SAMPLE_PER_TENSOR, 0xfeed)),
            move |g, vars| {
                let map: BTreeMap<String, VarId> =
                    gen_names.iter().cloned().zip(vars.iter().copied()).collect();
                let gen_tp = TrackedParams::from_vars(map);
                let disc_tp = track_params(g, &full, "disc.", false);
                generator_loss_graph(
                    g,
                    &cfg,
                    &gen_tp,
                    &disc_tp,
                    &clean,
                    &corrupted,
                    &LossWeights::default(),
                    &SsimParams::default(),
                    false,
                )
                .expect("validated inputs")
                .total
            },
        ));
    }

    let (disc_names, disc_points) = named_points(&cfg, "disc.", 40);
    {
        let restored = synth::noisy_frame(32, 32, 4).to_planar::<f64>();
        out.push(check_sampled(
            "model.discriminator-loss",
            MODEL_TOLERANCE,
            &disc_points,
            MODEL_EPS,
            Some((MODEL_SAMPLE_PER_TENSOR, 0xbeef)),
            move |g, vars| {
                let map: BTreeMap<String, VarId> =
                    disc_names.iter().cloned().zip(vars.iter().copied()).collect();
                let disc_tp = TrackedParams::from_vars(map);
                discriminator_loss_graph(g, &cfg, &disc_tp, &clean, &restored)
                    .expect("validated inputs")
            },
        ));
    }
    out
}

/// Every suite, ops first.
pub fn run_all() -> Vec<SuiteOutcome> {
    let mut out = op_suites();
    out.extend(model_suites());
    out
}
