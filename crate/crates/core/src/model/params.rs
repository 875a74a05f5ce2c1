//! Named parameter tensors and their seeded initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CrtError, Result};
use crate::seeding::{fnv1a, keyed_rng};
use crate::tensor::TensorData;
use crate::Scalar;

use super::ModelConfig;

/// All named tensors of both networks. Generator names start with `gen.`,
/// discriminator names with `disc.`; every name maps to exactly one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub entries: BTreeMap<String, TensorData<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn get(&self, name: &str) -> Result<&TensorData<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| CrtError::Data(format!("missing parameter tensor {name}")))
    }

    pub fn map_to<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.map_to::<U>())).collect(),
        }
    }

    /// Order-stable bit-level digest, used to assert that training steps
    /// touch only the network they should.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut acc = 0xcbf2_9ce4_8422_2325u64;
        for (name, t) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            acc ^= fnv1a(name);
            for &v in &t.data {
                acc = acc
                    .rotate_left(13)
                    .wrapping_mul(0x0000_0100_0000_01b3)
                    .wrapping_add(v.to_f64().to_bits());
            }
        }
        acc
    }

    /// Check that the tensors are exactly those the config calls for, with
    /// matching shapes, finite values, and positive attention temperatures.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let expected = spec_shapes(cfg);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if &t.shape != shape {
                return Err(CrtError::Data(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(CrtError::Numerical(format!(
                    "parameter {name} has non-finite value at {i}"
                )));
            }
            if name.ends_with(".tau") && t.data.iter().any(|v| *v <= T::zero()) {
                return Err(CrtError::Data(format!("temperature {name} must stay positive")));
            }
        }
        for name in self.entries.keys() {
            if !expected.contains_key(name) {
                return Err(CrtError::Data(format!("unexpected parameter tensor {name}")));
            }
        }
        Ok(())
    }
}

/// Expected tensor names and shapes for a config.
pub(crate) fn spec_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    let p2 = cfg.patch * cfg.patch;
    let raw = 5 * 3 * p2; // image plus four shifted copies, channelwise
    let d = cfg.embed_dim;
    m.insert("gen.spt.norm.scale".into(), vec![raw]);
    m.insert("gen.spt.norm.shift".into(), vec![raw]);
    m.insert("gen.spt.proj.weight".into(), vec![raw, d]);
    m.insert("gen.spt.proj.bias".into(), vec![d]);
    block_shapes(&mut m, "gen", d, cfg.heads, cfg.mlp_ratio, cfg.depth);
    m.insert("gen.final_norm.scale".into(), vec![d]);
    m.insert("gen.final_norm.shift".into(), vec![d]);
    m.insert("gen.head.weight".into(), vec![d, 3 * p2]);
    m.insert("gen.head.bias".into(), vec![3 * p2]);

    let dd = cfg.disc_embed_dim;
    m.insert("disc.embed.proj.weight".into(), vec![3 * p2, dd]);
    m.insert("disc.embed.proj.bias".into(), vec![dd]);
    block_shapes(&mut m, "disc", dd, cfg.disc_heads, cfg.mlp_ratio, cfg.disc_depth);
    m.insert("disc.final_norm.scale".into(), vec![dd]);
    m.insert("disc.final_norm.shift".into(), vec![dd]);
    m.insert("disc.head.fc1.weight".into(), vec![dd, dd]);
    m.insert("disc.head.fc1.bias".into(), vec![dd]);
    m.insert("disc.head.fc2.weight".into(), vec![dd, 1]);
    m.insert("disc.head.fc2.bias".into(), vec![1]);
    m
}

fn block_shapes(
    m: &mut BTreeMap<String, Vec<usize>>,
    net: &str,
    d: usize,
    heads: usize,
    mlp_ratio: usize,
    depth: usize,
) {
    for b in 0..depth {
        let pre = format!("{net}.block{b}");
        for ln in ["ln1", "ln2"] {
            m.insert(format!("{pre}.{ln}.scale"), vec![d]);
            m.insert(format!("{pre}.{ln}.shift"), vec![d]);
        }
        for proj in ["q", "k", "v", "out"] {
            m.insert(format!("{pre}.attn.{proj}.weight"), vec![d, d]);
            m.insert(format!("{pre}.attn.{proj}.bias"), vec![d]);
        }
        m.insert(format!("{pre}.attn.tau"), vec![heads]);
        m.insert(format!("{pre}.mlp.fc1.weight"), vec![d, d * mlp_ratio]);
        m.insert(format!("{pre}.mlp.fc1.bias"), vec![d * mlp_ratio]);
        m.insert(format!("{pre}.mlp.fc2.weight"), vec![d * mlp_ratio, d]);
        m.insert(format!("{pre}.mlp.fc2.bias"), vec![d]);
    }
}

/// Seeded initialization: truncated normal (std 0.02, resampled beyond two
/// sigma) for projection weights, ones/zeros for norm scales/shifts, zeros
/// for biases, and tau = sqrt(head dim). Each tensor draws from a stream
/// keyed by (seed, name), so values are independent of creation order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<f32>> {
    cfg.validate()?;
    let mut entries = BTreeMap::new();
    for (name, shape) in spec_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".weight") {
            let mut rng = keyed_rng(&[0x1217, seed, fnv1a(&name)]);
            (0..n)
                .map(|_| {
                    loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            return (0.02 * z) as f32;
                        }
                    }
                })
                .collect()
        } else if name.ends_with(".scale") {
            vec![1.0; n]
        } else if name.ends_with(".tau") {
            let hd = if name.starts_with("gen.") { cfg.head_dim() } else { cfg.disc_head_dim() };
            vec![(hd as f64).sqrt() as f32; n]
        } else {
            vec![0.0; n] // shifts and biases
        };
        entries.insert(name, TensorData::new(shape, data));
    }
    let params = ParameterSet { entries };
    params.validate_for(cfg)?;
    Ok(params)
}
