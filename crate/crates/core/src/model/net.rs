//! Graph-level forward passes for the generator and discriminator.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{CrtError, Result};
use crate::imaging::Image;
use crate::tensor::{Graph, RopeTables, VarId};
use crate::Scalar;

use super::rope::build_axial_tables;
use super::tokenize::spt_raw_tokens;
use super::{ModelConfig, ParameterSet, ROPE_BASE};

const LN_EPS: f64 = 1e-5;

/// Parameters registered on one graph, leaf or constant, addressed by name.
pub struct TrackedParams {
    map: BTreeMap<String, VarId>,
}

/// Register every parameter whose name starts with `prefix` on the graph.
/// `trainable` decides between gradient-requiring leaves and constants.
pub fn track_params<T: Scalar>(
    g: &Graph<T>,
    params: &ParameterSet<T>,
    prefix: &str,
    trainable: bool,
) -> TrackedParams {
    let mut map = BTreeMap::new();
    for (name, t) in params.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let var = if trainable {
            g.leaf(t.data.clone(), &t.shape)
        } else {
            g.constant(t.data.clone(), &t.shape)
        };
        map.insert(name.clone(), var);
    }
    TrackedParams { map }
}

impl TrackedParams {
    /// Adopt externally created graph nodes (used by the gradient-check
    /// suites, which must own the leaves they perturb).
    pub fn from_vars(map: BTreeMap<String, VarId>) -> Self {
        TrackedParams { map }
    }

    fn var(&self, name: &str) -> VarId {
        *self.map.get(name).unwrap_or_else(|| panic!("parameter {name} not tracked"))
    }

    /// Gradients accumulated by backward, keyed by parameter name.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        self.map
            .iter()
            .filter_map(|(name, &var)| g.grad(var).map(|grad| (name.clone(), grad)))
            .collect()
    }
}

/// Linear layer: `x @ weight + bias` with the bias broadcast over rows.
fn linear<T: Scalar>(g: &Graph<T>, tp: &TrackedParams, prefix: &str, x: VarId) -> VarId {
    let y = g.matmul(x, tp.var(&format!("{prefix}.weight")));
    g.add(y, tp.var(&format!("{prefix}.bias")))
}

fn layer_norm<T: Scalar>(g: &Graph<T>, tp: &TrackedParams, prefix: &str, x: VarId) -> VarId {
    g.layer_norm(
        x,
        tp.var(&format!("{prefix}.scale")),
        tp.var(&format!("{prefix}.shift")),
        T::from_f64(LN_EPS),
    )
}

/// Constant additive mask with -inf on the diagonal: locality self-attention
/// never lets a token attend to itself.
fn self_mask<T: Scalar>(g: &Graph<T>, n: usize) -> VarId {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = T::neg_infinity();
    }
    g.constant(m, &[n, n])
}

/// Locality self-attention weights: softmax over temperature-scaled scores
/// with the self token masked out. `scores` has shape `[.., n, n]`.
pub fn lsa_weights<T: Scalar>(g: &Graph<T>, scores: VarId) -> VarId {
    let shape = g.shape(scores);
    let n = *shape.last().expect("scores must be square over the last two axes");
    g.softmax(g.add(scores, self_mask(g, n)))
}

/// Pre-norm transformer block: LSA attention with rotary q/k, then a GELU
/// MLP, each behind a residual.
#[allow(clippy::too_many_arguments)]
fn block<T: Scalar>(
    g: &Graph<T>,
    tp: &TrackedParams,
    prefix: &str,
    x: VarId,
    n: usize,
    heads: usize,
    head_dim: usize,
    tables: &Rc<RopeTables<T>>,
) -> VarId {
    let d = heads * head_dim;
    let a = layer_norm(g, tp, &format!("{prefix}.ln1"), x);
    let split = |v: VarId| {
        let r = g.reshape(v, &[n, heads, head_dim]);
        g.permute(r, &[1, 0, 2]) // [heads, n, head_dim]
    };
    let q = g.rope(split(linear(g, tp, &format!("{prefix}.attn.q"), a)), tables);
    let k = g.rope(split(linear(g, tp, &format!("{prefix}.attn.k"), a)), tables);
    let v = split(linear(g, tp, &format!("{prefix}.attn.v"), a));

    let tau = g.reshape(tp.var(&format!("{prefix}.attn.tau")), &[heads, 1, 1]);
    let scores = g.div(g.matmul(q, g.transpose(k)), tau);
    let weights = lsa_weights(g, scores);
    let ctx = g.matmul(weights, v); // [heads, n, head_dim]
    let merged = g.reshape(g.permute(ctx, &[1, 0, 2]), &[n, d]);
    let attn_out = linear(g, tp, &format!("{prefix}.attn.out"), merged);
    let x = g.add(x, attn_out);

    let b = layer_norm(g, tp, &format!("{prefix}.ln2"), x);
    let hidden = g.gelu(linear(g, tp, &format!("{prefix}.mlp.fc1"), b));
    let mlp_out = linear(g, tp, &format!("{prefix}.mlp.fc2"), hidden);
    g.add(x, mlp_out)
}

fn check_planar<T: Scalar>(cfg: &ModelConfig, planar: &[T]) -> Result<()> {
    let expect = 3 * cfg.image_side * cfg.image_side;
    if planar.len() != expect {
        return Err(CrtError::Data(format!(
            "input buffer has {} values, config {}x{} needs {}",
            planar.len(),
            cfg.image_side,
            cfg.image_side,
            expect
        )));
    }
    Ok(())
}

/// Restoration forward pass: shifted patch tokens -> transformer stack ->
/// per-token RGB logits folded back to the image grid -> sigmoid.
/// Returns the restored planar `[3, side, side]` tensor.
pub fn generator_forward<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    tp: &TrackedParams,
    corrupted_planar: &[T],
) -> Result<VarId> {
    check_planar(cfg, corrupted_planar)?;
    let side = cfg.image_side;
    let p = cfg.patch;
    let (grid, n) = (cfg.grid(), cfg.tokens());

    let raw = spt_raw_tokens(corrupted_planar, side, side, p);
    let tokens = g.constant(raw, &[n, 5 * 3 * p * p]);
    let normed = layer_norm(g, tp, "gen.spt.norm", tokens);
    let mut x = linear(g, tp, "gen.spt.proj", normed);

    let tables = build_axial_tables::<T>(grid, cfg.head_dim(), ROPE_BASE);
    for b in 0..cfg.depth {
        x = block(g, tp, &format!("gen.block{b}"), x, n, cfg.heads, cfg.head_dim(), &tables);
    }
    x = layer_norm(g, tp, "gen.final_norm", x);
    let out_tokens = linear(g, tp, "gen.head", x); // [n, 3*p*p]

    // Fold tokens back to [3, side, side].
    let folded = g.reshape(
        g.permute(g.reshape(out_tokens, &[grid, grid, 3, p, p]), &[2, 0, 3, 1, 4]),
        &[3, side, side],
    );
    let logits = if cfg.global_residual {
        // Adding the input as logits makes the untrained model near-identity.
        let resid: Vec<T> = corrupted_planar
            .iter()
            .map(|&v| {
                let x = v.to_f64().clamp(1e-4, 1.0 - 1e-4);
                T::from_f64((x / (1.0 - x)).ln())
            })
            .collect();
        let r = g.constant(resid, &[3, side, side]);
        g.add(folded, r)
    } else {
        folded
    };
    Ok(g.sigmoid(logits))
}

/// Classification forward pass on a planar buffer that needs no gradient.
pub fn discriminator_forward<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    tp: &TrackedParams,
    planar: &[T],
) -> Result<VarId> {
    check_planar(cfg, planar)?;
    let side = cfg.image_side;
    let x = g.constant(planar.to_vec(), &[3, side, side]);
    discriminator_forward_node(g, cfg, tp, x)
}

/// Classification forward pass on a `[3, side, side]` graph node: plain
/// patch embedding (expressed as in-graph reshapes so gradients can reach a
/// generator feeding it), the same block stack, mean-pooled tokens, and a
/// two-layer validity head. Returns a `[1]` score in (0, 1).
pub fn discriminator_forward_node<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    tp: &TrackedParams,
    image: VarId,
) -> Result<VarId> {
    let side = cfg.image_side;
    let p = cfg.patch;
    let (grid, n) = (cfg.grid(), cfg.tokens());
    if g.shape(image) != vec![3, side, side] {
        return Err(CrtError::Data(format!(
            "discriminator input has shape {:?}, expected [3, {side}, {side}]",
            g.shape(image)
        )));
    }

    // [3,H,W] -> [3,gh,p,gw,p] -> [gh,gw,3,p,p] -> [n, 3*p*p]
    let tokens = g.reshape(
        g.permute(g.reshape(image, &[3, grid, p, grid, p]), &[1, 3, 0, 2, 4]),
        &[n, 3 * p * p],
    );
    let mut x = linear(g, tp, "disc.embed.proj", tokens);

    let tables = build_axial_tables::<T>(grid, cfg.disc_head_dim(), ROPE_BASE);
    for b in 0..cfg.disc_depth {
        x = block(
            g,
            tp,
            &format!("disc.block{b}"),
            x,
            n,
            cfg.disc_heads,
            cfg.disc_head_dim(),
            &tables,
        );
    }
    x = layer_norm(g, tp, "disc.final_norm", x);
    let pooled = g.reshape(g.mean_axis(x, 0), &[1, cfg.disc_embed_dim]);
    let hidden = g.gelu(linear(g, tp, "disc.head.fc1", pooled));
    let score = linear(g, tp, "disc.head.fc2", hidden); // [1, 1]
    Ok(g.reshape(g.sigmoid(score), &[1]))
}

/// Run the generator on one image without recording gradients.
pub fn restore_image(cfg: &ModelConfig, params: &ParameterSet<f32>, input: &Image) -> Result<Image> {
    if input.height() != cfg.image_side || input.width() != cfg.image_side {
        return Err(CrtError::Data(format!(
            "input is {}x{}, model expects {}x{}",
            input.height(),
            input.width(),
            cfg.image_side,
            cfg.image_side
        )));
    }
    let g: Graph<f32> = Graph::inference();
    let tp = track_params(&g, params, "gen.", false);
    let out = generator_forward(&g, cfg, &tp, &input.to_planar::<f32>())?;
    Image::from_planar_clamped(cfg.image_side, cfg.image_side, &g.data(out))
}
