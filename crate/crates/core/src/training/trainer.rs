//! The step machinery and the full training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::{batch_iterator, load_pair, Manifest, Split};
use crate::error::{CrtError, Result};
use crate::imaging::{psnr, ssim, Image, SsimParams};
use crate::loss::{discriminator_loss_graph, generator_loss_graph, LossWeights};
use crate::model::{checkpoint, generator_forward, init_params, track_params, ModelConfig, ParameterSet};
use crate::seeding::mix;
use crate::tensor::{adam_step, AdamState, Graph, StepOutcome};
use crate::Scalar;

use super::{EpochRecord, StepRecord, TrainConfig, TrainHistory};

/// One aligned pair as planar buffers.
#[derive(Clone, Debug)]
pub struct PlanarPair<T> {
    pub corrupted: Vec<T>,
    pub clean: Vec<T>,
}

/// Generator pass without gradient recording.
pub fn restore_planar<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<T>,
    corrupted: &[T],
) -> Result<Vec<T>> {
    let g: Graph<T> = Graph::inference();
    let tp = track_params(&g, params, "gen.", false);
    let out = generator_forward(&g, cfg, &tp, corrupted)?;
    Ok(g.data(out).to_vec())
}

/// Mean weighted generator loss components over one micro-batch.
#[derive(Clone, Copy, Debug)]
pub struct GenLossValues {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub adv: f64,
}

/// Forward + backward of the generator objective over a micro-batch,
/// returning mean-loss gradients for the `gen.*` parameters. Generic so the
/// gradient-accumulation equivalence is checkable in f64.
pub fn generator_batch_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<T>,
    weights: &LossWeights,
    ssim_params: &SsimParams,
    batch: &[PlanarPair<T>],
    minimax: bool,
) -> Result<(BTreeMap<String, Vec<T>>, GenLossValues)> {
    if batch.is_empty() {
        return Err(CrtError::Usage("empty micro-batch".into()));
    }
    let g: Graph<T> = Graph::new();
    let gen_tp = track_params(&g, params, "gen.", true);
    let disc_tp = track_params(&g, params, "disc.", false);
    let inv_b = T::one() / T::from_usize(batch.len());
    let mut totals = Vec::with_capacity(batch.len());
    let mut sums = GenLossValues { total: 0.0, l1: 0.0, ssim: 0.0, adv: 0.0 };
    for pair in batch {
        let parts = generator_loss_graph(
            &g,
            cfg,
            &gen_tp,
            &disc_tp,
            &pair.clean,
            &pair.corrupted,
            weights,
            ssim_params,
            minimax,
        )?;
        sums.total += g.item(parts.total).to_f64();
        sums.l1 += g.item(parts.l1).to_f64();
        sums.ssim += g.item(parts.ssim).to_f64();
        sums.adv += g.item(parts.adv).to_f64();
        totals.push(parts.total);
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = g.add(acc, t);
    }
    let mean = g.scalar_mul(acc, inv_b);
    let values = GenLossValues {
        total: sums.total / batch.len() as f64,
        l1: sums.l1 / batch.len() as f64,
        ssim: sums.ssim / batch.len() as f64,
        adv: sums.adv / batch.len() as f64,
    };
    if !values.total.is_finite() {
        return Err(CrtError::Numerical(format!(
            "non-finite generator loss: l1={} ssim={} adv={}",
            values.l1, values.ssim, values.adv
        )));
    }
    g.backward(mean)?;
    Ok((gen_tp.collect_grads(&g), values))
}

/// Forward + backward of the discriminator objective over a micro-batch of
/// (clean, restored-detached) pairs; returns mean-loss gradients for the
/// `disc.*` parameters and the mean loss.
pub fn discriminator_batch_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<T>,
    batch: &[(Vec<T>, Vec<T>)],
) -> Result<(BTreeMap<String, Vec<T>>, f64)> {
    if batch.is_empty() {
        return Err(CrtError::Usage("empty micro-batch".into()));
    }
    let g: Graph<T> = Graph::new();
    let disc_tp = track_params(&g, params, "disc.", true);
    let mut losses = Vec::with_capacity(batch.len());
    for (clean, restored) in batch {
        losses.push(discriminator_loss_graph(&g, cfg, &disc_tp, clean, restored)?);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = g.add(acc, l);
    }
    let mean = g.scalar_mul(acc, T::one() / T::from_usize(batch.len()));
    let value = g.item(mean).to_f64();
    if !value.is_finite() {
        return Err(CrtError::Numerical(format!("non-finite discriminator loss {value}")));
    }
    g.backward(mean)?;
    Ok((disc_tp.collect_grads(&g), value))
}

fn accumulate<T: Scalar>(acc: &mut BTreeMap<String, Vec<T>>, grads: BTreeMap<String, Vec<T>>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.iter_mut().zip(g.iter()) {
                    *x = *x + *y;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Holds both networks, their optimizer states, and gradient accumulators.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub weights: LossWeights,
    pub ssim_params: SsimParams,
    pub params: ParameterSet<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    g_acc: BTreeMap<String, Vec<f32>>,
    g_acc_count: usize,
    d_acc: BTreeMap<String, Vec<f32>>,
    d_acc_count: usize,
    /// Optimizer steps applied so far.
    pub g_steps: u64,
    pub d_steps: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        weights.validate()?;
        let params = init_params(&model_cfg, train_cfg.seed)?;
        Ok(Trainer {
            model_cfg,
            train_cfg,
            weights,
            ssim_params: SsimParams::default(),
            params,
            adam_g: AdamState::default(),
            adam_d: AdamState::default(),
            g_acc: BTreeMap::new(),
            g_acc_count: 0,
            d_acc: BTreeMap::new(),
            d_acc_count: 0,
            g_steps: 0,
            d_steps: 0,
        })
    }

    /// Resume from checkpointed parameters and optimizer states.
    pub fn from_checkpoint(
        ckpt: checkpoint::Checkpoint,
        train_cfg: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        train_cfg.validate()?;
        weights.validate()?;
        let (adam_g, adam_d) = ckpt.adam.unwrap_or_default();
        Ok(Trainer {
            model_cfg: ckpt.config,
            train_cfg,
            weights,
            ssim_params: SsimParams::default(),
            params: ckpt.params,
            adam_g,
            adam_d,
            g_acc: BTreeMap::new(),
            g_acc_count: 0,
            d_acc: BTreeMap::new(),
            d_acc_count: 0,
            g_steps: 0,
            d_steps: 0,
        })
    }

    fn lr(&self) -> f32 {
        self.train_cfg.learning_rate as f32
    }

    fn apply_accumulated(
        params: &mut ParameterSet<f32>,
        acc: &mut BTreeMap<String, Vec<f32>>,
        count: &mut usize,
        adam: &mut AdamState<f32>,
        lr: f32,
        steps: &mut u64,
    ) -> Result<()> {
        if *count == 0 {
            return Ok(());
        }
        let inv = 1.0f32 / *count as f32;
        let grads: BTreeMap<String, Vec<f32>> = std::mem::take(acc)
            .into_iter()
            .map(|(n, mut g)| {
                for v in g.iter_mut() {
                    *v *= inv;
                }
                (n, g)
            })
            .collect();
        *count = 0;
        match adam_step(&mut params.entries, &grads, adam, lr)? {
            StepOutcome::Applied => {
                *steps += 1;
                Ok(())
            }
            StepOutcome::SkippedNonFinite { name, index } => {
                log::warn!("skipped optimizer step: non-finite gradient in {name}[{index}]");
                Ok(())
            }
        }
    }

    /// One micro-batch: discriminator phase (restored images detached, with
    /// its own accumulation and optimizer step) followed by the generator
    /// phase. Returns the losses recorded for history.
    pub fn micro_step(&mut self, batch: &[PlanarPair<f32>]) -> Result<(GenLossValues, f64)> {
        // Discriminator phase(s): forward the generator without recording.
        let mut d_loss = 0.0;
        for _ in 0..self.train_cfg.d_steps_per_g_step {
            let detached: Vec<(Vec<f32>, Vec<f32>)> = batch
                .iter()
                .map(|p| {
                    restore_planar(&self.model_cfg, &self.params, &p.corrupted)
                        .map(|restored| (p.clean.clone(), restored))
                })
                .collect::<Result<_>>()?;
            let (d_grads, loss) = discriminator_batch_step(&self.model_cfg, &self.params, &detached)?;
            d_loss = loss;
            accumulate(&mut self.d_acc, d_grads);
            self.d_acc_count += 1;
            if self.d_acc_count == self.train_cfg.accumulation_steps {
                let lr = self.lr();
                Self::apply_accumulated(
                    &mut self.params,
                    &mut self.d_acc,
                    &mut self.d_acc_count,
                    &mut self.adam_d,
                    lr,
                    &mut self.d_steps,
                )?;
            }
        }

        // Generator phase.
        let (g_grads, values) = generator_batch_step(
            &self.model_cfg,
            &self.params,
            &self.weights,
            &self.ssim_params,
            batch,
            self.train_cfg.minimax_adversarial,
        )?;
        accumulate(&mut self.g_acc, g_grads);
        self.g_acc_count += 1;
        if self.g_acc_count == self.train_cfg.accumulation_steps {
            let lr = self.lr();
            Self::apply_accumulated(
                &mut self.params,
                &mut self.g_acc,
                &mut self.g_acc_count,
                &mut self.adam_g,
                lr,
                &mut self.g_steps,
            )?;
        }
        Ok((values, d_loss))
    }

    /// Apply any partially accumulated gradients (end of epoch), dividing by
    /// the actual number of contributing micro-batches.
    pub fn flush_accumulation(&mut self) -> Result<()> {
        let lr = self.lr();
        Self::apply_accumulated(
            &mut self.params,
            &mut self.d_acc,
            &mut self.d_acc_count,
            &mut self.adam_d,
            lr,
            &mut self.d_steps,
        )?;
        Self::apply_accumulated(
            &mut self.params,
            &mut self.g_acc,
            &mut self.g_acc_count,
            &mut self.adam_g,
            lr,
            &mut self.g_steps,
        )
    }

    /// Mean restored-vs-clean PSNR/SSIM over aligned (corrupted, clean)
    /// image pairs.
    pub fn validate_images(&self, pairs: &[(Image, Image)]) -> Result<(f64, f64)> {
        if pairs.is_empty() {
            return Err(CrtError::Data("validation split is empty".into()));
        }
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (corrupted, clean) in pairs {
            let restored_planar =
                restore_planar(&self.model_cfg, &self.params, &corrupted.to_planar::<f32>())?;
            let restored = Image::from_planar_clamped(
                corrupted.height(),
                corrupted.width(),
                &restored_planar,
            )?;
            psnr_sum += psnr(&restored, clean)?;
            ssim_sum += ssim(&restored, clean, &self.ssim_params)?;
        }
        Ok((psnr_sum / pairs.len() as f64, ssim_sum / pairs.len() as f64))
    }
}

/// Artifacts of a completed run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub history_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_psnr: f64,
}

fn load_planar_batch(
    manifest: &Manifest,
    records: &[&crate::dataset::PairRecord],
    side: usize,
) -> Result<Vec<PlanarPair<f32>>> {
    records
        .iter()
        .map(|rec| {
            let (corrupted, clean) = load_pair(manifest, &rec.pair_id)?;
            if corrupted.height() != side || corrupted.width() != side {
                return Err(CrtError::Data(format!(
                    "pair {} is {}x{}, model expects {side}x{side}",
                    rec.pair_id,
                    corrupted.height(),
                    corrupted.width()
                )));
            }
            Ok(PlanarPair {
                corrupted: corrupted.to_planar::<f32>(),
                clean: clean.to_planar::<f32>(),
            })
        })
        .collect()
}

/// Full adversarial training over a dataset manifest. Deterministic given
/// the seeds in `train_cfg`; history is appended to `out_dir/history.jsonl`
/// as the run progresses.
pub fn train(
    manifest: &Manifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_cfg.clone(), train_cfg.clone(), *weights)?;
    train_with(&mut trainer, manifest, out_dir)
}

/// Same as [`train`] but on an existing trainer (e.g. resumed state).
pub fn train_with(trainer: &mut Trainer, manifest: &Manifest, out_dir: &Path) -> Result<TrainOutcome> {
    if manifest.pairs_in(Split::Train).next().is_none() {
        return Err(CrtError::Data("train split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CrtError::io(out_dir, e))?;
    let history_path = out_dir.join("history.jsonl");
    let mut history_file =
        fs::File::create(&history_path).map_err(|e| CrtError::io(&history_path, e))?;
    let mut history = TrainHistory::default();
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let side = trainer.model_cfg.image_side;
    let seed = trainer.train_cfg.seed;

    // Validation images are reused every epoch.
    let val_pairs: Vec<(Image, Image)> = manifest
        .pairs_in(Split::Val)
        .map(|rec| load_pair(manifest, &rec.pair_id))
        .collect::<Result<_>>()?;

    let mut best_val = f64::NEG_INFINITY;
    let mut step: u64 = 0;
    let epochs = trainer.train_cfg.epochs;
    for epoch in 0..epochs {
        let batches = batch_iterator(
            manifest,
            Split::Train,
            trainer.train_cfg.batch_size,
            mix(&[0xe90c, seed, epoch as u64]),
        )?;
        for records in &batches {
            let batch = load_planar_batch(manifest, records, side)?;
            let (gen_values, d_loss) = trainer.micro_step(&batch).map_err(|e| {
                log::error!("aborting at epoch {epoch} step {step}: {e}");
                e
            })?;
            let record = StepRecord {
                epoch,
                step,
                l1: gen_values.l1,
                ssim_loss: gen_values.ssim,
                adv_g: gen_values.adv,
                d_loss,
            };
            append_jsonl(&mut history_file, &history_path, &record)?;
            history.steps.push(record);
            step += 1;
        }
        trainer.flush_accumulation()?;

        if !val_pairs.is_empty() {
            let (val_psnr, val_ssim) = trainer.validate_images(&val_pairs)?;
            if !val_psnr.is_finite() || !val_ssim.is_finite() {
                return Err(CrtError::Numerical(format!(
                    "non-finite validation metrics at epoch {epoch}: psnr={val_psnr} ssim={val_ssim}"
                )));
            }
            let record = EpochRecord { epoch, val_psnr, val_ssim };
            append_jsonl(&mut history_file, &history_path, &record)?;
            history.epochs.push(record);
            log::info!("epoch {epoch}: val psnr {val_psnr:.3} dB, val ssim {val_ssim:.4}");
            if val_psnr > best_val {
                best_val = val_psnr;
                checkpoint::save(
                    &best_path,
                    &trainer.model_cfg,
                    &trainer.params,
                    Some((&trainer.adam_g, &trainer.adam_d)),
                )?;
            }
        }
        if (epoch + 1) % trainer.train_cfg.checkpoint_every_epochs == 0 || epoch + 1 == epochs {
            checkpoint::save(
                &last_path,
                &trainer.model_cfg,
                &trainer.params,
                Some((&trainer.adam_g, &trainer.adam_d)),
            )?;
        }
    }
    if val_pairs.is_empty() {
        // No validation split: the last state is also the best we know of.
        checkpoint::save(
            &best_path,
            &trainer.model_cfg,
            &trainer.params,
            Some((&trainer.adam_g, &trainer.adam_d)),
        )?;
    }
    Ok(TrainOutcome {
        history,
        history_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_val_psnr: best_val,
    })
}

fn append_jsonl<R: serde::Serialize>(
    file: &mut fs::File,
    path: &Path,
    record: &R,
) -> Result<()> {
    let mut line = serde_json::to_string(record)
        .map_err(|e| CrtError::Data(format!("cannot serialize history record: {e}")))?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| CrtError::io(path, e))?;
    file.flush().map_err(|e| CrtError::io(path, e))
}
