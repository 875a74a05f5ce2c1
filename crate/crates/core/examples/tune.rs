// Scratch experiment driver (not part of the artifact): measures overfit
// convergence and restoration efficacy at candidate desk hyperparameters.

use std::time::Instant;

use crt_core::corruption::KindRequest;
use crt_core::dataset::{build_dataset, Manifest, Split};
use crt_core::loss::LossWeights;
use crt_core::model::ModelConfig;
use crt_core::synth;
use crt_core::training::{evaluate, train, TrainConfig};

fn kinds_all() -> Vec<KindRequest> {
    ["identity", "centered-square", "gaussian-noise", "horizontal-lines-0.2", "horizontal-lines-0.5", "water-drops"]
        .iter()
        .map(|t| KindRequest::parse(t).unwrap())
        .collect()
}

fn kinds_five() -> Vec<KindRequest> {
    ["centered-square", "gaussian-noise", "horizontal-lines-0.2", "horizontal-lines-0.5", "water-drops"]
        .iter()
        .map(|t| KindRequest::parse(t).unwrap())
        .collect()
}

fn main() {
    // logging via println only
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("overfit");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(150);
    let tmp = std::env::temp_dir().join(format!("crt_tune_{mode}_{lr}_{epochs}"));
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).unwrap();

    match mode {
        "overfit" => {
            // criterion-4 shape: 10 pairs (2 frames x 5 kinds), 8 train.
            let frames = tmp.join("frames");
            synth::write_trajectory_tree(&frames, 1, 2, 64, 64).unwrap();
            let ds = tmp.join("ds");
            let mut seed_used = None;
            for seed in 0..50u64 {
                let out = tmp.join(format!("ds{seed}"));
                let m = build_dataset(&frames, &out, &kinds_five(), seed, 0.8,
                    &crt_core::corruption::CorruptionParams::default()).unwrap();
                let train_kinds: std::collections::BTreeSet<String> =
                    m.pairs_in(Split::Train).map(|p| p.kind_label.clone()).collect();
                if train_kinds.len() == 5 {
                    std::fs::rename(&out, &ds).unwrap();
                    seed_used = Some(seed);
                    break;
                }
            }
            println!("dataset seed with 5-kind train split: {seed_used:?}");
            let manifest = Manifest::load(&ds).unwrap();
            let cfg = ModelConfig::desk();
            let tc = TrainConfig {
                epochs, // 150 epochs * 2 micro-batches = 300 G steps at batch 4
                learning_rate: lr,
                batch_size: 4,
                accumulation_steps: 1,
                seed: 7,
                ..TrainConfig::desk()
            };
            let t0 = Instant::now();
            let outcome = train(&manifest, &cfg, &tc, &LossWeights::default(), &tmp.join("run")).unwrap();
            let first = outcome.history.steps.first().unwrap();
            let last = outcome.history.steps.last().unwrap();
            println!(
                "overfit lr={lr} epochs={epochs}: initial l1 {:.4} final l1 {:.4} ratio {:.3} ({} steps, {:.1}s)",
                first.l1, last.l1, last.l1 / first.l1,
                outcome.history.steps.len(), t0.elapsed().as_secs_f64(),
            );
        }
        "efficacy" => {
            // criterion-5 shape: 34 frames x 6 kinds = 204 pairs.
            let frames = tmp.join("frames");
            synth::write_trajectory_tree(&frames, 2, 17, 64, 64).unwrap();
            let ds = tmp.join("ds");
            let manifest = build_dataset(&frames, &ds, &kinds_all(), 11, 0.8,
                &crt_core::corruption::CorruptionParams::default()).unwrap();
            println!("pairs {} train {} val {}", manifest.pairs.len(),
                manifest.header.train_count, manifest.header.val_count);
            let cfg = ModelConfig::desk();
            let tc = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size: 4,
                accumulation_steps: 1,
                seed: 7,
                ..TrainConfig::desk()
            };
            let t0 = Instant::now();
            let outcome = train(&manifest, &cfg, &tc, &LossWeights::default(), &tmp.join("run")).unwrap();
            println!("trained in {:.1}s, best val psnr {:.2}", t0.elapsed().as_secs_f64(), outcome.best_val_psnr);
            let ckpt = crt_core::model::checkpoint::load(&outcome.best_checkpoint).unwrap();
            let rows = evaluate(&ckpt.config, &ckpt.params, &manifest, Split::Val).unwrap();
            println!("{}", crt_core::training::format_report_table(&rows));
        }
        other => eprintln!("unknown mode {other}"),
    }
}
