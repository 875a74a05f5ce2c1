//! Restoration-quality reports: per-kind PSNR/SSIM of corrupted and
//! restored images against the clean ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_pair, Manifest, Split};
use crate::error::{CrtError, Result};
use crate::imaging::{psnr, ssim, Image, SsimParams};
use crate::model::{ModelConfig, ParameterSet};
use crate::training::restore_planar;

/// Aggregated metrics for one corruption kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: String,
    pub pairs: usize,
    pub corrupted_psnr: f64,
    pub restored_psnr: f64,
    pub psnr_gain: f64,
    pub corrupted_ssim: f64,
    pub restored_ssim: f64,
    pub ssim_gain: f64,
}

/// Run the generator over a split and aggregate both metric pairs per kind.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    manifest: &Manifest,
    split: Split,
) -> Result<Vec<KindReport>> {
    params.validate_for(cfg)?;
    let ssim_params = SsimParams::default();
    struct Acc {
        n: usize,
        cp: f64,
        rp: f64,
        cs: f64,
        rs: f64,
    }
    let mut by_kind: BTreeMap<String, Acc> = BTreeMap::new();
    let mut total = 0usize;
    for rec in manifest.pairs_in(split) {
        let (corrupted, clean) = load_pair(manifest, &rec.pair_id)?;
        if corrupted.height() != cfg.image_side || corrupted.width() != cfg.image_side {
            return Err(CrtError::Data(format!(
                "pair {} is {}x{}, checkpoint expects {}x{}",
                rec.pair_id,
                corrupted.height(),
                corrupted.width(),
                cfg.image_side,
                cfg.image_side
            )));
        }
        let restored_planar = restore_planar(cfg, params, &corrupted.to_planar::<f32>())?;
        let restored =
            Image::from_planar_clamped(corrupted.height(), corrupted.width(), &restored_planar)?;
        let acc = by_kind
            .entry(rec.kind_label.clone())
            .or_insert(Acc { n: 0, cp: 0.0, rp: 0.0, cs: 0.0, rs: 0.0 });
        acc.n += 1;
        acc.cp += psnr(&corrupted, &clean)?;
        acc.rp += psnr(&restored, &clean)?;
        acc.cs += ssim(&corrupted, &clean, &ssim_params)?;
        acc.rs += ssim(&restored, &clean, &ssim_params)?;
        total += 1;
    }
    if total == 0 {
        return Err(CrtError::Data(format!("split {split} is empty")));
    }
    Ok(by_kind
        .into_iter()
        .map(|(kind, a)| {
            let n = a.n as f64;
            KindReport {
                kind,
                pairs: a.n,
                corrupted_psnr: a.cp / n,
                restored_psnr: a.rp / n,
                psnr_gain: (a.rp - a.cp) / n,
                corrupted_ssim: a.cs / n,
                restored_ssim: a.rs / n,
                ssim_gain: (a.rs - a.cs) / n,
            }
        })
        .collect())
}

/// One JSON record per kind.
pub fn write_report_jsonl(path: &Path, rows: &[KindReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CrtError::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| CrtError::io(path, e))?;
    for row in rows {
        let mut line = serde_json::to_string(row)
            .map_err(|e| CrtError::Data(format!("cannot serialize report row: {e}")))?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| CrtError::io(path, e))?;
    }
    f.flush().map_err(|e| CrtError::io(path, e))
}

/// Aligned plain-text table, kinds as columns and metrics as rows.
pub fn format_report_table(rows: &[KindReport]) -> String {
    let metric_col = 20usize;
    let width = rows.iter().map(|r| r.kind.len()).max().unwrap_or(8).max(8) + 2;
    let mut out = String::new();
    out.push_str(&format!("{:<metric_col$}", "metric"));
    for r in rows {
        out.push_str(&format!("{:>width$}", r.kind));
    }
    out.push('\n');
    let mut push_row = |name: &str, f: &dyn Fn(&KindReport) -> String| {
        out.push_str(&format!("{name:<metric_col$}"));
        for r in rows {
            out.push_str(&format!("{:>width$}", f(r)));
        }
        out.push('\n');
    };
    push_row("pairs", &|r| r.pairs.to_string());
    push_row("corrupted psnr (db)", &|r| format!("{:.2}", r.corrupted_psnr));
    push_row("restored psnr (db)", &|r| format!("{:.2}", r.restored_psnr));
    push_row("psnr gain (db)", &|r| format!("{:+.2}", r.psnr_gain));
    push_row("corrupted ssim", &|r| format!("{:.4}", r.corrupted_ssim));
    push_row("restored ssim", &|r| format!("{:.4}", r.restored_ssim));
    push_row("ssim gain", &|r| format!("{:+.4}", r.ssim_gain));
    out
}
