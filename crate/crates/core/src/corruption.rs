//! Seeded synthesis of the five sensor corruptions. A resolved
//! [`CorruptionSpec`] plus the image dimensions it was sampled for fully
//! determines the corrupted output, bit for bit, on every platform.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CrtError, Result};
use crate::imaging::{gaussian_blur, Image};
use crate::seeding::keyed_rng;

/// The corruption families. Horizontal-line intensity (20% vs 50% coverage)
/// is a parameter, not a separate kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Identity,
    CenteredSquare,
    GaussianNoise,
    HorizontalLines,
    WaterDrops,
}

impl CorruptionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::Identity => "identity",
            CorruptionKind::CenteredSquare => "centered-square",
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::HorizontalLines => "horizontal-lines",
            CorruptionKind::WaterDrops => "water-drops",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            CorruptionKind::Identity => 0,
            CorruptionKind::CenteredSquare => 1,
            CorruptionKind::GaussianNoise => 2,
            CorruptionKind::HorizontalLines => 3,
            CorruptionKind::WaterDrops => 4,
        }
    }
}

/// Tunable magnitudes with the published/default values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorruptionParams {
    /// Black square side as a fraction of min(H, W).
    pub square_fraction: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Fraction of image rows blackened by horizontal lines.
    pub line_coverage: f64,
    /// Line band thickness in rows.
    pub line_thickness: usize,
    /// Inclusive range for the number of water drops.
    pub drop_count: (usize, usize),
    /// Drop radius range as fractions of min(H, W).
    pub drop_radius_frac: (f64, f64),
    /// Blend weight of the blurred content inside each drop.
    pub drop_alpha: f64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        CorruptionParams {
            square_fraction: 0.4,
            noise_sigma: 0.20,
            line_coverage: 0.5,
            line_thickness: 4,
            drop_count: (5, 12),
            drop_radius_frac: (0.03, 0.10),
            drop_alpha: 0.7,
        }
    }
}

impl CorruptionParams {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |v: f64| v > 0.0 && v < 1.0;
        if !frac_ok(self.square_fraction) {
            return Err(CrtError::Usage(format!(
                "square fraction must be in (0,1), got {}",
                self.square_fraction
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(CrtError::Usage(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !frac_ok(self.line_coverage) {
            return Err(CrtError::Usage(format!(
                "line coverage must be in (0,1), got {}",
                self.line_coverage
            )));
        }
        if self.line_thickness == 0 {
            return Err(CrtError::Usage("line thickness must be >= 1".into()));
        }
        if self.drop_count.0 == 0 || self.drop_count.0 > self.drop_count.1 {
            return Err(CrtError::Usage(format!(
                "drop count range {:?} invalid; need 1 <= lo <= hi",
                self.drop_count
            )));
        }
        if !frac_ok(self.drop_radius_frac.0)
            || !frac_ok(self.drop_radius_frac.1)
            || self.drop_radius_frac.0 > self.drop_radius_frac.1
        {
            return Err(CrtError::Usage(format!(
                "drop radius range {:?} invalid",
                self.drop_radius_frac
            )));
        }
        if !frac_ok(self.drop_alpha) {
            return Err(CrtError::Usage(format!("drop alpha must be in (0,1), got {}", self.drop_alpha)));
        }
        Ok(())
    }
}

/// One black line band: `height` rows starting at `start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub start: usize,
    pub height: usize,
}

/// One water drop; center coordinates are in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drop {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

/// Kind-specific resolved parameters, including every sampled placement so a
/// manifest entry reproduces its pair exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResolvedCorruption {
    Identity,
    CenteredSquare { side_fraction: f64, side_px: usize },
    GaussianNoise { sigma: f64 },
    HorizontalLines { coverage: f64, thickness: usize, bands: Vec<Band> },
    WaterDrops { alpha: f64, drops: Vec<Drop> },
}

/// A fully resolved, seeded corruption instance tied to the dimensions it
/// was sampled for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub resolved: ResolvedCorruption,
}

impl CorruptionSpec {
    pub fn kind(&self) -> CorruptionKind {
        match self.resolved {
            ResolvedCorruption::Identity => CorruptionKind::Identity,
            ResolvedCorruption::CenteredSquare { .. } => CorruptionKind::CenteredSquare,
            ResolvedCorruption::GaussianNoise { .. } => CorruptionKind::GaussianNoise,
            ResolvedCorruption::HorizontalLines { .. } => CorruptionKind::HorizontalLines,
            ResolvedCorruption::WaterDrops { .. } => CorruptionKind::WaterDrops,
        }
    }

    /// Report/CLI label; horizontal lines carry their coverage, e.g.
    /// `horizontal-lines-0.2`.
    pub fn kind_label(&self) -> String {
        match &self.resolved {
            ResolvedCorruption::HorizontalLines { coverage, .. } => {
                format!("horizontal-lines-{coverage}")
            }
            other => match other {
                ResolvedCorruption::Identity => "identity".to_string(),
                ResolvedCorruption::CenteredSquare { .. } => "centered-square".to_string(),
                ResolvedCorruption::GaussianNoise { .. } => "gaussian-noise".to_string(),
                ResolvedCorruption::WaterDrops { .. } => "water-drops".to_string(),
                ResolvedCorruption::HorizontalLines { .. } => unreachable!(),
            },
        }
    }
}

/// A corruption request as written on a command line or kinds list:
/// a kind token, optionally carrying a line-coverage suffix like
/// `horizontal-lines-0.2`.
#[derive(Clone, Debug, PartialEq)]
pub struct KindRequest {
    pub kind: CorruptionKind,
    pub line_coverage: Option<f64>,
}

impl KindRequest {
    pub fn parse(token: &str) -> Result<Self> {
        let plain = |kind| Ok(KindRequest { kind, line_coverage: None });
        match token {
            "identity" => plain(CorruptionKind::Identity),
            "centered-square" => plain(CorruptionKind::CenteredSquare),
            "gaussian-noise" => plain(CorruptionKind::GaussianNoise),
            "horizontal-lines" => plain(CorruptionKind::HorizontalLines),
            "water-drops" => plain(CorruptionKind::WaterDrops),
            other => {
                if let Some(suffix) = other.strip_prefix("horizontal-lines-") {
                    let cov: f64 = suffix.parse().map_err(|_| {
                        CrtError::Usage(format!("bad line coverage in kind token {other}"))
                    })?;
                    if !(0.0..1.0).contains(&cov) || cov == 0.0 {
                        return Err(CrtError::Usage(format!(
                            "line coverage {cov} must be in (0,1)"
                        )));
                    }
                    Ok(KindRequest {
                        kind: CorruptionKind::HorizontalLines,
                        line_coverage: Some(cov),
                    })
                } else {
                    Err(CrtError::Usage(format!(
                        "unknown corruption kind {other}; expected identity, centered-square, \
                         gaussian-noise, horizontal-lines[-<coverage>], or water-drops"
                    )))
                }
            }
        }
    }

    /// Effective parameters after applying the coverage suffix.
    pub fn effective_params(&self, base: &CorruptionParams) -> CorruptionParams {
        let mut p = base.clone();
        if let Some(cov) = self.line_coverage {
            p.line_coverage = cov;
        }
        p
    }

    pub fn resolve(&self, seed: u64, height: usize, width: usize, base: &CorruptionParams) -> Result<CorruptionSpec> {
        sample_spec(self.kind, seed, height, width, &self.effective_params(base))
    }
}

/// Derive a per-file corruption seed from a base seed and the file name,
/// so processing a directory is independent of iteration order.
pub fn file_seed(seed: u64, name: &str) -> u64 {
    crate::seeding::mix(&[0xf17e, seed, crate::seeding::fnv1a(name)])
}

/// Resolve all randomized placements for `kind` deterministically from
/// (seed, kind, dimensions).
pub fn sample_spec(
    kind: CorruptionKind,
    seed: u64,
    height: usize,
    width: usize,
    params: &CorruptionParams,
) -> Result<CorruptionSpec> {
    params.validate()?;
    if height == 0 || width == 0 {
        return Err(CrtError::Usage("image dimensions must be positive".into()));
    }
    let mut rng = keyed_rng(&[0xC0_44, kind.tag(), seed, height as u64, width as u64]);
    let min_side = height.min(width);
    let resolved = match kind {
        CorruptionKind::Identity => ResolvedCorruption::Identity,
        CorruptionKind::CenteredSquare => ResolvedCorruption::CenteredSquare {
            side_fraction: params.square_fraction,
            side_px: (params.square_fraction * min_side as f64).round() as usize,
        },
        CorruptionKind::GaussianNoise => {
            ResolvedCorruption::GaussianNoise { sigma: params.noise_sigma }
        }
        CorruptionKind::HorizontalLines => ResolvedCorruption::HorizontalLines {
            coverage: params.line_coverage,
            thickness: params.line_thickness,
            bands: sample_bands(&mut rng, height, params.line_coverage, params.line_thickness),
        },
        CorruptionKind::WaterDrops => {
            let n = rng.random_range(params.drop_count.0..=params.drop_count.1);
            let (rlo, rhi) = params.drop_radius_frac;
            let drops = (0..n)
                .map(|_| {
                    let cy = rng.random_range(0.0..height as f64);
                    let cx = rng.random_range(0.0..width as f64);
                    let radius = rng.random_range(rlo..=rhi) * min_side as f64;
                    Drop { cy, cx, radius }
                })
                .collect();
            ResolvedCorruption::WaterDrops { alpha: params.drop_alpha, drops }
        }
    };
    Ok(CorruptionSpec { seed, height, width, resolved })
}

/// Non-overlapping bands totalling exactly round(coverage * height) rows.
/// If that total is not a multiple of the thickness, the bottom-most band is
/// reduced rather than erroring. Placement distributes the free rows into
/// the gaps uniformly via a stars-and-bars draw.
fn sample_bands(
    rng: &mut rand_chacha::ChaCha8Rng,
    height: usize,
    coverage: f64,
    thickness: usize,
) -> Vec<Band> {
    let target = (coverage * height as f64).round() as usize;
    if target == 0 {
        return Vec::new();
    }
    let n_full = target / thickness;
    let rem = target % thickness;
    let mut heights = vec![thickness; n_full];
    if rem > 0 {
        heights.push(rem);
    }
    let k = heights.len();
    let free = height - target;
    // k sorted bar positions among free+k slots -> k+1 gap sizes.
    let slots = free + k;
    let mut bars = rand::seq::index::sample(rng, slots, k).into_vec();
    bars.sort_unstable();
    let mut bands = Vec::with_capacity(k);
    let mut row = 0usize;
    let mut prev: isize = -1;
    for (i, &bar) in bars.iter().enumerate() {
        let gap = (bar as isize - prev - 1) as usize;
        prev = bar as isize;
        row += gap;
        bands.push(Band { start: row, height: heights[i] });
        row += heights[i];
    }
    bands
}

/// Apply a resolved corruption. Pure in (image, spec): identical inputs give
/// bit-identical outputs.
pub fn corrupt(x: &Image, spec: &CorruptionSpec) -> Result<Image> {
    if x.height() != spec.height || x.width() != spec.width {
        return Err(CrtError::Data(format!(
            "spec resolved for {}x{} applied to {}x{} image",
            spec.height,
            spec.width,
            x.height(),
            x.width()
        )));
    }
    let (h, w) = (x.height(), x.width());
    match &spec.resolved {
        ResolvedCorruption::Identity => Ok(x.clone()),
        ResolvedCorruption::CenteredSquare { side_px, .. } => {
            let mut out = x.clone();
            let side = *side_px;
            let (r0, c0) = ((h - side) / 2, (w - side) / 2);
            let px = out.pixels_mut();
            for r in r0..r0 + side {
                let base = (r * w + c0) * 3;
                px[base..base + side * 3].fill(0.0);
            }
            Ok(out)
        }
        ResolvedCorruption::GaussianNoise { sigma } => {
            if *sigma == 0.0 {
                return Ok(x.clone());
            }
            let mut out = x.clone();
            let normal = Normal::new(0.0f64, *sigma)
                .map_err(|e| CrtError::Usage(format!("bad noise sigma {sigma}: {e}")))?;
            let mut rng = keyed_rng(&[0x9015e, spec.seed, h as u64, w as u64]);
            for v in out.pixels_mut().iter_mut() {
                let n = normal.sample(&mut rng);
                *v = ((*v as f64 + n).clamp(0.0, 1.0)) as f32;
            }
            Ok(out)
        }
        ResolvedCorruption::HorizontalLines { bands, .. } => {
            let mut out = x.clone();
            let px = out.pixels_mut();
            for band in bands {
                for r in band.start..band.start + band.height {
                    px[r * w * 3..(r + 1) * w * 3].fill(0.0);
                }
            }
            Ok(out)
        }
        ResolvedCorruption::WaterDrops { alpha, drops } => {
            let mut out = x.clone();
            let a = *alpha as f32;
            for drop in drops {
                let blurred = gaussian_blur(&out, drop.radius / 3.0)?;
                let px = out.pixels_mut();
                let bl = blurred.pixels();
                let r2 = drop.radius * drop.radius;
                let y0 = (drop.cy - drop.radius).max(0.0) as usize;
                let y1 = (((drop.cy + drop.radius).ceil() as usize) + 1).min(h);
                let x0 = (drop.cx - drop.radius).max(0.0) as usize;
                let x1 = (((drop.cx + drop.radius).ceil() as usize) + 1).min(w);
                for r in y0..y1 {
                    for c in x0..x1 {
                        let dy = r as f64 - drop.cy;
                        let dx = c as f64 - drop.cx;
                        if dy * dy + dx * dx <= r2 {
                            let base = (r * w + c) * 3;
                            for ch in 0..3 {
                                px[base + ch] =
                                    (a * bl[base + ch] + (1.0 - a) * px[base + ch]).clamp(0.0, 1.0);
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Fraction of pixels the corruption modifies: exact arithmetic for the
/// masking kinds, direct comparison against `corrupt` for the rest.
pub fn corrupted_fraction(spec: &CorruptionSpec, x: &Image) -> Result<f64> {
    match &spec.resolved {
        ResolvedCorruption::Identity => Ok(0.0),
        ResolvedCorruption::CenteredSquare { side_px, .. } => {
            Ok((side_px * side_px) as f64 / (spec.height * spec.width) as f64)
        }
        ResolvedCorruption::HorizontalLines { bands, .. } => {
            let rows: usize = bands.iter().map(|b| b.height).sum();
            Ok(rows as f64 / spec.height as f64)
        }
        _ => {
            let corrupted = corrupt(x, spec)?;
            let changed = x
                .pixels()
                .chunks_exact(3)
                .zip(corrupted.pixels().chunks_exact(3))
                .filter(|(a, b)| a != b)
                .count();
            Ok(changed as f64 / (spec.height * spec.width) as f64)
        }
    }
}
