//! Image container, PNG I/O, and the reference quality metrics.
//!
//! Pixels are row-major interleaved RGB floats in [0, 1]. Metrics are
//! computed in f64 regardless of the training precision.

use std::path::Path;

use crate::error::{CrtError, Result};
use crate::Scalar;

/// Minimum side length: one 11x11 metric window plus patching headroom.
pub const MIN_SIDE: usize = 16;

/// PSNR sentinel returned when the mean squared error is zero.
pub const PSNR_CAP: f64 = 99.0;

/// An H×W RGB image with channel-interleaved float pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Validates dimensions, length, finiteness, and range.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(CrtError::Data(format!(
                "image dimensions {height}x{width} below minimum {MIN_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(CrtError::Data(format!(
                "pixel buffer length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(CrtError::Data(format!(
                "pixel {i} out of range [0,1]: {}",
                data[i]
            )));
        }
        Ok(Image { height, width, data })
    }

    /// Constant-colored image.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    /// Channel-planar copy `[3, H, W]` in the requested precision.
    pub fn to_planar<T: Scalar>(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = T::from_f64(self.data[i * 3 + c] as f64);
            }
        }
        out
    }

    /// Rebuild an image from planar `[3, H, W]` data, clamping rounding
    /// excursions back into [0, 1].
    pub fn from_planar_clamped<T: Scalar>(height: usize, width: usize, planar: &[T]) -> Result<Self> {
        if planar.len() != 3 * height * width {
            return Err(CrtError::Data(format!(
                "planar buffer length {} does not match 3x{height}x{width}",
                planar.len()
            )));
        }
        let hw = height * width;
        let mut data = vec![0.0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                let v = planar[c * hw + i].to_f64();
                if !v.is_finite() {
                    return Err(CrtError::Numerical(format!(
                        "non-finite pixel at plane {c} index {i}"
                    )));
                }
                data[i * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
        Image::new(height, width, data)
    }
}

/// Load an 8-bit RGB raster; values map to [0, 1] by division by 255.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| CrtError::Data(format!("cannot read image {}: {e}", path.display())))?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(CrtError::Data(format!(
            "non-RGB image {}: color type {:?}, expected 8-bit RGB",
            path.display(),
            img.color()
        )));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(CrtError::Data(format!(
            "image {} is {h}x{w}, below minimum {MIN_SIDE}",
            path.display()
        )));
    }
    let data: Vec<f32> = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Image::new(h, w, data)
}

/// Save as 8-bit RGB PNG, rounding half-up to [0, 255].
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length checked by Image invariants");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CrtError::Data(format!("cannot write image {}: {e}", path.display())))
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at 99.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Gaussian window and stabilizer constants for SSIM.
#[derive(Clone, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    /// The canonical 11x11 / sigma 1.5 window with C1=(0.01)^2, C2=(0.03)^2.
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, c1: 0.01f64.powi(2), c2: 0.03f64.powi(2) }
    }
}

impl SsimParams {
    pub fn new(window: usize, sigma: f64) -> Result<Self> {
        if window < 3 || window % 2 == 0 {
            return Err(CrtError::Usage(format!("SSIM window must be odd and >= 3, got {window}")));
        }
        if sigma <= 0.0 {
            return Err(CrtError::Usage(format!("SSIM sigma must be > 0, got {sigma}")));
        }
        Ok(SsimParams { window, sigma, ..SsimParams::default() })
    }

    /// Normalized 1D window weights (positive, summing to 1).
    pub fn weights_1d(&self) -> Vec<f64> {
        gaussian_weights(self.window, self.sigma)
    }

    /// Normalized 2D window as the outer product of the 1D weights.
    pub fn weights_2d(&self) -> Vec<f64> {
        let w = self.weights_1d();
        let mut out = Vec::with_capacity(w.len() * w.len());
        for &a in &w {
            for &b in &w {
                out.push(a * b);
            }
        }
        out
    }
}

fn gaussian_weights(side: usize, sigma: f64) -> Vec<f64> {
    let mid = (side / 2) as isize;
    let mut w: Vec<f64> = (0..side)
        .map(|i| {
            let x = (i as isize - mid) as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all valid window positions and channels,
/// computed with separable Gaussian filtering in f64.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.height < p.window || a.width < p.window {
        return Err(CrtError::Data(format!(
            "image {}x{} smaller than SSIM window {}",
            a.height, a.width, p.window
        )));
    }
    let w1 = p.weights_1d();
    let (h, w) = (a.height, a.width);
    let (oh, ow) = (h - p.window + 1, w - p.window + 1);
    let mut total = 0.0f64;
    for c in 0..3 {
        let pa = channel_plane(a, c);
        let pb = channel_plane(b, c);
        let mu_a = filter_valid(&pa, h, w, &w1);
        let mu_b = filter_valid(&pb, h, w, &w1);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();
        let e_aa = filter_valid(&aa, h, w, &w1);
        let e_bb = filter_valid(&bb, h, w, &w1);
        let e_ab = filter_valid(&ab, h, w, &w1);
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2);
            let den = (ma * ma + mb * mb + p.c1) * (va + vb + p.c2);
            total += num / den;
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
}

/// Separable valid-mode correlation with a symmetric 1D window.
fn filter_valid(plane: &[f64], h: usize, w: usize, weights: &[f64]) -> Vec<f64> {
    let k = weights.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (u, &wu) in weights.iter().enumerate() {
                acc += wu * plane[y * w + x + u];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (v, &wv) in weights.iter().enumerate() {
                acc += wv * tmp[(y + v) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with kernel radius ceil(3*sigma) and
/// clamp-to-edge handling.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma <= 0.0 {
        return Err(CrtError::Usage(format!("blur sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let weights = gaussian_weights(2 * radius + 1, sigma);
    let (h, w) = (img.height, img.width);
    let mut horiz = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (u, &wu) in weights.iter().enumerate() {
                    let sx = (x + u).saturating_sub(radius).min(w - 1);
                    acc += wu * img.data[(y * w + sx) * 3 + c] as f64;
                }
                horiz[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut data = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (v, &wv) in weights.iter().enumerate() {
                    let sy = (y + v).saturating_sub(radius).min(h - 1);
                    acc += wv * horiz[(sy * w + x) * 3 + c];
                }
                data[(y * w + x) * 3 + c] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(h, w, data)
}

fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(CrtError::Data(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use tempfile::tempdir;

    /// Brute-force SSIM oracle: direct 2D window sums at every valid
    /// position, no separability shortcut. Kept independent of `ssim`.
    fn ssim_brute_force(a: &Image, b: &Image, p: &SsimParams) -> f64 {
        let w2 = p.weights_2d();
        let k = p.window;
        let (h, w) = (a.height(), a.width());
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut total = 0.0;
        for c in 0..3 {
            for y in 0..oh {
                for x in 0..ow {
                    let mut ma = 0.0;
                    let mut mb = 0.0;
                    let mut eaa = 0.0;
                    let mut ebb = 0.0;
                    let mut eab = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let wt = w2[u * k + v];
                            let pa = a.get(y + u, x + v, c) as f64;
                            let pb = b.get(y + u, x + v, c) as f64;
                            ma += wt * pa;
                            mb += wt * pb;
                            eaa += wt * pa * pa;
                            ebb += wt * pb * pb;
                            eab += wt * pa * pb;
                        }
                    }
                    let va = eaa - ma * ma;
                    let vb = ebb - mb * mb;
                    let cov = eab - ma * mb;
                    total += ((2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2))
                        / ((ma * ma + mb * mb + p.c1) * (va + vb + p.c2));
                }
            }
        }
        total / (3 * oh * ow) as f64
    }

    #[test]
    fn save_load_round_trip_quantization_bound() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = Image::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (&a, &b) in img.pixels().iter().zip(back.pixels().iter()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn load_reports_dimensions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.png");
        let img = synth::render_frame(360, 360, 3, 0);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.height(), back.width()), (360, 360));
    }

    #[test]
    fn load_rejects_non_rgb() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = image::GrayImage::from_pixel(32, 32, image::Luma([100u8]));
        gray.save(&path).unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("non-RGB"), "{err}");
    }

    #[test]
    fn load_rejects_tiny_images() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.png");
        let rgb = image::RgbImage::from_pixel(8, 8, image::Rgb([1u8, 2, 3]));
        rgb.save(&path).unwrap();
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let img = synth::render_frame(32, 32, 0, 0);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_closed_form_offsets() {
        // Uniform +0.1 -> -10*log10(0.01) = 20 dB; +0.01 -> 40 dB.
        let a = Image::filled(32, 32, [0.3, 0.3, 0.3]).unwrap();
        let b = Image::filled(32, 32, [0.4, 0.4, 0.4]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        let c = Image::filled(32, 32, [0.31, 0.31, 0.31]).unwrap();
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-3);
    }

    #[test]
    fn psnr_monotone_in_perturbation() {
        let a = Image::filled(32, 32, [0.5, 0.5, 0.5]).unwrap();
        let mut last = f64::INFINITY;
        for mag in [0.02, 0.05, 0.1, 0.2, 0.4] {
            let b = Image::filled(32, 32, [0.5 + mag, 0.5, 0.5]).unwrap();
            let v = psnr(&a, &b).unwrap();
            assert!(v < last, "psnr not strictly decreasing at {mag}");
            last = v;
        }
    }

    #[test]
    fn psnr_rejects_dim_mismatch() {
        let a = Image::filled(32, 32, [0.5; 3]).unwrap();
        let b = Image::filled(32, 48, [0.5; 3]).unwrap();
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let img = synth::render_frame(32, 32, 1, 4);
        let v = ssim(&img, &img, &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_black_vs_white_closed_form() {
        // mu_a=0, mu_b=1, zero variances: C1/(1+C1).
        let a = Image::filled(24, 24, [0.0; 3]).unwrap();
        let b = Image::filled(24, 24, [1.0; 3]).unwrap();
        let p = SsimParams::default();
        let expect = p.c1 / (1.0 + p.c1);
        assert!((ssim(&a, &b, &p).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_brute_force_oracle() {
        let p = SsimParams::default();
        for seed in 0..20u64 {
            let a = synth::render_frame(32, 32, seed as usize, 0);
            let b = synth::noisy_frame(32, 32, seed);
            let fast = ssim(&a, &b, &p).unwrap();
            let slow = ssim_brute_force(&a, &b, &p);
            assert!((fast - slow).abs() < 1e-6, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_symmetric() {
        let a = synth::render_frame(32, 32, 2, 7);
        let b = synth::noisy_frame(32, 32, 9);
        let p = SsimParams::default();
        let d = (ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs();
        assert!(d < 1e-9);
    }

    #[test]
    fn ssim_below_one_unless_equal() {
        let a = synth::render_frame(32, 32, 3, 1);
        let b = synth::noisy_frame(32, 32, 5);
        let p = SsimParams::default();
        assert!(ssim(&a, &b, &p).unwrap() < 1.0 - 1e-6);
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = Image::filled(32, 32, [0.25, 0.5, 0.75]).unwrap();
        let out = gaussian_blur(&img, 2.0).unwrap();
        for (&a, &b) in img.pixels().iter().zip(out.pixels().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_single_pixel_center_equals_kernel_weight() {
        let mut img = Image::filled(33, 33, [0.0; 3]).unwrap();
        let w = img.width();
        {
            let px = img.pixels_mut();
            for c in 0..3 {
                px[(16 * w + 16) * 3 + c] = 1.0;
            }
        }
        let sigma = 1.0;
        let out = gaussian_blur(&img, sigma).unwrap();
        // Expected center weight from the kernel definition itself.
        let radius = (3.0 * sigma).ceil() as usize;
        let k = gaussian_weights(2 * radius + 1, sigma);
        let expect = (k[radius] * k[radius]) as f32;
        assert!((out.get(16, 16, 0) - expect).abs() < 1e-6);
    }

    #[test]
    fn blur_preserves_interior_mass() {
        // Content away from edges: global mean is conserved by normalization.
        let mut img = Image::filled(64, 64, [0.0; 3]).unwrap();
        let w = img.width();
        {
            let px = img.pixels_mut();
            for y in 24..40 {
                for x in 24..40 {
                    for c in 0..3 {
                        px[(y * w + x) * 3 + c] = 0.8;
                    }
                }
            }
        }
        let out = gaussian_blur(&img, 1.5).unwrap();
        let mean_in: f64 =
            img.pixels().iter().map(|&v| v as f64).sum::<f64>() / img.pixels().len() as f64;
        let mean_out: f64 =
            out.pixels().iter().map(|&v| v as f64).sum::<f64>() / out.pixels().len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-3);
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        let img = Image::filled(16, 16, [0.5; 3]).unwrap();
        assert!(gaussian_blur(&img, 0.0).is_err());
    }
}
