//! Procedural demo frames: deterministic table-top-like scenes used by the
//! tests, the acceptance suite, and anyone without a frame corpus at hand.

use std::path::Path;

use crate::error::Result;
use crate::imaging::{save_image, Image};
use crate::seeding::unit_hash;

/// Render one frame of a synthetic "trajectory": a smooth two-tone
/// background with a few solid shapes that drift with the frame index.
/// Fully determined by (dimensions, trajectory id, frame index).
pub fn render_frame(height: usize, width: usize, traj: usize, frame: usize) -> Image {
    let t = traj as u64;
    let key = |tag: u64, i: u64| unit_hash(&[0x5ce, t, tag, i]) as f32;

    // Per-trajectory palette.
    let top = [key(1, 0) * 0.5 + 0.2, key(1, 1) * 0.5 + 0.2, key(1, 2) * 0.5 + 0.2];
    let bottom = [key(2, 0) * 0.5 + 0.3, key(2, 1) * 0.5 + 0.3, key(2, 2) * 0.5 + 0.3];

    let mut data = vec![0.0f32; height * width * 3];
    for y in 0..height {
        let fy = y as f32 / height as f32;
        for x in 0..width {
            let fx = x as f32 / width as f32;
            let shade = 0.9 + 0.1 * fx;
            for c in 0..3 {
                data[(y * width + x) * 3 + c] =
                    ((top[c] * (1.0 - fy) + bottom[c] * fy) * shade).clamp(0.0, 1.0);
            }
        }
    }

    // A static "table" band.
    let band_top = height * 2 / 3;
    for y in band_top..height {
        for x in 0..width {
            for c in 0..3 {
                let v = [0.45, 0.32, 0.22][c] * (0.8 + 0.2 * key(3, c as u64));
                data[(y * width + x) * 3 + c] = v;
            }
        }
    }

    // Drifting circles, one slow rectangle.
    for s in 0..3u64 {
        let r = (key(10 + s, 0) * 0.08 + 0.05) * height.min(width) as f32;
        let speed = 0.4 + key(10 + s, 1) * 1.2;
        let cx = ((key(10 + s, 2) * width as f32) + speed * frame as f32) % width as f32;
        let cy = key(10 + s, 3) * (height as f32 - 2.0 * r) + r;
        let col = [key(10 + s, 4), key(10 + s, 5), key(10 + s, 6)];
        paint_circle(&mut data, height, width, cy, cx, r, col);
    }
    let rw = (0.12 + 0.1 * key(20, 0)) * width as f32;
    let rh = (0.08 + 0.08 * key(20, 1)) * height as f32;
    let rx = (key(20, 2) * width as f32 + 0.2 * frame as f32) % (width as f32 - rw);
    let ry = band_top as f32 - rh;
    let col = [0.2 + 0.6 * key(20, 3), 0.2 + 0.6 * key(20, 4), 0.2 + 0.6 * key(20, 5)];
    for y in ry as usize..(ry + rh) as usize {
        for x in rx as usize..(rx + rw) as usize {
            for c in 0..3 {
                data[(y * width + x) * 3 + c] = col[c];
            }
        }
    }

    // Static fine-grained surface texture (2x2 cells), the kind of local
    // structure that sensor blur and noise actually destroy.
    for y in 0..height {
        for x in 0..width {
            let grain =
                (unit_hash(&[0x97a1u64, t, (y / 2) as u64, (x / 2) as u64]) as f32 - 0.5) * 0.22;
            for c in 0..3 {
                let v = &mut data[(y * width + x) * 3 + c];
                *v = (*v + grain).clamp(0.0, 1.0);
            }
        }
    }

    Image::new(height, width, data).expect("synthetic values stay in range")
}

fn paint_circle(
    data: &mut [f32],
    height: usize,
    width: usize,
    cy: f32,
    cx: f32,
    r: f32,
    col: [f32; 3],
) {
    let y0 = (cy - r).max(0.0) as usize;
    let y1 = ((cy + r) as usize + 1).min(height);
    let x0 = (cx - r).max(0.0) as usize;
    let x1 = ((cx + r) as usize + 1).min(width);
    for y in y0..y1 {
        for x in x0..x1 {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            if dy * dy + dx * dx <= r * r {
                for c in 0..3 {
                    data[(y * width + x) * 3 + c] = col[c].clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Per-pixel pseudo-random image, used as an unstructured metric fixture.
pub fn noisy_frame(height: usize, width: usize, seed: u64) -> Image {
    let mut data = vec![0.0f32; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[(y * width + x) * 3 + c] =
                    unit_hash(&[seed, y as u64, x as u64, c as u64]) as f32;
            }
        }
    }
    Image::new(height, width, data).expect("hash values stay in range")
}

/// Write `trajs` subdirectories of `frames` PNG frames each under `root`,
/// mirroring the expected clean-frame input layout.
pub fn write_trajectory_tree(
    root: &Path,
    trajs: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<()> {
    for t in 0..trajs {
        let dir = root.join(format!("traj{t:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| crate::CrtError::io(&dir, e))?;
        for f in 0..frames {
            let img = render_frame(height, width, t, f);
            save_image(&img, &dir.join(format!("frame{f:05}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_deterministic_and_distinct() {
        let a = render_frame(32, 32, 0, 0);
        let b = render_frame(32, 32, 0, 0);
        assert_eq!(a.pixels(), b.pixels());
        let c = render_frame(32, 32, 1, 0);
        assert_ne!(a.pixels(), c.pixels());
        let d = render_frame(32, 32, 0, 5);
        assert_ne!(a.pixels(), d.pixels());
    }
}
