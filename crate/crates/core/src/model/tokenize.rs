//! Patch tokenization, outside the autodiff graph: only constants flow
//! through these (inputs never require gradients), so tokens enter the
//! graph as leaves.

use crate::Scalar;

/// Shifted patch tokens: concatenate the image with four half-patch
/// diagonally shifted, zero-padded copies (channel-wise, 15 planes), then
/// flatten each PxP patch to a row. Output is `[ (h/p)*(w/p), 5*3*p*p ]`
/// row-major, flattened plane-major then row then column within the patch.
pub fn spt_raw_tokens<T: Scalar>(planar: &[T], h: usize, w: usize, p: usize) -> Vec<T> {
    assert_eq!(planar.len(), 3 * h * w, "planar buffer does not match dimensions");
    assert!(h % p == 0 && w % p == 0, "dimensions {h}x{w} not divisible by patch {p}");
    let s = (p / 2) as isize;
    // (dy, dx) sampling offsets: up-left, up-right, down-right, down-left.
    let shifts: [(isize, isize); 4] = [(-s, -s), (-s, s), (s, s), (s, -s)];
    let (gh, gw) = (h / p, w / p);
    let planes = 15usize;
    let raw = planes * p * p;
    let mut out = vec![T::zero(); gh * gw * raw];
    let sample = |plane: usize, y: isize, x: isize| -> T {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            T::zero()
        } else {
            planar[plane * h * w + y as usize * w + x as usize]
        }
    };
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            let base = token * raw;
            for plane in 0..planes {
                let (c, shift) = (plane % 3, plane / 3);
                for py in 0..p {
                    for px in 0..p {
                        let y = (gy * p + py) as isize;
                        let x = (gx * p + px) as isize;
                        let v = if shift == 0 {
                            sample(c, y, x)
                        } else {
                            let (dy, dx) = shifts[shift - 1];
                            sample(c, y + dy, x + dx)
                        };
                        out[base + plane * p * p + py * p + px] = v;
                    }
                }
            }
        }
    }
    out
}

/// Plain (non-shifted) patch tokens `[ (h/p)*(w/p), 3*p*p ]`, used by the
/// discriminator embedding and as the fold inverse.
pub fn patch_tokens<T: Scalar>(planar: &[T], h: usize, w: usize, p: usize) -> Vec<T> {
    assert_eq!(planar.len(), 3 * h * w, "planar buffer does not match dimensions");
    assert!(h % p == 0 && w % p == 0, "dimensions {h}x{w} not divisible by patch {p}");
    let (gh, gw) = (h / p, w / p);
    let raw = 3 * p * p;
    let mut out = vec![T::zero(); gh * gw * raw];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * raw;
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        out[base + c * p * p + py * p + px] =
                            planar[c * h * w + (gy * p + py) * w + (gx * p + px)];
                    }
                }
            }
        }
    }
    out
}

/// Fold `[grid*grid, 3*p*p]` tokens back into a planar `[3, H, W]` image.
/// Inverse of [`patch_tokens`] for square images.
pub fn fold_tokens<T: Scalar>(tokens: &[T], grid: usize, p: usize) -> Vec<T> {
    let side = grid * p;
    let raw = 3 * p * p;
    assert_eq!(tokens.len(), grid * grid * raw, "token buffer does not match grid");
    let mut out = vec![T::zero(); 3 * side * side];
    for gy in 0..grid {
        for gx in 0..grid {
            let base = (gy * grid + gx) * raw;
            for c in 0..3 {
                for py in 0..p {
                    for px in 0..p {
                        out[c * side * side + (gy * p + py) * side + (gx * p + px)] =
                            tokens[base + c * p * p + py * p + px];
                    }
                }
            }
        }
    }
    out
}
