//! Raster utilities: resizing, patch extraction and augmentations.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::autograd::Mat;
use crate::data::ImageGrid;

/// Luma on a 0–255 scale (ITU-R BT.601 weights).
pub fn gray255(img: &ImageGrid) -> Array2<f32> {
    let p = img.pixels();
    let (c, h, w) = p.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 1 {
            p[[0, y, x]] * 255.0
        } else {
            (0.299 * p[[0, y, x]] + 0.587 * p[[1, y, x]] + 0.114 * p[[2, y, x]]) * 255.0
        }
    })
}

/// Luma in `[0, 1]`.
pub fn gray01(img: &ImageGrid) -> Array2<f32> {
    gray255(img).mapv(|v| v / 255.0)
}

/// Single-channel grid into an image.
pub fn from_gray01(gray: &Array2<f32>) -> ImageGrid {
    let (h, w) = gray.dim();
    ImageGrid::from_fn(1, h, w, |(_, y, x)| gray[[y, x]].clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Resizes with half-pixel-centre alignment.
pub fn resize(img: &ImageGrid, out_h: usize, out_w: usize, interp: Interp) -> ImageGrid {
    let p = img.pixels();
    let (c, h, w) = p.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let out = Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let fx = (x as f64 + 0.5) * sx - 0.5;
        let v = match interp {
            Interp::Nearest => {
                let yy = ((y as f64 + 0.5) * sy).floor().min(h as f64 - 1.0) as usize;
                let xx = ((x as f64 + 0.5) * sx).floor().min(w as f64 - 1.0) as usize;
                p[[ch, yy, xx]] as f64
            }
            Interp::Bilinear => sample_bilinear_clamped(p, ch, fy, fx),
            Interp::Bicubic => sample_bicubic_clamped(p, ch, fy, fx),
        };
        v.clamp(0.0, 1.0) as f32
    });
    ImageGrid::new(out, img.source_path.clone()).expect("resize keeps a valid image")
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn sample_bilinear_clamped(p: &Array3<f32>, ch: usize, fy: f64, fx: f64) -> f64 {
    let (_, h, w) = p.dim();
    let y0 = fy.floor();
    let x0 = fx.floor();
    let (ty, tx) = (fy - y0, fx - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |y: isize, x: isize| p[[ch, clamp_idx(y, h), clamp_idx(x, w)]] as f64;
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
    let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

fn cubic_weight(t: f64) -> f64 {
    let a = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

fn sample_bicubic_clamped(p: &Array3<f32>, ch: usize, fy: f64, fx: f64) -> f64 {
    let (_, h, w) = p.dim();
    let y0 = fy.floor() as isize;
    let x0 = fx.floor() as isize;
    let mut acc = 0.0;
    for dy in -1..=2isize {
        let wy = cubic_weight(fy - (y0 + dy) as f64);
        for dx in -1..=2isize {
            let wx = cubic_weight(fx - (x0 + dx) as f64);
            acc += wy * wx * p[[ch, clamp_idx(y0 + dy, h), clamp_idx(x0 + dx, w)]] as f64;
        }
    }
    acc
}

/// Splits an image into non-overlapping `patch × patch` tiles, one row per
/// tile in row-major tile order; features are ordered channel, row, column.
pub fn patchify(img: &ImageGrid, patch: usize) -> Mat {
    let p = img.pixels();
    let (c, h, w) = p.dim();
    assert!(h % patch == 0 && w % patch == 0, "image {h}x{w} not divisible by patch {patch}");
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut out = Mat::zeros((gh * gw, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[[row, k]] = p[[ch, gy * patch + dy, gx * patch + dx]] as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn hflip(img: &ImageGrid) -> ImageGrid {
    let p = img.pixels();
    let (c, h, w) = p.dim();
    ImageGrid::from_fn(c, h, w, |(ch, y, x)| p[[ch, y, w - 1 - x]])
}

pub fn hflip_mask(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| mask[[y, w - 1 - x]])
}

/// Rotates by `k` quarter turns counter-clockwise. Square images only.
pub fn rot90(img: &ImageGrid, k: usize) -> ImageGrid {
    let p = img.pixels();
    let (c, h, w) = p.dim();
    assert_eq!(h, w, "rot90 needs a square image");
    let n = h;
    ImageGrid::from_fn(c, n, n, |(ch, y, x)| {
        let (sy, sx) = rot_src(y, x, n, k);
        p[[ch, sy, sx]]
    })
}

pub fn rot90_mask(mask: &Array2<bool>, k: usize) -> Array2<bool> {
    let n = mask.nrows();
    Array2::from_shape_fn((n, n), |(y, x)| {
        let (sy, sx) = rot_src(y, x, n, k);
        mask[[sy, sx]]
    })
}

fn rot_src(y: usize, x: usize, n: usize, k: usize) -> (usize, usize) {
    match k % 4 {
        0 => (y, x),
        1 => (x, n - 1 - y),
        2 => (n - 1 - y, n - 1 - x),
        _ => (n - 1 - x, y),
    }
}

pub fn crop(img: &ImageGrid, top: usize, left: usize, h: usize, w: usize) -> ImageGrid {
    let p = img.pixels();
    ImageGrid::from_fn(img.channels(), h, w, |(ch, y, x)| p[[ch, top + y, left + x]])
}

/// Samples a crop covering `scale_min..=scale_max` of the area with aspect
/// ratio in `[3/4, 4/3]` (log-uniform) and resizes it to `out × out`.
pub fn random_resized_crop(
    img: &ImageGrid,
    out: usize,
    scale_min: f64,
    scale_max: f64,
    rng: &mut impl Rng,
) -> ImageGrid {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale_min..=scale_max);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return resize(&crop(img, top, left, ch, cw), out, out, Interp::Bilinear);
        }
    }
    let side = h.min(w);
    let c = crop(img, (h - side) / 2, (w - side) / 2, side, side);
    resize(&c, out, out, Interp::Bilinear)
}

/// Random brightness, contrast and saturation factors drawn from
/// `[1 − strength, 1 + strength]`.
pub fn color_jitter(img: &ImageGrid, strength: f64, rng: &mut impl Rng) -> ImageGrid {
    if strength <= 0.0 {
        return img.clone();
    }
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    let b = rng.random_range(lo..=hi) as f32;
    let c = rng.random_range(lo..=hi) as f32;
    let s = rng.random_range(lo..=hi) as f32;
    let mut out = img.pixels().mapv(|v| (v * b).clamp(0.0, 1.0));
    let (ch, h, w) = out.dim();
    let gray = |o: &Array3<f32>, y: usize, x: usize| {
        if ch == 1 {
            o[[0, y, x]]
        } else {
            0.299 * o[[0, y, x]] + 0.587 * o[[1, y, x]] + 0.114 * o[[2, y, x]]
        }
    };
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += gray(&out, y, x);
        }
    }
    mean /= (h * w) as f32;
    out.mapv_inplace(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
    if ch == 3 {
        for y in 0..h {
            for x in 0..w {
                let g = gray(&out, y, x);
                for k in 0..3 {
                    out[[k, y, x]] = ((out[[k, y, x]] - g) * s + g).clamp(0.0, 1.0);
                }
            }
        }
    }
    ImageGrid::new(out, img.source_path.clone()).expect("jitter keeps a valid image")
}

/// Random erasing: with probability `prob` a rectangle covering 2–33 % of
/// the image is filled with uniform noise.
pub fn random_erase(img: &ImageGrid, prob: f64, rng: &mut impl Rng) -> ImageGrid {
    if prob <= 0.0 || rng.random::<f64>() >= prob {
        return img.clone();
    }
    let (c, h, w) = img.pixels().dim();
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(0.02..0.33);
        let ratio = rng.random_range((0.3f64).ln()..(1.0f64 / 0.3).ln()).exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            let mut out = img.pixels().clone();
            for ch in 0..c {
                for y in top..top + eh {
                    for x in left..left + ew {
                        out[[ch, y, x]] = rng.random::<f32>();
                    }
                }
            }
            return ImageGrid::new(out, img.source_path.clone()).unwrap();
        }
    }
    img.clone()
}

/// Channel-wise `(v − mean) / std`, returned as raw values (may leave
/// `[0, 1]`).
pub fn normalize(img: &ImageGrid, mean: [f32; 3], std: [f32; 3]) -> Array3<f32> {
    let p = img.pixels();
    let mut out = p.clone();
    for ((ch, _, _), v) in out.indexed_iter_mut() {
        let k = ch.min(2);
        *v = (*v - mean[k]) / std[k];
    }
    out
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Median of each channel over the pixels where `select` is true.
pub fn channel_medians(img: &ImageGrid, select: impl Fn(usize, usize) -> bool) -> Vec<f32> {
    let p = img.pixels();
    let (c, h, w) = p.dim();
    (0..c)
        .map(|ch| {
            let mut vals: Vec<f32> = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if select(y, x) {
                        vals.push(p[[ch, y, x]]);
                    }
                }
            }
            if vals.is_empty() {
                return 0.0;
            }
            vals.sort_by(|a, b| a.total_cmp(b));
            let n = vals.len();
            if n % 2 == 1 {
                vals[n / 2]
            } else {
                0.5 * (vals[n / 2 - 1] + vals[n / 2])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> ImageGrid {
        ImageGrid::from_fn(3, 8, 8, |(c, y, x)| ((c + y * 8 + x) % 17) as f32 / 16.0)
    }

    #[test]
    fn patchify_layout() {
        let img = ramp();
        let p = patchify(&img, 4);
        assert_eq!(p.dim(), (4, 48));
        // Patch 1 is the top-right tile; its first feature is channel 0 at (0, 4).
        assert_eq!(p[[1, 0]], img.get(0, 0, 4) as f64);
        assert_eq!(p[[2, 16 + 5]], img.get(1, 5, 1) as f64);
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = ramp();
        for interp in [Interp::Nearest, Interp::Bilinear, Interp::Bicubic] {
            let r = resize(&img, 8, 8, interp);
            let d = (r.pixels() - img.pixels()).mapv(f32::abs).sum();
            assert!(d < 1e-5, "{interp:?}");
        }
    }

    #[test]
    fn rotations_compose() {
        let img = ramp();
        let r = rot90(&rot90(&rot90(&rot90(&img, 1), 1), 1), 1);
        assert_eq!(r, img);
        let m = Array2::from_shape_fn((5, 5), |(y, x)| x > y);
        assert_eq!(rot90_mask(&rot90_mask(&m, 3), 1), m);
    }

    #[test]
    fn jitter_and_crop_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let j = color_jitter(&ramp(), 0.4, &mut rng);
            assert!(j.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            let c = random_resized_crop(&ramp(), 6, 0.4, 1.0, &mut rng);
            assert_eq!((c.height(), c.width()), (6, 6));
        }
    }
}
