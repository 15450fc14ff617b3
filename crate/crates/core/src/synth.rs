//! Synthetic fixtures: dermoscopy-like rasters, segmentation disks, hair
//! overlays, change pairs, feature bags and survival cohorts.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use crate::autograd::Mat;
use crate::data::ImageGrid;

/// Smooth low-frequency field in roughly `[-1, 1]`: a sum of random
/// sinusoids.
fn smooth_field(h: usize, w: usize, waves: usize, max_freq: f64, rng: &mut impl Rng) -> Array2<f32> {
    let params: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            (
                rng.random_range(-max_freq..max_freq),
                rng.random_range(-max_freq..max_freq),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let norm: f64 = params.iter().map(|p| p.3).sum::<f64>().max(1e-9);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
        let s: f64 = params
            .iter()
            .map(|(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin())
            .sum();
        (s / norm) as f32
    })
}

/// Skin-toned background colour.
pub fn skin_tone(rng: &mut impl Rng) -> [f32; 3] {
    let base = rng.random_range(0.65f32..0.85);
    [base + 0.08, base - 0.05, base - 0.15]
}

/// A dermoscopy-like image: textured skin with one darker elliptical lesion.
pub fn lesion_image(side: usize, rng: &mut impl Rng) -> ImageGrid {
    let skin = skin_tone(rng);
    let tex = smooth_field(side, side, 6, 6.0, rng);
    let lesion_tex = smooth_field(side, side, 8, 12.0, rng);
    let s = side as f64;
    let cy = rng.random_range(0.3..0.7) * s;
    let cx = rng.random_range(0.3..0.7) * s;
    let ry = rng.random_range(0.12..0.3) * s;
    let rx = rng.random_range(0.12..0.3) * s;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let dark = rng.random_range(0.25f32..0.55);
    let hue = [rng.random_range(0.35f32..0.55), rng.random_range(0.2f32..0.35), rng.random_range(0.1f32..0.25)];
    let (ct, st) = (theta.cos(), theta.sin());
    ImageGrid::from_fn(3, side, side, |(c, y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let (u, v) = (ct * dx + st * dy, -st * dx + ct * dy);
        let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
        let inside = (1.0 / (1.0 + ((r - 1.0) * 8.0).exp())) as f32;
        let bg = skin[c] + 0.05 * tex[[y, x]];
        let fg = hue[c] * (1.0 - dark) + 0.12 * lesion_tex[[y, x]];
        (bg * (1.0 - inside) + fg * inside).clamp(0.0, 1.0)
    })
}

/// `n` independent [`lesion_image`]s from one seed.
pub fn lesion_images(n: usize, side: usize, seed: u64) -> Vec<ImageGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| lesion_image(side, &mut rng)).collect()
}

/// Two visually distinct synthetic classes: class 1 lesions are dark and
/// small, class 0 lesions pale and large.
pub fn two_class_image(side: usize, class: usize, rng: &mut impl Rng) -> ImageGrid {
    let skin = skin_tone(rng);
    let tex = smooth_field(side, side, 6, 6.0, rng);
    let s = side as f64;
    let (cy, cx) = (rng.random_range(0.4..0.6) * s, rng.random_range(0.4..0.6) * s);
    let (r, fg) = if class == 1 {
        (rng.random_range(0.12..0.2) * s, [0.25f32, 0.12, 0.08])
    } else {
        (rng.random_range(0.28..0.38) * s, [0.7f32, 0.45, 0.35])
    };
    ImageGrid::from_fn(3, side, side, |(c, y, x)| {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        let inside = (1.0 / (1.0 + ((d - r) * 0.8).exp())) as f32;
        (skin[c] * (1.0 - inside) + fg[c] * inside + 0.04 * tex[[y, x]]).clamp(0.0, 1.0)
    })
}

/// A noisy image containing one disk of random radius; returns the image and
/// the disk's ground-truth mask.
pub fn disk_on_noise(side: usize, rng: &mut impl Rng) -> (ImageGrid, Array2<bool>) {
    let s = side as f64;
    let r = rng.random_range(0.15..0.3) * s;
    let cy = rng.random_range(r..s - r);
    let cx = rng.random_range(r..s - r);
    let mask = Array2::from_shape_fn((side, side), |(y, x)| {
        (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r
    });
    let skin = skin_tone(rng);
    let lesion = [rng.random_range(0.2f32..0.4), rng.random_range(0.1f32..0.25), rng.random_range(0.05f32..0.2)];
    let noise = Normal::new(0.0f32, 0.06).unwrap();
    let img = ImageGrid::from_fn(3, side, side, |(c, y, x)| {
        let base = if mask[[y, x]] { lesion[c] } else { skin[c] };
        (base + noise.sample(rng)).clamp(0.0, 1.0)
    });
    (img, mask)
}

/// Uniform skin-tone image of the given size.
pub fn flat_skin(h: usize, w: usize, tone: [f32; 3]) -> ImageGrid {
    ImageGrid::from_fn(3, h, w, |(c, _, _)| tone[c])
}

/// Draws `count` dark smooth curves of the given thickness over `base`.
/// Returns the image and the exact mask of painted pixels.
pub fn draw_hairs(
    base: &ImageGrid,
    count: usize,
    thickness: f64,
    darkness: f32,
    rng: &mut impl Rng,
) -> (ImageGrid, Array2<bool>) {
    let (h, w) = (base.height(), base.width());
    let mut mask = Array2::from_elem((h, w), false);
    for _ in 0..count {
        // Quadratic Bezier across the frame.
        let p0 = (rng.random_range(0.0..h as f64), 0.0);
        let p2 = (rng.random_range(0.0..h as f64), w as f64 - 1.0);
        let p1 = (rng.random_range(0.0..h as f64), rng.random_range(0.2..0.8) * w as f64);
        let steps = 4 * (h + w);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let a = (1.0 - t) * (1.0 - t);
            let b = 2.0 * (1.0 - t) * t;
            let c = t * t;
            let py = a * p0.0 + b * p1.0 + c * p2.0;
            let px = a * p0.1 + b * p1.1 + c * p2.1;
            let half = thickness / 2.0;
            let (y0, y1) = ((py - half).floor() as i64, (py + half).ceil() as i64);
            let (x0, x1) = ((px - half).floor() as i64, (px + half).ceil() as i64);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let (cy, cx) = (yy as f64 + 0.5, xx as f64 + 0.5);
                    if (cy - py).abs() <= half && (cx - px).abs() <= half {
                        mask[[yy as usize, xx as usize]] = true;
                    }
                }
            }
        }
    }
    let p = base.pixels();
    let img = ImageGrid::from_fn(base.channels(), h, w, |(c, y, x)| {
        if mask[[y, x]] {
            (p[[c, y, x]] - darkness).max(0.0)
        } else {
            p[[c, y, x]]
        }
    });
    (img, mask)
}

/// Richly textured skin with scattered pigment blobs: a scene with many
/// corner-like structures for keypoint registration.
pub fn registration_scene(side: usize, rng: &mut impl Rng) -> ImageGrid {
    let skin = skin_tone(rng);
    let low = smooth_field(side, side, 8, 4.0, rng);
    let blobs: Vec<(f64, f64, f64, f32)> = (0..(side * side / 500).max(12))
        .map(|_| {
            (
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
                rng.random_range(2.0..7.0),
                rng.random_range(0.15f32..0.5),
            )
        })
        .collect();
    let lesion = lesion_image(side, rng);
    let lp = lesion.pixels();
    ImageGrid::from_fn(3, side, side, |(c, y, x)| {
        let mut v = 0.5 * lp[[c, y, x]] + 0.5 * skin[c] + 0.08 * low[[y, x]];
        for &(by, bx, r, d) in &blobs {
            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
            v -= d * (-d2 / (2.0 * r * r)).exp() as f32;
        }
        v.clamp(0.0, 1.0)
    })
}

/// Copy of `img` with a filled dark disk painted at `(cy, cx)`.
pub fn paint_disk(img: &ImageGrid, cy: f64, cx: f64, radius: f64, color: [f32; 3]) -> ImageGrid {
    let p = img.pixels();
    ImageGrid::from_fn(img.channels(), img.height(), img.width(), |(c, y, x)| {
        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
        if d2 <= radius * radius {
            color[c.min(2)]
        } else {
            p[[c, y, x]]
        }
    })
}

/// A before/after pair. Changed pairs gain a 12-pixel-diameter dark disk;
/// both frames carry independent acquisition noise.
pub fn change_pair(side: usize, changed: bool, rng: &mut impl Rng) -> (ImageGrid, ImageGrid) {
    let base = lesion_image(side, rng);
    let noise = Normal::new(0.0f32, 0.01).unwrap();
    let jitter = |img: &ImageGrid, rng: &mut dyn rand::RngCore| {
        let p = img.pixels();
        ImageGrid::from_fn(3, side, side, |(c, y, x)| (p[[c, y, x]] + noise.sample(rng)).clamp(0.0, 1.0))
    };
    let t0 = jitter(&base, rng);
    let t1_base = if changed {
        let r = 6.0;
        let cy = rng.random_range(r..side as f64 - r);
        let cx = rng.random_range(r..side as f64 - r);
        paint_disk(&base, cy, cx, r, [0.12, 0.06, 0.04])
    } else {
        base
    };
    let t1 = jitter(&t1_base, rng);
    (t0, t1)
}

/// One synthetic bag for multiple instance learning.
#[derive(Clone, Debug)]
pub struct SyntheticBag {
    pub features: Mat,
    pub label: usize,
    pub case_id: String,
}

/// Bags of Gaussian instances around `clusters` centres; a bag is positive
/// iff it holds at least one instance from cluster 0 (the marked cluster).
/// Consecutive pairs of bags share a case id.
pub fn mil_bags(n_bags: usize, dim: usize, clusters: usize, rng: &mut impl Rng) -> Vec<SyntheticBag> {
    let centres: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..dim).map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>())
        .collect();
    (0..n_bags)
        .map(|b| {
            let label = b % 2;
            let n = rng.random_range(4..12);
            let marked = if label == 1 { rng.random_range(1..=2.min(n)) } else { 0 };
            let mut rows = Vec::with_capacity(n * dim);
            for i in 0..n {
                let c = if i < marked { 0 } else { rng.random_range(1..clusters) };
                for d in 0..dim {
                    let z: f64 = StandardNormal.sample(rng);
                    rows.push(centres[c][d] + 0.5 * z);
                }
            }
            SyntheticBag {
                features: Mat::from_shape_vec((n, dim), rows).unwrap(),
                label,
                case_id: format!("case{}", b / 2),
            }
        })
        .collect()
}

/// `(time, event, score)` triples with exponential event times whose hazard
/// rises with the score, plus independent exponential censoring.
pub fn survival_cohort(n: usize, effect: f64, censor_rate: f64, rng: &mut impl Rng) -> Vec<(f64, bool, f64)> {
    (0..n)
        .map(|_| {
            let score: f64 = StandardNormal.sample(rng);
            let t_event = Exp::new(0.02 * (effect * score).exp()).unwrap().sample(rng);
            if censor_rate > 0.0 {
                let t_cens = Exp::new(censor_rate).unwrap().sample(rng);
                if t_cens < t_event {
                    return (t_cens.max(1e-3), false, score);
                }
            }
            (t_event.max(1e-3), true, score)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid_and_seeded() {
        assert_eq!(lesion_images(3, 32, 1), lesion_images(3, 32, 1));
        assert_ne!(lesion_images(1, 32, 1), lesion_images(1, 32, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, mask) = disk_on_noise(64, &mut rng);
        assert_eq!(img.height(), 64);
        assert!(mask.iter().any(|m| *m) && mask.iter().any(|m| !*m));
    }

    #[test]
    fn hair_mask_marks_darkened_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = flat_skin(64, 64, [0.8, 0.6, 0.5]);
        let (img, mask) = draw_hairs(&base, 3, 2.0, 0.3, &mut rng);
        for ((y, x), m) in mask.indexed_iter() {
            assert_eq!(*m, img.get(0, y, x) < 0.79);
        }
    }

    #[test]
    fn positive_bags_contain_marked_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bags = mil_bags(10, 4, 4, &mut rng);
        assert_eq!(bags.iter().filter(|b| b.label == 1).count(), 5);
        assert_eq!(bags[0].case_id, bags[1].case_id);
    }
}
