//! AKAZE keypoints: a nonlinear (Perona–Malik) scale space built by explicit
//! diffusion, scale-normalised Hessian-determinant extrema, a dominant
//! orientation per keypoint and rotated 486-bit M-LDB binary descriptors.

use ndarray::Array2;

/// Detector settings. `octaves` and `threshold` are the two knobs the
/// pipeline sets; the rest are the algorithm's customary defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AkazeConfig {
    pub octaves: usize,
    pub sublevels: usize,
    pub threshold: f64,
    pub sigma_offset: f64,
    pub derivative_factor: f64,
    pub contrast_percentile: f64,
    pub contrast_bins: usize,
    /// Half-width of the descriptor pattern in keypoint scale units.
    pub pattern_size: f64,
}

impl Default for AkazeConfig {
    fn default() -> Self {
        Self {
            octaves: 4,
            sublevels: 4,
            threshold: 9e-5,
            sigma_offset: 1.6,
            derivative_factor: 1.5,
            contrast_percentile: 0.7,
            contrast_bins: 300,
            pattern_size: 10.0,
        }
    }
}

/// Descriptor length in bits: three channels over all cell pairs of the
/// 2×2, 3×3 and 4×4 grids.
pub const DESCRIPTOR_BITS: usize = 3 * (6 + 36 + 120);

pub type Descriptor = [u64; DESCRIPTOR_BITS.div_ceil(64)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// Position in full-resolution pixel coordinates.
    pub x: f64,
    pub y: f64,
    /// Detection scale in full-resolution pixels.
    pub size: f64,
    pub angle: f64,
    pub response: f64,
    pub octave: usize,
    pub level: usize,
}

type Img = Array2<f32>;

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

pub(crate) fn gaussian_blur(img: &Img, sigma: f64) -> Img {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| (v / norm) as f32).collect();
    let (h, w) = img.dim();
    let tmp = Img::from_shape_fn((h, w), |(y, x)| {
        (-r..=r).map(|d| k[(d + r) as usize] * img[[y, reflect101(x as isize + d, w)]]).sum()
    });
    Img::from_shape_fn((h, w), |(y, x)| {
        (-r..=r).map(|d| k[(d + r) as usize] * tmp[[reflect101(y as isize + d, h), x]]).sum()
    })
}

fn half(img: &Img) -> Img {
    let (h, w) = img.dim();
    Img::from_shape_fn((h / 2, w / 2), |(y, x)| {
        0.25 * (img[[2 * y, 2 * x]] + img[[2 * y + 1, 2 * x]] + img[[2 * y, 2 * x + 1]] + img[[2 * y + 1, 2 * x + 1]])
    })
}

/// Scharr first derivative with tap spacing `s`, as a per-pixel slope.
fn scharr(img: &Img, s: usize, along_x: bool) -> Img {
    let (h, w) = img.dim();
    let s = s as isize;
    let at = |y: isize, x: isize| img[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    Img::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let v = if along_x {
            3.0 * (at(y - s, x + s) - at(y - s, x - s)) + 10.0 * (at(y, x + s) - at(y, x - s)) + 3.0 * (at(y + s, x + s) - at(y + s, x - s))
        } else {
            3.0 * (at(y + s, x - s) - at(y - s, x - s)) + 10.0 * (at(y + s, x) - at(y - s, x)) + 3.0 * (at(y + s, x + s) - at(y - s, x + s))
        };
        v / (32.0 * s as f32)
    })
}

/// Gradient-magnitude percentile of the lightly smoothed image.
fn contrast_factor(img: &Img, percentile: f64, bins: usize) -> f64 {
    let sm = gaussian_blur(img, 1.0);
    let (lx, ly) = (scharr(&sm, 1, true), scharr(&sm, 1, false));
    let (h, w) = img.dim();
    let mut mags = vec![];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let m = ((lx[[y, x]] as f64).powi(2) + (ly[[y, x]] as f64).powi(2)).sqrt();
            if m > 0.0 {
                mags.push(m);
            }
        }
    }
    let hmax = mags.iter().copied().fold(0.0, f64::max);
    if hmax == 0.0 {
        return 0.03;
    }
    let mut hist = vec![0usize; bins];
    for m in &mags {
        hist[((m / hmax * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let target = percentile * mags.len() as f64;
    let mut acc = 0usize;
    for (i, c) in hist.iter().enumerate() {
        acc += c;
        if acc as f64 >= target {
            return hmax * (i + 1) as f64 / bins as f64;
        }
    }
    hmax
}

/// Explicit Perona–Malik (g2) diffusion of `img` for `time`.
fn diffuse(img: &Img, k: f64, time: f64) -> Img {
    let (h, w) = img.dim();
    let sm = gaussian_blur(img, 1.0);
    let (lx, ly) = (scharr(&sm, 1, true), scharr(&sm, 1, false));
    let k2 = (k * k) as f32;
    let c = Img::from_shape_fn((h, w), |(y, x)| 1.0 / (1.0 + (lx[[y, x]].powi(2) + ly[[y, x]].powi(2)) / k2));
    let steps = (time / 0.25).ceil().max(1.0) as usize;
    let tau = (time / steps as f64) as f32;
    let mut l = img.clone();
    let mut next = l.clone();
    for _ in 0..steps {
        for y in 0..h {
            for x in 0..w {
                let v = l[[y, x]];
                let cv = c[[y, x]];
                let mut flux = 0.0;
                if x + 1 < w {
                    flux += (cv + c[[y, x + 1]]) * (l[[y, x + 1]] - v);
                }
                if x > 0 {
                    flux -= (c[[y, x - 1]] + cv) * (v - l[[y, x - 1]]);
                }
                if y + 1 < h {
                    flux += (cv + c[[y + 1, x]]) * (l[[y + 1, x]] - v);
                }
                if y > 0 {
                    flux -= (c[[y - 1, x]] + cv) * (v - l[[y - 1, x]]);
                }
                next[[y, x]] = v + 0.5 * tau * flux;
            }
        }
        std::mem::swap(&mut l, &mut next);
    }
    l
}

struct Level {
    octave: usize,
    sigma: f64,
    /// Derivative tap spacing in this octave's pixels.
    step: usize,
    lt: Img,
    lx: Img,
    ly: Img,
    det: Img,
}

fn build_levels(gray: &Img, cfg: &AkazeConfig) -> Vec<Level> {
    let mut levels: Vec<Level> = vec![];
    let mut k = contrast_factor(gray, cfg.contrast_percentile, cfg.contrast_bins);
    let mut lt = gaussian_blur(gray, cfg.sigma_offset);
    let mut prev_time = 0.0;
    for o in 0..cfg.octaves {
        for s in 0..cfg.sublevels {
            let sigma = cfg.sigma_offset * 2f64.powf(o as f64 + s as f64 / cfg.sublevels as f64);
            let time = 0.5 * sigma * sigma;
            if !levels.is_empty() {
                if s == 0 {
                    if lt.nrows() < 8 || lt.ncols() < 8 {
                        return levels;
                    }
                    lt = half(&lt);
                    k *= 0.75;
                }
                lt = diffuse(&lt, k, time - prev_time);
            }
            prev_time = time;
            let ratio = 2f64.powi(o as i32);
            let step = (sigma * cfg.derivative_factor / ratio).round().max(1.0) as usize;
            let sm = gaussian_blur(&lt, 1.0);
            let sf = step as f32;
            let lx = scharr(&sm, step, true) * sf;
            let ly = scharr(&sm, step, false) * sf;
            let lxx = scharr(&lx, step, true) * sf;
            let lyy = scharr(&ly, step, false) * sf;
            let lxy = scharr(&lx, step, false) * sf;
            let det = &lxx * &lyy - &lxy * &lxy;
            levels.push(Level {
                octave: o,
                sigma,
                step,
                lt: lt.clone(),
                lx,
                ly,
                det,
            });
        }
    }
    levels
}

fn to_full(v: f64, octave: usize) -> f64 {
    let r = 2f64.powi(octave as i32);
    (v + 0.5) * r - 0.5
}

fn to_level(v: f64, octave: usize) -> f64 {
    let r = 2f64.powi(octave as i32);
    (v + 0.5) / r - 0.5
}

fn detect(levels: &[Level], cfg: &AkazeConfig) -> Vec<Keypoint> {
    let mut cands = vec![];
    for (li, lv) in levels.iter().enumerate() {
        let (h, w) = lv.det.dim();
        let margin = lv.step + 1;
        if h <= 2 * margin || w <= 2 * margin {
            continue;
        }
        let d = &lv.det;
        for y in margin..h - margin {
            for x in margin..w - margin {
                let v = d[[y, x]];
                if (v as f64) <= cfg.threshold {
                    continue;
                }
                let is_max = (-1isize..=1).all(|dy| {
                    (-1isize..=1).all(|dx| (dy == 0 && dx == 0) || d[[(y as isize + dy) as usize, (x as isize + dx) as usize]] < v)
                });
                if !is_max {
                    continue;
                }
                // Quadratic refinement of the response peak.
                let at = |dy: isize, dx: isize| d[[(y as isize + dy) as usize, (x as isize + dx) as usize]] as f64;
                let (gx, gy) = ((at(0, 1) - at(0, -1)) / 2.0, (at(1, 0) - at(-1, 0)) / 2.0);
                let hxx = at(0, 1) + at(0, -1) - 2.0 * at(0, 0);
                let hyy = at(1, 0) + at(-1, 0) - 2.0 * at(0, 0);
                let hxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / 4.0;
                let den = hxx * hyy - hxy * hxy;
                if den.abs() < 1e-20 {
                    continue;
                }
                let ox = -(hyy * gx - hxy * gy) / den;
                let oy = -(hxx * gy - hxy * gx) / den;
                if ox.abs() > 1.0 || oy.abs() > 1.0 {
                    continue;
                }
                cands.push(Keypoint {
                    x: to_full(x as f64 + ox, lv.octave),
                    y: to_full(y as f64 + oy, lv.octave),
                    size: lv.sigma * cfg.derivative_factor,
                    angle: 0.0,
                    response: v as f64,
                    octave: lv.octave,
                    level: li,
                });
            }
        }
    }
    // Strongest first; suppress weaker responses nearby in adjacent levels.
    cands.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.level.cmp(&b.level))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    let mut kept: Vec<Keypoint> = vec![];
    for c in cands {
        let clash = kept.iter().any(|k| {
            k.level.abs_diff(c.level) <= 1 && {
                let r = k.size.max(c.size);
                (k.x - c.x).powi(2) + (k.y - c.y).powi(2) < r * r
            }
        });
        if !clash {
            kept.push(c);
        }
    }
    kept
}

fn bilinear(img: &Img, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let a = img[[y0, x0]] as f64 * (1.0 - fx) + img[[y0, x1]] as f64 * fx;
    let b = img[[y1, x0]] as f64 * (1.0 - fx) + img[[y1, x1]] as f64 * fx;
    a * (1.0 - fy) + b * fy
}

fn level_scale(kp: &Keypoint) -> f64 {
    (0.5 * kp.size / 2f64.powi(kp.octave as i32)).round().max(1.0)
}

/// Dominant gradient direction from a π/3 sliding sector.
fn orientation(kp: &Keypoint, lv: &Level) -> f64 {
    let s = level_scale(kp);
    let (xf, yf) = (to_level(kp.x, kp.octave), to_level(kp.y, kp.octave));
    let mut samples = vec![];
    for i in -6i32..=6 {
        for j in -6i32..=6 {
            if i * i + j * j >= 36 {
                continue;
            }
            let wgt = (-((i * i + j * j) as f64) / (2.0 * 2.5 * 2.5)).exp();
            let (yy, xx) = (yf + j as f64 * s, xf + i as f64 * s);
            let gx = wgt * bilinear(&lv.lx, yy, xx);
            let gy = wgt * bilinear(&lv.ly, yy, xx);
            samples.push((gy.atan2(gx), gx, gy));
        }
    }
    let (mut best, mut best_norm) = (0.0, -1.0);
    let sector = std::f64::consts::PI / 3.0;
    let mut a = -std::f64::consts::PI;
    while a < std::f64::consts::PI {
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(ang, gx, gy) in &samples {
            let d = (ang - a).rem_euclid(std::f64::consts::TAU);
            if d < sector {
                sx += gx;
                sy += gy;
            }
        }
        let n = sx * sx + sy * sy;
        if n > best_norm {
            best_norm = n;
            best = sy.atan2(sx);
        }
        a += 0.15;
    }
    best
}

const SAMPLES_PER_CELL: usize = 4;

fn describe(kp: &Keypoint, lv: &Level, cfg: &AkazeConfig) -> Descriptor {
    let s = level_scale(kp);
    let (xf, yf) = (to_level(kp.x, kp.octave), to_level(kp.y, kp.octave));
    let (si, co) = kp.angle.sin_cos();
    let p = cfg.pattern_size;
    let mut desc = [0u64; DESCRIPTOR_BITS.div_ceil(64)];
    let mut bit = 0usize;
    for grid in 2..=4usize {
        let cell = 2.0 * p / grid as f64;
        let mut values = Vec::with_capacity(grid * grid);
        for cy in 0..grid {
            for cx in 0..grid {
                let mut acc = [0.0f64; 3];
                for a in 0..SAMPLES_PER_CELL {
                    for b in 0..SAMPLES_PER_CELL {
                        let v = -p + (cy as f64 + (a as f64 + 0.5) / SAMPLES_PER_CELL as f64) * cell;
                        let u = -p + (cx as f64 + (b as f64 + 0.5) / SAMPLES_PER_CELL as f64) * cell;
                        let xx = xf + s * (u * co - v * si);
                        let yy = yf + s * (u * si + v * co);
                        let dx = bilinear(&lv.lx, yy, xx);
                        let dy = bilinear(&lv.ly, yy, xx);
                        acc[0] += bilinear(&lv.lt, yy, xx);
                        acc[1] += dx * co + dy * si;
                        acc[2] += -dx * si + dy * co;
                    }
                }
                values.push(acc);
            }
        }
        for i in 0..values.len() {
            for j in i + 1..values.len() {
                for ch in 0..3 {
                    if values[i][ch] > values[j][ch] {
                        desc[bit / 64] |= 1u64 << (bit % 64);
                    }
                    bit += 1;
                }
            }
        }
    }
    debug_assert_eq!(bit, DESCRIPTOR_BITS);
    desc
}

/// Keypoints with their descriptors, strongest response first.
pub fn detect_and_describe(gray: &Img, cfg: &AkazeConfig) -> (Vec<Keypoint>, Vec<Descriptor>) {
    if gray.nrows() < 16 || gray.ncols() < 16 {
        return (vec![], vec![]);
    }
    let levels = build_levels(gray, cfg);
    let mut kps = detect(&levels, cfg);
    let descs = kps
        .iter_mut()
        .map(|kp| {
            let lv = &levels[kp.level];
            kp.angle = orientation(kp, lv);
            describe(kp, lv, cfg)
        })
        .collect();
    (kps, descs)
}

pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Brute-force nearest neighbours kept only when mutual. Returns
/// `(index_in_a, index_in_b)` pairs.
pub fn match_cross_checked(a: &[Descriptor], b: &[Descriptor]) -> Vec<(usize, usize)> {
    let nearest = |from: &[Descriptor], to: &[Descriptor]| -> Vec<Option<usize>> {
        from.iter()
            .map(|d| {
                to.iter()
                    .enumerate()
                    .min_by_key(|(j, e)| (hamming(d, e), *j))
                    .map(|(j, _)| j)
            })
            .collect()
    };
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    ab.iter()
        .enumerate()
        .filter_map(|(i, j)| j.filter(|&j| ba[j] == Some(i)).map(|j| (i, j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Img {
        let img = crate::synth::registration_scene(96, &mut ChaCha8Rng::seed_from_u64(5));
        crate::imageops::gray01(&img)
    }

    #[test]
    fn descriptor_has_486_bits() {
        assert_eq!(DESCRIPTOR_BITS, 486);
        assert_eq!(std::mem::size_of::<Descriptor>(), 64);
    }

    #[test]
    fn finds_blobs_and_matches_itself() {
        let g = scene();
        let (kps, descs) = detect_and_describe(&g, &AkazeConfig::default());
        assert!(kps.len() >= 10, "{}", kps.len());
        let m = match_cross_checked(&descs, &descs);
        assert!(m.iter().filter(|(i, j)| i == j).count() >= kps.len() * 9 / 10);
    }

    #[test]
    fn flat_image_has_no_keypoints() {
        let g = Img::from_elem((64, 64), 0.5);
        assert!(detect_and_describe(&g, &AkazeConfig::default()).0.is_empty());
    }
}
