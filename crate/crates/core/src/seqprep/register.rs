//! Rigid registration: keypoint matches, RANSAC over rotation plus
//! translation, and a reflect-padded bilinear warp.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::akaze::{self, AkazeConfig};
use crate::data::ImageGrid;
use crate::imageops;

/// `p ↦ R(rotation)·p + (dx, dy)` on `(x, y)` pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EuclideanTransform2D {
    /// Radians in (−π, π].
    pub rotation: f64,
    pub dx: f64,
    pub dy: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = a.rem_euclid(tau);
    if r > std::f64::consts::PI {
        r - tau
    } else {
        r
    }
}

impl EuclideanTransform2D {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub fn new(rotation: f64, dx: f64, dy: f64) -> Self {
        Self {
            rotation: wrap_angle(rotation),
            dx,
            dy,
        }
    }

    /// Rotation by `angle` about `(cx, cy)`.
    pub fn about(angle: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(angle, cx - (c * cx - s * cy), cy - (s * cx + c * cy))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (c * x - s * y + self.dx, s * x + c * y + self.dy)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let (tx, ty) = self.apply(other.dx, other.dy);
        Self::new(self.rotation + other.rotation, tx, ty)
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.rotation.sin_cos();
        Self::new(-self.rotation, -(c * self.dx + s * self.dy), s * self.dx - c * self.dy)
    }

    /// Least-squares rotation and translation carrying `src` onto `dst`.
    pub fn estimate(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Self> {
        let n = src.len();
        if n < 2 || n != dst.len() {
            return None;
        }
        let mean = |p: &[(f64, f64)]| {
            let (sx, sy) = p.iter().fold((0.0, 0.0), |a, q| (a.0 + q.0, a.1 + q.1));
            (sx / n as f64, sy / n as f64)
        };
        let (ms, md) = (mean(src), mean(dst));
        let (mut dot, mut cross) = (0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let (sx, sy) = (s.0 - ms.0, s.1 - ms.1);
            let (dx, dy) = (d.0 - md.0, d.1 - md.1);
            dot += sx * dx + sy * dy;
            cross += sx * dy - sy * dx;
        }
        if dot.abs() + cross.abs() < 1e-12 {
            return None;
        }
        let theta = cross.atan2(dot);
        let (s, c) = theta.sin_cos();
        Some(Self::new(theta, md.0 - (c * ms.0 - s * ms.1), md.1 - (s * ms.0 + c * ms.1)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub residual_threshold: f64,
    pub max_trials: usize,
    pub min_samples: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            residual_threshold: 3.0,
            max_trials: 2000,
            min_samples: 2,
            seed: 0,
        }
    }
}

/// Best-consensus model refit on its inliers; ties on inlier count go to
/// the smaller residual sum.
pub fn ransac_euclidean(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    cfg: &RansacConfig,
) -> Option<(EuclideanTransform2D, Vec<bool>)> {
    let n = src.len();
    if n < cfg.min_samples.max(2) {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    let score = |t: &EuclideanTransform2D| {
        let mut inl = vec![false; n];
        let (mut count, mut sum) = (0, 0.0);
        for i in 0..n {
            let (x, y) = t.apply(src[i].0, src[i].1);
            let r = ((x - dst[i].0).powi(2) + (y - dst[i].1).powi(2)).sqrt();
            if r < cfg.residual_threshold {
                inl[i] = true;
                count += 1;
                sum += r;
            }
        }
        (count, sum, inl)
    };
    for _ in 0..cfg.max_trials {
        let idx = rand::seq::index::sample(&mut rng, n, cfg.min_samples.max(2).min(n));
        let s: Vec<_> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|i| dst[i]).collect();
        let Some(t) = EuclideanTransform2D::estimate(&s, &d) else {
            continue;
        };
        let (count, sum, inl) = score(&t);
        let better = best.as_ref().is_none_or(|(bc, bs, _)| count > *bc || (count == *bc && sum < *bs));
        if better {
            best = Some((count, sum, inl));
        }
        if count == n {
            break;
        }
    }
    let (_, _, inl) = best?;
    let s: Vec<_> = (0..n).filter(|&i| inl[i]).map(|i| src[i]).collect();
    let d: Vec<_> = (0..n).filter(|&i| inl[i]).map(|i| dst[i]).collect();
    let t = EuclideanTransform2D::estimate(&s, &d)?;
    Some((t, inl))
}

/// Mirror index without repeating the edge sample.
fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// Output pixel `p` takes the input sampled at `map(p)`, bilinearly, with
/// mirrored borders.
pub fn warp(image: &ImageGrid, map: &EuclideanTransform2D) -> ImageGrid {
    let p = image.pixels();
    let (c, h, w) = p.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map.apply(x as f64, y as f64);
            let (sx, sy) = (reflect(sx, w), reflect(sy, h));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let a = p[[ch, y0, x0]] * (1.0 - fx) + p[[ch, y0, x1]] * fx;
                let b = p[[ch, y1, x0]] * (1.0 - fx) + p[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    ImageGrid::new(out, image.source_path.clone()).expect("finite warp")
}

/// Outcome of registering a moving image onto a fixed one.
#[derive(Clone, Debug)]
pub struct Registration {
    pub warped: ImageGrid,
    /// Carries fixed-frame coordinates to moving-frame coordinates.
    pub transform: EuclideanTransform2D,
    pub inliers: usize,
    pub matches: usize,
    pub failed: bool,
}

pub const MIN_INLIERS: usize = 3;

/// Registers `moving` onto `fixed`. Fewer than three consensus matches
/// give the identity with `failed` set and the moving image untouched.
pub fn register_pair(
    fixed: &ImageGrid,
    moving: &ImageGrid,
    akaze_cfg: &AkazeConfig,
    ransac_cfg: &RansacConfig,
) -> Registration {
    let (kf, df) = akaze::detect_and_describe(&imageops::gray01(fixed), akaze_cfg);
    let (km, dm) = akaze::detect_and_describe(&imageops::gray01(moving), akaze_cfg);
    let matches = akaze::match_cross_checked(&df, &dm);
    let src: Vec<_> = matches.iter().map(|&(i, _)| (kf[i].x, kf[i].y)).collect();
    let dst: Vec<_> = matches.iter().map(|&(_, j)| (km[j].x, km[j].y)).collect();
    let fit = ransac_euclidean(&src, &dst, ransac_cfg);
    match fit {
        Some((t, inl)) if inl.iter().filter(|&&b| b).count() >= MIN_INLIERS => Registration {
            warped: warp(moving, &t),
            transform: t,
            inliers: inl.iter().filter(|&&b| b).count(),
            matches: matches.len(),
            failed: false,
        },
        other => Registration {
            warped: moving.clone(),
            transform: EuclideanTransform2D::IDENTITY,
            inliers: other.map_or(0, |(_, inl)| inl.iter().filter(|&&b| b).count()),
            matches: matches.len(),
            failed: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_compose() {
        let t = EuclideanTransform2D::new(2.9, 4.0, -7.5);
        let id = t.compose(&t.inverse());
        assert!(id.rotation.abs() < 1e-12 && id.dx.abs() < 1e-9 && id.dy.abs() < 1e-9);
        let u = EuclideanTransform2D::new(0.4, 1.0, 2.0);
        let (x, y) = t.compose(&u).apply(3.0, 5.0);
        let (a, b) = u.apply(3.0, 5.0);
        let (x2, y2) = t.apply(a, b);
        assert!((x - x2).abs() < 1e-12 && (y - y2).abs() < 1e-12);
        assert!(EuclideanTransform2D::new(3.5, 0.0, 0.0).rotation < 0.0);
        assert_eq!(EuclideanTransform2D::new(std::f64::consts::PI, 0.0, 0.0).rotation, std::f64::consts::PI);
    }

    #[test]
    fn ransac_ignores_outliers() {
        let truth = EuclideanTransform2D::new(0.2, 5.0, -3.0);
        let src: Vec<(f64, f64)> = (0..30).map(|i| ((i * 7 % 50) as f64, (i * 13 % 40) as f64)).collect();
        let mut dst: Vec<_> = src.iter().map(|&(x, y)| truth.apply(x, y)).collect();
        for d in dst.iter_mut().take(8) {
            d.0 += 40.0;
        }
        let (t, inl) = ransac_euclidean(&src, &dst, &RansacConfig::default()).unwrap();
        assert_eq!(inl.iter().filter(|&&b| b).count(), 22);
        assert!((t.rotation - 0.2).abs() < 1e-9 && (t.dx - 5.0).abs() < 1e-9);
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1.0, 5), 1.0);
        assert_eq!(reflect(5.0, 5), 3.0);
        assert_eq!(reflect(2.5, 5), 2.5);
    }
}
