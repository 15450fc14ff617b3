//! Preprocessing for sequential dermoscopy pairs: dark-corner removal, hair
//! removal, rigid registration of the later image onto the earlier one, and
//! masking everything but the lesion.

pub mod akaze;
pub mod inpaint;
pub mod morph;
pub mod register;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use akaze::AkazeConfig;
pub use register::{register_pair, warp, EuclideanTransform2D, RansacConfig, Registration};

use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::imageops;
use crate::pretrain::to_rgb;
use crate::seg::BinaryMask;

/// Grey level separating the dark vignette from the field of view.
pub const DARK_CORNER_THRESHOLD: f32 = 100.0;
pub const CORNER_SHRINK: f64 = 0.8;
pub const CORNER_INPAINT_RADIUS: usize = 10;
/// A fitted circle covering this much of the frame means no vignette.
pub const CORNER_NO_ARTIFACT_COVERAGE: f64 = 0.98;
pub const HAIR_KERNEL: usize = 17;
pub const HAIR_THRESHOLD: f32 = 10.0;
pub const HAIR_INPAINT_RADIUS: usize = 5;
pub const FOCUS_DILATION: usize = 8;

/// Circle as `(cx, cy, r)` in pixel coordinates.
pub type Circle = (f64, f64, f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerInfo {
    pub detected: bool,
    /// Minimum enclosing circle of the field of view, before shrinking.
    pub circle: Option<Circle>,
    pub applied_radius: Option<f64>,
}

impl CornerInfo {
    const NONE: Self = Self {
        detected: false,
        circle: None,
        applied_radius: None,
    };
}

/// Finds the circular field of view of a vignetted image and inpaints
/// everything outside 80% of its radius.
pub fn remove_dark_corner(image: &ImageGrid) -> (ImageGrid, CornerInfo) {
    let rgb = to_rgb(image);
    let gray = imageops::gray255(&rgb);
    let bright = gray.mapv(|v| v > DARK_CORNER_THRESHOLD);
    let comps = morph::components(&bright);
    let Some(largest) = comps
        .iter()
        .enumerate()
        .max_by_key(|(i, c)| (morph::filled_area(&bright, c), std::cmp::Reverse(*i)))
        .map(|(_, c)| c)
    else {
        return (image.clone(), CornerInfo::NONE);
    };
    let pts: Vec<(f64, f64)> = morph::boundary(&bright, largest)
        .into_iter()
        .map(|(y, x)| (x as f64, y as f64))
        .collect();
    let Some((cx, cy, r)) = morph::min_enclosing_circle(&pts) else {
        return (image.clone(), CornerInfo::NONE);
    };
    let (h, w) = gray.dim();
    let inside_circle = |y: usize, x: usize, radius: f64| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= radius * radius;
    let covered = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| inside_circle(y, x, r)).count();
    if r <= 0.0 || covered as f64 >= CORNER_NO_ARTIFACT_COVERAGE * (h * w) as f64 {
        return (
            image.clone(),
            CornerInfo {
                detected: false,
                circle: Some((cx, cy, r)),
                applied_radius: None,
            },
        );
    }
    let applied = r * CORNER_SHRINK;
    let exterior = Array2::from_shape_fn((h, w), |(y, x)| !inside_circle(y, x, applied));
    let filled = inpaint::inpaint_telea(rgb.pixels(), &exterior, CORNER_INPAINT_RADIUS);
    (
        ImageGrid::new(filled, image.source_path.clone()).expect("inpaint keeps range"),
        CornerInfo {
            detected: true,
            circle: Some((cx, cy, r)),
            applied_radius: Some(applied),
        },
    )
}

/// Hair pixels: black-hat response of the grey image above the threshold.
pub fn hair_mask(image: &ImageGrid) -> Array2<bool> {
    let gray = imageops::gray255(&to_rgb(image));
    morph::black_hat(&gray, HAIR_KERNEL).mapv(|v| v > HAIR_THRESHOLD)
}

/// Inpaints detected hair. Returns the image and the hair pixel fraction.
pub fn remove_hair(image: &ImageGrid) -> (ImageGrid, f64) {
    let mask = hair_mask(image);
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return (image.clone(), 0.0);
    }
    let rgb = to_rgb(image);
    let filled = inpaint::inpaint_telea(rgb.pixels(), &mask, HAIR_INPAINT_RADIUS);
    (
        ImageGrid::new(filled, image.source_path.clone()).expect("inpaint keeps range"),
        n as f64 / mask.len() as f64,
    )
}

/// Replaces everything outside the lesion mask, dilated by 8 px, with the
/// median colour of that exterior. Returns the image and whether the mask
/// was empty (in which case the image passes through).
pub fn focus_lesion(image: &ImageGrid, mask: &BinaryMask) -> Result<(ImageGrid, bool)> {
    if mask.0.dim() != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {}x{}",
            mask.0.dim(),
            image.height(),
            image.width()
        )));
    }
    if mask.area() == 0 {
        log::warn!("empty lesion mask for {}; leaving image unmasked", image.source_path);
        return Ok((image.clone(), true));
    }
    let keep = morph::dilate_disk(&mask.0, FOCUS_DILATION);
    if keep.iter().all(|&k| k) {
        return Ok((image.clone(), false));
    }
    let median = imageops::channel_medians(image, |y, x| !keep[[y, x]]);
    let mut out = image.pixels().clone();
    for ((y, x), &k) in keep.indexed_iter() {
        if !k {
            for (c, m) in median.iter().enumerate() {
                out[[c, y, x]] = *m;
            }
        }
    }
    Ok((ImageGrid::new(out, image.source_path.clone())?, false))
}

/// Fallback lesion mask when no segmentation model is supplied: Otsu
/// threshold of the grey image, darker side, largest component.
pub fn otsu_lesion_mask(image: &ImageGrid) -> BinaryMask {
    let gray = imageops::gray255(&to_rgb(image));
    let mut hist = [0usize; 256];
    for &v in gray.iter() {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    let total = gray.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0, mut best, mut thr) = (0.0, 0.0, -1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            thr = t;
        }
    }
    let dark = gray.mapv(|v| v.round() <= thr as f32);
    let comps = morph::components(&dark);
    let mut out = Array2::from_elem(dark.dim(), false);
    if let Some(c) = comps.iter().max_by_key(|c| c.len()) {
        for &(y, x) in c {
            out[[y, x]] = true;
        }
    }
    BinaryMask(out)
}

/// Which stages run, in their fixed order corner → hair → warp → mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub corner: bool,
    pub hair: bool,
    pub warp: bool,
    pub mask: bool,
}

impl Stages {
    pub const NONE: Self = Self {
        corner: false,
        hair: false,
        warp: false,
        mask: false,
    };
    pub const ALL: Self = Self {
        corner: true,
        hair: true,
        warp: true,
        mask: true,
    };
}

impl FromStr for Stages {
    type Err = Error;

    /// Comma-separated subset of `corner,hair,warp,mask`; empty or `none`
    /// selects nothing.
    fn from_str(s: &str) -> Result<Self> {
        let mut st = Stages::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part {
                "corner" => st.corner = true,
                "hair" => st.hair = true,
                "warp" => st.warp = true,
                "mask" => st.mask = true,
                "all" => st = Stages::ALL,
                other => return Err(Error::Argument(format!("unknown preprocessing stage `{other}`"))),
            }
        }
        Ok(st)
    }
}

impl fmt::Display for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.corner, "corner"), (self.hair, "hair"), (self.warp, "warp"), (self.mask, "mask")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// The four preprocessing arms compared for change detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Images as captured.
    Default,
    /// Registration only.
    Warp,
    /// Lesion masking only.
    Mask,
    /// Every stage.
    Whole,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Default, Ablation::Warp, Ablation::Mask, Ablation::Whole];

    pub fn stages(self) -> Stages {
        match self {
            Ablation::Default => Stages::NONE,
            Ablation::Warp => Stages { warp: true, ..Stages::NONE },
            Ablation::Mask => Stages { mask: true, ..Stages::NONE },
            Ablation::Whole => Stages::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Default => "default",
            Ablation::Warp => "warp",
            Ablation::Mask => "mask",
            Ablation::Whole => "whole",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown ablation arm `{s}`")))
    }
}

/// Per-image stage outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub dark_corner_detected: bool,
    pub corner_circle: Option<Circle>,
    pub hair_pixel_fraction: f64,
    pub mask_empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub stages: Stages,
    pub t0: ImageReport,
    pub t1: ImageReport,
    /// Carries t0 coordinates to t1 coordinates.
    pub transform: EuclideanTransform2D,
    pub inlier_count: usize,
    pub match_count: usize,
    pub registration_failed: bool,
}

/// Pipeline settings; `segment` supplies lesion masks for the mask stage
/// and defaults to [`otsu_lesion_mask`].
pub struct PipelineConfig<'a> {
    pub stages: Stages,
    pub akaze: AkazeConfig,
    pub ransac: RansacConfig,
    pub segment: Option<&'a dyn Fn(&ImageGrid) -> BinaryMask>,
}

impl Default for PipelineConfig<'_> {
    fn default() -> Self {
        Self {
            stages: Stages::ALL,
            akaze: AkazeConfig::default(),
            ransac: RansacConfig::default(),
            segment: None,
        }
    }
}

fn clean(image: &ImageGrid, stages: Stages) -> (ImageGrid, ImageReport) {
    let mut rep = ImageReport {
        dark_corner_detected: false,
        corner_circle: None,
        hair_pixel_fraction: 0.0,
        mask_empty: false,
    };
    let mut img = image.clone();
    if stages.corner {
        let (out, info) = remove_dark_corner(&img);
        rep.dark_corner_detected = info.detected;
        rep.corner_circle = info.circle.filter(|_| info.detected);
        img = out;
    }
    if stages.hair {
        let (out, frac) = remove_hair(&img);
        rep.hair_pixel_fraction = frac;
        img = out;
    }
    (img, rep)
}

/// Runs the enabled stages on both images; t1 is registered onto t0.
pub fn preprocess_pair(
    t0: &ImageGrid,
    t1: &ImageGrid,
    cfg: &PipelineConfig<'_>,
) -> Result<(ImageGrid, ImageGrid, PreprocessReport)> {
    if (t0.height(), t0.width()) != (t1.height(), t1.width()) {
        return Err(Error::Shape(format!(
            "pair sizes differ: {}x{} vs {}x{}",
            t0.height(),
            t0.width(),
            t1.height(),
            t1.width()
        )));
    }
    let st = cfg.stages;
    let (mut a, mut ra) = clean(t0, st);
    let (mut b, mut rb) = clean(t1, st);
    let mut report = PreprocessReport {
        stages: st,
        t0: ra,
        t1: rb,
        transform: EuclideanTransform2D::IDENTITY,
        inlier_count: 0,
        match_count: 0,
        registration_failed: false,
    };
    if st.warp {
        let reg = register_pair(&a, &b, &cfg.akaze, &cfg.ransac);
        report.transform = reg.transform;
        report.inlier_count = reg.inliers;
        report.match_count = reg.matches;
        report.registration_failed = reg.failed;
        b = reg.warped;
    }
    if st.mask {
        let seg = |img: &ImageGrid| match cfg.segment {
            Some(f) => f(img),
            None => otsu_lesion_mask(img),
        };
        let (fa, ea) = focus_lesion(&a, &seg(&a))?;
        let (fb, eb) = focus_lesion(&b, &seg(&b))?;
        ra.mask_empty = ea;
        rb.mask_empty = eb;
        a = fa;
        b = fb;
    }
    report.t0.mask_empty = ra.mask_empty;
    report.t1.mask_empty = rb.mask_empty;
    Ok((a, b, report))
}

/// Flat row for `report.csv`.
pub fn report_row(pair_id: &str, r: &PreprocessReport) -> Vec<String> {
    let circle = |c: Option<Circle>| c.map_or(String::new(), |(x, y, rad)| format!("{x:.3};{y:.3};{rad:.3}"));
    vec![
        pair_id.to_string(),
        r.stages.to_string(),
        r.t0.dark_corner_detected.to_string(),
        circle(r.t0.corner_circle),
        format!("{:.6}", r.t0.hair_pixel_fraction),
        r.t1.dark_corner_detected.to_string(),
        circle(r.t1.corner_circle),
        format!("{:.6}", r.t1.hair_pixel_fraction),
        format!("{:.6}", r.transform.rotation),
        format!("{:.4}", r.transform.dx),
        format!("{:.4}", r.transform.dy),
        r.inlier_count.to_string(),
        r.match_count.to_string(),
        r.registration_failed.to_string(),
    ]
}

pub const REPORT_COLUMNS: [&str; 14] = [
    "pair_id",
    "stages",
    "t0_dark_corner_detected",
    "t0_corner_circle",
    "t0_hair_pixel_fraction",
    "t1_dark_corner_detected",
    "t1_corner_circle",
    "t1_hair_pixel_fraction",
    "rotation",
    "dx",
    "dy",
    "inlier_count",
    "match_count",
    "registration_failed",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vignetted(side: usize, radius: f64, tone: [f32; 3]) -> ImageGrid {
        let c = side as f64 / 2.0;
        ImageGrid::from_fn(3, side, side, |(ch, y, x)| {
            let d2 = (y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2);
            if d2 <= radius * radius {
                tone[ch]
            } else {
                0.02
            }
        })
    }

    #[test]
    fn dark_corner_circle_geometry() {
        let img = vignetted(256, 100.0, [0.85, 0.7, 0.6]);
        let (out, info) = remove_dark_corner(&img);
        assert!(info.detected);
        let (_, _, r) = info.circle.unwrap();
        assert!((r - 100.0).abs() <= 2.0, "{r}");
        assert!((info.applied_radius.unwrap() - 80.0).abs() <= 2.0);
        // The vignette is gone: corners now look like skin.
        assert!(out.get(0, 2, 2) > 0.6);
    }

    #[test]
    fn no_vignette_passes_through() {
        let bright = synth::flat_skin(64, 64, [0.8, 0.7, 0.6]);
        let (out, info) = remove_dark_corner(&bright);
        assert!(!info.detected);
        assert_eq!(out, bright);
        let black = synth::flat_skin(64, 64, [0.0, 0.0, 0.0]);
        let (out, info) = remove_dark_corner(&black);
        assert!(!info.detected && info.circle.is_none());
        assert_eq!(out, black);
    }

    #[test]
    fn hair_is_found_and_filled() {
        let base = synth::flat_skin(96, 96, [0.8, 0.65, 0.55]);
        let (hairy, truth) = synth::draw_hairs(&base, 3, 2.0, 40.0 / 255.0, &mut ChaCha8Rng::seed_from_u64(1));
        let found = hair_mask(&hairy);
        let hit = truth.indexed_iter().filter(|(p, &t)| t && found[*p]).count();
        let total = truth.iter().filter(|&&t| t).count();
        assert!(hit as f64 >= 0.9 * total as f64, "{hit}/{total}");
        let (clean, frac) = remove_hair(&hairy);
        assert!(frac > 0.0);
        let g = imageops::gray255(&clean);
        let bg = imageops::gray255(&base)[[0, 0]];
        for (p, &t) in truth.indexed_iter() {
            if t {
                assert!((g[p] - bg).abs() <= 15.0);
            }
        }
        let (again, _) = remove_hair(&clean);
        let changed = again.pixels().iter().zip(clean.pixels()).filter(|(a, b)| a != b).count();
        assert!((changed as f64) < 0.001 * clean.pixels().len() as f64, "{changed}");
    }

    #[test]
    fn hairless_image_is_untouched() {
        let base = synth::flat_skin(40, 40, [0.8, 0.65, 0.55]);
        let (out, frac) = remove_hair(&base);
        assert_eq!(frac, 0.0);
        assert_eq!(out, base);
    }

    #[test]
    fn focus_lesion_cases() {
        let img = synth::lesion_image(32, &mut ChaCha8Rng::seed_from_u64(2));
        let full = BinaryMask(Array2::from_elem((32, 32), true));
        assert_eq!(focus_lesion(&img, &full).unwrap(), (img.clone(), false));
        let empty = BinaryMask(Array2::from_elem((32, 32), false));
        assert_eq!(focus_lesion(&img, &empty).unwrap(), (img.clone(), true));
        let half = BinaryMask(Array2::from_shape_fn((32, 32), |(_, x)| x < 10));
        let (out, _) = focus_lesion(&img, &half).unwrap();
        let med = imageops::channel_medians(&img, |_, x| x >= 18);
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    if x >= 18 {
                        assert_eq!(out.get(c, y, x), med[c]);
                    } else {
                        assert_eq!(out.get(c, y, x), img.get(c, y, x));
                    }
                }
            }
        }
        assert!(focus_lesion(&img, &BinaryMask(Array2::from_elem((4, 4), true))).is_err());
    }

    #[test]
    fn stage_lists_parse() {
        assert_eq!("corner,hair,warp,mask".parse::<Stages>().unwrap(), Stages::ALL);
        assert_eq!("".parse::<Stages>().unwrap(), Stages::NONE);
        assert_eq!(Stages::ALL.to_string(), "corner,hair,warp,mask");
        assert!("blur".parse::<Stages>().is_err());
        assert_eq!("mask".parse::<Ablation>().unwrap().stages(), Stages { mask: true, ..Stages::NONE });
    }

    #[test]
    fn registration_recovers_shift_and_rotation() {
        let fixed = synth::registration_scene(128, &mut ChaCha8Rng::seed_from_u64(3));
        let shift = EuclideanTransform2D::new(0.0, 7.0, -4.0);
        let moving = warp(&fixed, &shift.inverse());
        let reg = register_pair(&fixed, &moving, &AkazeConfig::default(), &RansacConfig::default());
        assert!(!reg.failed);
        assert!((reg.transform.dx - 7.0).abs() < 0.5 && (reg.transform.dy + 4.0).abs() < 0.5, "{:?}", reg.transform);
        let rot = EuclideanTransform2D::about(10f64.to_radians(), 63.5, 63.5);
        let moving = warp(&fixed, &rot.inverse());
        let reg = register_pair(&fixed, &moving, &AkazeConfig::default(), &RansacConfig::default());
        assert!((reg.transform.rotation.to_degrees() - 10.0).abs() < 0.5, "{:?}", reg.transform);
        let same = register_pair(&fixed, &fixed, &AkazeConfig::default(), &RansacConfig::default());
        assert!(same.transform.rotation.abs() <= 0.005 && same.transform.dx.abs() <= 0.5 && same.transform.dy.abs() <= 0.5);
    }

    #[test]
    fn blank_pair_fails_registration_softly() {
        let a = synth::flat_skin(64, 64, [0.8, 0.7, 0.6]);
        let reg = register_pair(&a, &a, &AkazeConfig::default(), &RansacConfig::default());
        assert!(reg.failed);
        assert_eq!(reg.transform, EuclideanTransform2D::IDENTITY);
        assert_eq!(reg.warped, a);
    }

    #[test]
    fn corner_only_in_later_image() {
        let t0 = synth::flat_skin(96, 96, [0.8, 0.7, 0.6]);
        let t1 = vignetted(96, 40.0, [0.8, 0.7, 0.6]);
        let cfg = PipelineConfig {
            stages: Stages { corner: true, ..Stages::NONE },
            ..PipelineConfig::default()
        };
        let (_, _, rep) = preprocess_pair(&t0, &t1, &cfg).unwrap();
        assert!(!rep.t0.dark_corner_detected);
        assert!(rep.t1.dark_corner_detected);
        assert!(rep.t1.corner_circle.unwrap().2 > 0.0);
    }
}
