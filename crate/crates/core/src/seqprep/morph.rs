//! Grey and binary morphology, connected components and the minimum
//! enclosing circle.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sliding min or max along one axis over `[i - r, i + r]`, clipped to the
/// image; pixels outside never win.
fn running_extreme(src: &Array2<f32>, r: usize, along_rows: bool, max: bool) -> Array2<f32> {
    let (h, w) = src.dim();
    let pick = |a: f32, b: f32| if max { a.max(b) } else { a.min(b) };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (lo, hi, fixed) = if along_rows {
            (x.saturating_sub(r), (x + r).min(w - 1), y)
        } else {
            (y.saturating_sub(r), (y + r).min(h - 1), x)
        };
        let mut acc = if along_rows { src[[fixed, lo]] } else { src[[lo, fixed]] };
        for k in lo + 1..=hi {
            acc = pick(acc, if along_rows { src[[fixed, k]] } else { src[[k, fixed]] });
        }
        acc
    })
}

/// Grey dilation by a `k × k` square (`k` odd).
pub fn dilate(src: &Array2<f32>, k: usize) -> Array2<f32> {
    let r = k / 2;
    running_extreme(&running_extreme(src, r, true, true), r, false, true)
}

/// Grey erosion by a `k × k` square (`k` odd).
pub fn erode(src: &Array2<f32>, k: usize) -> Array2<f32> {
    let r = k / 2;
    running_extreme(&running_extreme(src, r, true, false), r, false, false)
}

/// Closing minus the input: bright where thin dark structures sit.
pub fn black_hat(src: &Array2<f32>, k: usize) -> Array2<f32> {
    let closed = erode(&dilate(src, k), k);
    &closed - src
}

/// Binary dilation by a Euclidean disk of the given radius.
pub fn dilate_disk(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = mask.clone();
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for &(dy, dx) in &offsets {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                out[[yy as usize, xx as usize]] = true;
            }
        }
    }
    out
}

/// 8-connected components of `mask`, each as a list of `(y, x)` pixels, in
/// raster order of their first pixel.
pub fn components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = vec![];
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut comp = vec![];
            let mut stack = vec![(y, x)];
            seen[[y, x]] = true;
            while let Some((cy, cx)) = stack.pop() {
                comp.push((cy, cx));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Component pixels with a 4-neighbour outside the component or the frame.
pub fn boundary(mask: &Array2<bool>, comp: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    comp.iter()
        .copied()
        .filter(|&(y, x)| {
            y == 0 || x == 0 || y == h - 1 || x == w - 1 || !mask[[y - 1, x]] || !mask[[y + 1, x]] || !mask[[y, x - 1]] || !mask[[y, x + 1]]
        })
        .collect()
}

/// Area enclosed by a component's outer boundary: its pixels plus any holes.
pub fn filled_area(mask: &Array2<bool>, comp: &[(usize, usize)]) -> usize {
    let (h, w) = mask.dim();
    let mut inside = Array2::from_elem((h, w), false);
    for &(y, x) in comp {
        inside[[y, x]] = true;
    }
    // Flood the background from the frame; whatever is unreached is enclosed.
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack = vec![];
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !inside[[y, x]] {
                outside[[y, x]] = true;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        let n = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (ny, nx) in n {
            if ny < h && nx < w && !inside[[ny, nx]] && !outside[[ny, nx]] {
                outside[[ny, nx]] = true;
                stack.push((ny, nx));
            }
        }
    }
    outside.iter().filter(|&&o| !o).count()
}

/// Circle as `(cx, cy, r)`.
pub type Circle = (f64, f64, f64);

fn circle_two(a: (f64, f64), b: (f64, f64)) -> Circle {
    let (cx, cy) = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
    (cx, cy, ((a.0 - cx).powi(2) + (a.1 - cy).powi(2)).sqrt())
}

fn circle_three(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Circle {
    let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
    if d.abs() < 1e-12 {
        // Collinear: the widest pair spans the other point.
        let cands = [circle_two(a, b), circle_two(a, c), circle_two(b, c)];
        return cands.into_iter().max_by(|p, q| p.2.total_cmp(&q.2)).unwrap();
    }
    let sa = a.0 * a.0 + a.1 * a.1;
    let sb = b.0 * b.0 + b.1 * b.1;
    let sc = c.0 * c.0 + c.1 * c.1;
    let cx = (sa * (b.1 - c.1) + sb * (c.1 - a.1) + sc * (a.1 - b.1)) / d;
    let cy = (sa * (c.0 - b.0) + sb * (a.0 - c.0) + sc * (b.0 - a.0)) / d;
    (cx, cy, ((a.0 - cx).powi(2) + (a.1 - cy).powi(2)).sqrt())
}

fn contains(c: Circle, p: (f64, f64)) -> bool {
    (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= c.2 * c.2 * (1.0 + 1e-12) + 1e-9
}

/// Smallest circle containing every point (Welzl, iterative form, with a
/// fixed shuffle so the result is reproducible).
pub fn min_enclosing_circle(points: &[(f64, f64)]) -> Option<Circle> {
    if points.is_empty() {
        return None;
    }
    let mut pts = points.to_vec();
    pts.shuffle(&mut ChaCha8Rng::seed_from_u64(0x0c1c));
    let mut c = (pts[0].0, pts[0].1, 0.0);
    for i in 1..pts.len() {
        if contains(c, pts[i]) {
            continue;
        }
        c = (pts[i].0, pts[i].1, 0.0);
        for j in 0..i {
            if contains(c, pts[j]) {
                continue;
            }
            c = circle_two(pts[i], pts[j]);
            for k in 0..j {
                if !contains(c, pts[k]) {
                    c = circle_three(pts[i], pts[j], pts[k]);
                }
            }
        }
    }
    Some(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_hat_finds_thin_dark_line() {
        let mut img = Array2::from_elem((30, 30), 200.0f32);
        for x in 0..30 {
            img[[15, x]] = 120.0;
        }
        let bh = black_hat(&img, 17);
        assert_eq!(bh[[15, 10]], 80.0);
        assert_eq!(bh[[5, 10]], 0.0);
    }

    #[test]
    fn circle_through_square_corners() {
        let c = min_enclosing_circle(&[(0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (2.0, 2.0), (1.0, 1.0)]).unwrap();
        assert!((c.0 - 1.0).abs() < 1e-12 && (c.1 - 1.0).abs() < 1e-12);
        assert!((c.2 - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn components_and_holes() {
        let mut m = Array2::from_elem((10, 10), false);
        for y in 1..6 {
            for x in 1..6 {
                m[[y, x]] = !(y == 3 && x == 3);
            }
        }
        m[[8, 8]] = true;
        let comps = components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 24);
        assert_eq!(filled_area(&m, &comps[0]), 25);
        assert_eq!(boundary(&m, &comps[0]).len(), 20);
    }

    #[test]
    fn disk_dilation_radius() {
        let mut m = Array2::from_elem((21, 21), false);
        m[[10, 10]] = true;
        let d = dilate_disk(&m, 3);
        assert!(d[[10, 13]] && !d[[10, 14]] && d[[12, 12]] && !d[[13, 13]]);
    }
}
