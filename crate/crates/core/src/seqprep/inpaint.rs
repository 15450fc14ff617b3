//! Fast-marching inpainting after Telea: hole pixels are filled in order of
//! their distance from the known boundary, each from a weighted first-order
//! extrapolation of already known neighbours.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, Array3};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flag {
    Known,
    Band,
    Inside,
}

struct Entry {
    t: f64,
    seq: u64,
    y: usize,
    x: usize,
}

impl PartialEq for Entry {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    // Min-heap on arrival time, then on insertion order.
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then(o.seq.cmp(&self.seq))
    }
}

const FAR: f64 = 1e6;

struct Field {
    h: usize,
    w: usize,
    flag: Array2<Flag>,
    t: Array2<f64>,
}

impl Field {
    fn at(&self, y: isize, x: isize) -> (Flag, f64) {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            (Flag::Inside, FAR)
        } else {
            (self.flag[[y as usize, x as usize]], self.t[[y as usize, x as usize]])
        }
    }

    fn solve(&self, a: (isize, isize), b: (isize, isize)) -> f64 {
        let (fa, ta) = self.at(a.0, a.1);
        let (fb, tb) = self.at(b.0, b.1);
        match (fa != Flag::Inside, fb != Flag::Inside) {
            (true, true) => {
                if (ta - tb).abs() >= 1.0 {
                    1.0 + ta.min(tb)
                } else {
                    (ta + tb + (2.0 - (ta - tb).powi(2)).sqrt()) * 0.5
                }
            }
            (true, false) => 1.0 + ta,
            (false, true) => 1.0 + tb,
            (false, false) => 1.0 + ta.min(tb),
        }
    }

    fn known(&self, y: isize, x: isize) -> bool {
        self.at(y, x).0 != Flag::Inside
    }

    /// One-sided or central difference of `v` along an axis, using only
    /// known samples.
    fn diff(&self, y: isize, x: isize, dy: isize, dx: isize, v: impl Fn(usize, usize) -> f64) -> f64 {
        let here = v(y as usize, x as usize);
        match (self.known(y + dy, x + dx), self.known(y - dy, x - dx)) {
            (true, true) => (v((y + dy) as usize, (x + dx) as usize) - v((y - dy) as usize, (x - dx) as usize)) * 0.5,
            (true, false) => v((y + dy) as usize, (x + dx) as usize) - here,
            (false, true) => here - v((y - dy) as usize, (x - dx) as usize),
            (false, false) => 0.0,
        }
    }
}

/// Fills every `mask` pixel of a `C × H × W` image. Pixels outside the mask
/// are returned unchanged.
pub fn inpaint_telea(image: &Array3<f32>, mask: &Array2<bool>, radius: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    assert_eq!(mask.dim(), (h, w), "inpaint mask shape");
    let mut out = image.clone();
    if !mask.iter().any(|&m| m) {
        return out;
    }
    let mut field = Field {
        h,
        w,
        flag: Array2::from_elem((h, w), Flag::Known),
        t: Array2::zeros((h, w)),
    };
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            field.flag[[y, x]] = Flag::Inside;
            field.t[[y, x]] = FAR;
        }
    }
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            continue;
        }
        let touches = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)]
            .iter()
            .any(|(dy, dx)| field.at(y as isize + dy, x as isize + dx).0 == Flag::Inside && {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
            });
        if touches {
            field.flag[[y, x]] = Flag::Band;
            heap.push(Entry { t: 0.0, seq, y, x });
            seq += 1;
        }
    }
    let r2 = (radius * radius) as isize;
    let rad = radius as isize;
    while let Some(Entry { y, x, .. }) = heap.pop() {
        if field.flag[[y, x]] == Flag::Known {
            continue;
        }
        field.flag[[y, x]] = Flag::Known;
        for (dy, dx) in [(-1isize, 0isize), (0, -1), (1, 0), (0, 1)] {
            let (k, l) = (y as isize + dy, x as isize + dx);
            if k < 0 || l < 0 || k as usize >= h || l as usize >= w {
                continue;
            }
            let (ku, lu) = (k as usize, l as usize);
            if field.flag[[ku, lu]] != Flag::Inside {
                continue;
            }
            let t = [
                field.solve((k - 1, l), (k, l - 1)),
                field.solve((k + 1, l), (k, l - 1)),
                field.solve((k - 1, l), (k, l + 1)),
                field.solve((k + 1, l), (k, l + 1)),
            ]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
            field.t[[ku, lu]] = t;
            let tv = |a: usize, b: usize| field.t[[a, b]];
            let grad_t = (field.diff(k, l, 1, 0, tv), field.diff(k, l, 0, 1, tv));
            for ch in 0..c {
                let iv = |a: usize, b: usize| out[[ch, a, b]] as f64;
                let (mut num, mut den) = (0.0, 0.0);
                for m in (k - rad).max(0)..=(k + rad).min(h as isize - 1) {
                    for n in (l - rad).max(0)..=(l + rad).min(w as isize - 1) {
                        let (ry, rx) = (k - m, l - n);
                        let d2 = ry * ry + rx * rx;
                        if d2 == 0 || d2 > r2 || !field.known(m, n) {
                            continue;
                        }
                        let (mu, nu) = (m as usize, n as usize);
                        let d2 = d2 as f64;
                        let dst = 1.0 / (d2 * d2.sqrt());
                        let lev = 1.0 / (1.0 + (field.t[[mu, nu]] - t).abs());
                        let mut dir = ry as f64 * grad_t.0 + rx as f64 * grad_t.1;
                        if dir.abs() <= 0.01 {
                            dir = 1e-6;
                        }
                        let wgt = (dst * lev * dir).abs();
                        let gi = (field.diff(m, n, 1, 0, iv), field.diff(m, n, 0, 1, iv));
                        num += wgt * (iv(mu, nu) + gi.0 * ry as f64 + gi.1 * rx as f64);
                        den += wgt;
                    }
                }
                if den > 0.0 {
                    out[[ch, ku, lu]] = (num / den).clamp(0.0, 1.0) as f32;
                }
            }
            field.flag[[ku, lu]] = Flag::Band;
            heap.push(Entry { t, seq, y: ku, x: lu });
            seq += 1;
        }
    }
    out
}
