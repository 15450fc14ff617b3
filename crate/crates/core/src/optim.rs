//! Optimizers and learning-rate schedules.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::autograd::{Grads, Mat, ParamId, ParamStore};

/// Decoupled weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lr_scale` gives a per-parameter multiplier (layer
    /// decay); single-row parameters (biases, norms, scales, tokens) are not
    /// decayed.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        lr: f64,
        lr_scale: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut ids: Vec<_> = grads.iter().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            let g = grads.get(id).unwrap();
            let plr = lr * lr_scale(store.name(id));
            let decay = if store.get(id).nrows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= plr * (update + decay * *p);
                });
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

/// Learning-rate multipliers for `num_layers` layer groups ordered shallow
/// to deep: the deepest group gets 1 and each shallower group is multiplied
/// by `decay` once more.
pub fn layer_decay_multipliers(num_layers: usize, decay: f64) -> Vec<f64> {
    (0..num_layers)
        .map(|i| decay.powi((num_layers - 1 - i) as i32))
        .collect()
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Limited-memory BFGS with a backtracking Armijo line search.
///
/// `f` returns the objective and writes its gradient into the second
/// argument. Stops when the gradient norm drops below `tol` or after
/// `max_iter` iterations.
pub fn lbfgs(
    x0: Vec<f64>,
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    max_iter: usize,
    tol: f64,
    memory: usize,
) -> LbfgsResult {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut iterations = 0;
    let mut gnorm = dot(&g, &g).sqrt();

    while iterations < max_iter && gnorm >= tol {
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for j in 0..n {
                q[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / gnorm.max(1.0)
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for j in 0..n {
                q[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // Not a descent direction: fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v / gnorm.max(1.0)).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut g_new = vec![0.0; n];
        let mut x_new = vec![0.0; n];
        let mut f_new;
        let mut accepted = false;
        for _ in 0..60 {
            for j in 0..n {
                x_new[j] = x[j] + step * dir[j];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = (0..n).map(|j| x_new[j] - x[j]).collect();
                let y: Vec<f64> = (0..n).map(|j| g_new[j] - g[j]).collect();
                if dot(&s, &y) > 1e-12 * dot(&y, &y).max(1e-300) {
                    s_hist.push(s);
                    y_hist.push(y);
                    if s_hist.len() > memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        gnorm = dot(&g, &g).sqrt();
        if !accepted {
            break;
        }
    }
    LbfgsResult {
        converged: gnorm < tol,
        x,
        value: fx,
        grad_norm: gnorm,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn layer_decay_for_four_layers() {
        let m = layer_decay_multipliers(4, 0.75);
        assert_relative_eq!(m[0], 0.75f64.powi(3));
        assert_relative_eq!(m[1], 0.75f64.powi(2));
        assert_relative_eq!(m[2], 0.75);
        assert_relative_eq!(m[3], 1.0);
    }

    #[test]
    fn warmup_then_cosine() {
        let s = WarmupCosine {
            base_lr: 1.0,
            min_lr: 0.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert_relative_eq!(s.lr(0), 0.1);
        assert_relative_eq!(s.lr(9), 1.0);
        assert_relative_eq!(s.lr(10), 1.0);
        assert_relative_eq!(s.lr(60), 0.5, epsilon = 1e-12);
        assert!(s.lr(110).abs() < 1e-12);
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let r = lbfgs(
            vec![-1.2, 1.0],
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            1000,
            1e-8,
            10,
        );
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_elem((2, 2), 0.5));
        let mut grads = Grads::default();
        {
            let mut g = crate::autograd::Graph::new(&store);
            let w = g.param(id);
            let l = g.sum(w);
            grads.add(&g.backward(l));
        }
        let mut opt = AdamW::new(0.05);
        opt.step(&mut store, &grads, 0.0, |_| 1.0);
        assert_eq!(store.get(id), &Mat::from_elem((2, 2), 0.5));
    }
}
