//! Layers built on [`crate::autograd`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// Glorot uniform.
    Xavier,
    Zeros,
    Const(f64),
}

impl Init {
    pub fn sample(self, rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        match self {
            Init::TruncNormal(std) => Mat::from_shape_fn((rows, cols), |_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            }),
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
            }
            Init::Zeros => Mat::zeros((rows, cols)),
            Init::Const(v) => Mat::from_elem((rows, cols), v),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.sample(in_dim, out_dim, rng));
        let bias = Some(store.add(format!("{name}.bias"), Mat::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.sample(in_dim, out_dim, rng));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::TruncNormal(0.02), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, Init::TruncNormal(0.02), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention. Queries and keys/values may
/// come from different token sets.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        let init = Init::TruncNormal(0.02);
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, init, rng),
            k: Linear::no_bias(store, &format!("{name}.k"), dim, dim, init, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, init, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, init, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, keys);
        let v = self.v.forward(g, keys);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, (h + 1) * hd);
            let kh = g.slice_cols(k, h * hd, (h + 1) * hd);
            let vh = g.slice_cols(v, h * hd, (h + 1) * hd);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.proj.forward(g, cat)
    }
}

/// Pre-norm transformer block with layer scale and stochastic depth.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub gamma1: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub gamma2: ParamId,
    pub drop_path: f64,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        layer_scale: f64,
        drop_path: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            gamma1: store.add(format!("{name}.gamma1"), Mat::from_elem((1, dim), layer_scale)),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
            gamma2: store.add(format!("{name}.gamma2"), Mat::from_elem((1, dim), layer_scale)),
            drop_path,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h);
        let x = self.residual(g, x, a, self.gamma1);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        self.residual(g, x, m, self.gamma2)
    }

    fn residual(&self, g: &mut Graph, x: Var, branch: Var, gamma: ParamId) -> Var {
        let gamma = g.param(gamma);
        let b = g.mul_row(branch, gamma);
        let b = g.drop_path(b, self.drop_path);
        g.add(x, b)
    }
}

/// Cross-attention block: queries attend over a separate key/value set.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub gamma1: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub gamma2: ParamId,
}

impl CrossBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        layer_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
            gamma1: store.add(format!("{name}.gamma1"), Mat::from_elem((1, dim), layer_scale)),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
            gamma2: store.add(format!("{name}.gamma2"), Mat::from_elem((1, dim), layer_scale)),
        }
    }

    /// `queries` and `context` must already carry their position encodings.
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Var {
        let q = self.norm_q.forward(g, queries);
        let kv = self.norm_kv.forward(g, context);
        let a = self.attn.forward(g, q, kv);
        let gamma1 = g.param(self.gamma1);
        let a = g.mul_row(a, gamma1);
        let x = g.add(queries, a);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        let gamma2 = g.param(self.gamma2);
        let m = g.mul_row(m, gamma2);
        g.add(x, m)
    }
}

/// Fixed 2-D sine-cosine position table for a `side × side` grid, one row
/// per position in row-major order.
pub fn sincos_pos_embed(side: usize, dim: usize) -> Mat {
    assert!(dim % 4 == 0, "position embedding dim must be a multiple of 4");
    let quarter = dim / 4;
    let mut out = Mat::zeros((side * side, dim));
    for y in 0..side {
        for x in 0..side {
            let row = y * side + x;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                let (ax, ay) = (x as f64 * omega, y as f64 * omega);
                out[[row, k]] = ax.sin();
                out[[row, quarter + k]] = ax.cos();
                out[[row, 2 * quarter + k]] = ay.sin();
                out[[row, 3 * quarter + k]] = ay.cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_is_equivariant_to_query_order_and_invariant_to_key_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 8, 2, &mut rng);
        let q = Init::TruncNormal(1.0).sample(3, 8, &mut rng);
        let kv = Init::TruncNormal(1.0).sample(5, 8, &mut rng);
        let perm = [4, 2, 0, 1, 3];
        let kv_perm = kv.select(ndarray::Axis(0), &perm);
        let mut g = Graph::new(&store);
        let qv = g.constant(q);
        let a = g.constant(kv);
        let b = g.constant(kv_perm);
        let o1 = attn.forward(&mut g, qv, a);
        let o2 = attn.forward(&mut g, qv, b);
        let diff = (g.value(o1) - g.value(o2)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn pos_embed_rows_are_distinct() {
        let p = sincos_pos_embed(4, 16);
        for i in 0..16 {
            for j in i + 1..16 {
                let d = (&p.row(i) - &p.row(j)).mapv(f64::abs).sum();
                assert!(d > 1e-3);
            }
        }
    }
}
