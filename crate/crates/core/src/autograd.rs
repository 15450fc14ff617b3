//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] and enter the graph as leaves through [`Graph::param`]; a
//! parameter is materialised once per graph, so a module applied twice in the
//! same pass (a Siamese branch, a batch of images) shares one leaf and its
//! gradient accumulates there.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Mat,
}

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies values from `other` for every parameter whose name and shape
    /// match. Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for entry in &mut self.entries {
            if let Some(id) = other.find(&entry.name) {
                let src = other.get(id);
                if src.dim() == entry.value.dim() {
                    entry.value.assign(src);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Loads every parameter of `self` from `other`, which must contain a
    /// parameter of identical name and shape for each.
    pub fn load_strict(&mut self, other: &ParamStore) -> Result<()> {
        for entry in &mut self.entries {
            let Some(id) = other.find(&entry.name) else {
                return Err(Error::Shape(format!(
                    "parameter `{}` missing from checkpoint",
                    entry.name
                )));
            };
            let src = other.get(id);
            if src.dim() != entry.value.dim() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?} in checkpoint but {:?} in model",
                    entry.name,
                    src.dim(),
                    entry.value.dim()
                )));
            }
            entry.value.assign(src);
        }
        Ok(())
    }

    /// Restricts to parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                out.add(e.name.clone(), e.value.clone());
            }
        }
        out
    }

    /// Little-endian binary serialisation: for each parameter its name
    /// length, name bytes, row and column count, then the values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(b"DFW1");
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name);
            let (r, c) = e.value.dim();
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
            for v in e.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != b"DFW1" {
            return Err(Error::Corruption("bad weight blob magic".into()));
        }
        let count = cur.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = cur.u64()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Corruption("parameter name is not utf-8".into()))?
                .to_string();
            let r = cur.u64()? as usize;
            let c = cur.u64()? as usize;
            let mut vals = Vec::with_capacity(r * c);
            for _ in 0..r * c {
                vals.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            let m = Mat::from_shape_vec((r, c), vals)
                .map_err(|e| Error::Corruption(e.to_string()))?;
            if store.find(&name).is_some() {
                return Err(Error::Corruption(format!("duplicate parameter {name}")));
            }
            store.add(name, m);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corruption("trailing bytes in weight blob".into()));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption("truncated weight blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: HashMap<ParamId, Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Mat)> {
        self.map.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Global ℓ2 norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Accumulates `other` into `self`.
    pub fn add(&mut self, other: &Grads) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNormRows(Var),
    L2NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumRows(Var),
    SoftCrossEntropy(Var, Mat),
    BceWithLogits(Var, Mat),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
}

const LN_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

/// Computation graph over one forward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    leaves: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    /// Inference graph: dropout and stochastic depth are identities.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            leaves: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph with its own stream for dropout masks.
    pub fn training(store: &'s ParamStore, seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient is reported for it).
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves.get(&id) {
            return *v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Leaf);
        self.leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1×m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1×m` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(x) * self.value(row);
        self.push(v, Op::MulRow(x, row))
    }

    /// Multiplies every column of `x` elementwise by an `n×1` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = self.value(x) * self.value(col);
        self.push(v, Op::MulCol(x, col))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x) * factor;
        self.push(v, Op::Scale(x, factor))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a * a);
        self.push(v, Op::Square(x))
    }

    /// `sqrt(x + eps)`; `eps` keeps the derivative finite at zero.
    pub fn sqrt(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x).mapv(|a| (a + eps).sqrt());
        self.push(v, Op::Sqrt(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Softmax down each column (over rows).
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let v = softmax_rows(&self.value(x).t().to_owned()).t().to_owned();
        self.push(v, Op::SoftmaxCols(x))
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|a| (a - mean) * inv);
        }
        self.push(out, Op::LayerNormRows(x))
    }

    /// Scales every row to unit ℓ2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(L2_EPS);
            row.mapv_inplace(|a| a / norm);
        }
        self.push(out, Op::L2NormalizeRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), idx);
        self.push(v, Op::GatherRows(x, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(x, start, end))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.len(), rows * cols, "reshape changes element count");
        let v = Mat::from_shape_vec((rows, cols), src.iter().copied().collect()).unwrap();
        self.push(v, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let v = Mat::from_elem((1, 1), m.sum() / m.len().max(1) as f64);
        self.push(v, Op::Mean(x))
    }

    /// Column means, `n×m → 1×m`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let v = m.sum_axis(Axis(0)).insert_axis(Axis(0)) / m.nrows() as f64;
        self.push(v, Op::MeanRows(x))
    }

    /// Column sums, `n×m → 1×m`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(x))
    }

    /// Mean over rows of `−Σ_c target_c · log softmax(logits)_c`. Targets are
    /// soft labels (rows summing to one).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Mat) -> Var {
        let l = self.value(logits);
        assert_eq!(l.dim(), targets.dim(), "cross entropy shape mismatch");
        let logp = log_softmax_rows(l);
        let v = -(&logp * &targets).sum() / l.nrows() as f64;
        self.push(Mat::from_elem((1, 1), v), Op::SoftCrossEntropy(logits, targets))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, c) = self.shape(logits);
        assert_eq!(n, labels.len());
        let mut t = Mat::zeros((n, c));
        for (i, &y) in labels.iter().enumerate() {
            t[[i, y]] = 1.0;
        }
        self.soft_cross_entropy(logits, t)
    }

    /// Mean binary cross entropy on logits against targets in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let l = self.value(logits);
        assert_eq!(l.dim(), targets.dim(), "bce shape mismatch");
        let mut acc = 0.0;
        for (z, t) in l.iter().zip(targets.iter()) {
            acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let v = acc / l.len() as f64;
        self.push(Mat::from_elem((1, 1), v), Op::BceWithLogits(logits, targets))
    }

    /// Inverted dropout. Identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let (r, c) = self.shape(x);
        let mask = Mat::from_shape_fn((r, c), |_| {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Stochastic depth on a residual branch of one sample.
    pub fn drop_path(&mut self, branch: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return branch;
        }
        if self.rng.random::<f64>() < p {
            self.scale(branch, 0.0)
        } else {
            self.scale(branch, 1.0 / (1.0 - p))
        }
    }

    /// Runs the backward pass from the scalar `loss` and returns gradients
    /// for every parameter that took part in the graph.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *row, gr);
                }
                Op::MulRow(x, row) => {
                    let gx = &g * self.value(*row);
                    let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *row, gr);
                }
                Op::MulCol(x, col) => {
                    let gx = &g * self.value(*col);
                    let gc = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g * *f),
                Op::Gelu(x) => {
                    let d = self.value(*x).mapv(gelu_grad);
                    acc(&mut grads, *x, g * d);
                }
                Op::Relu(x) => {
                    let d = self.value(*x).mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *x, g * d);
                }
                Op::Tanh(x) => {
                    let d = out.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *x, g * d);
                }
                Op::Sigmoid(x) => {
                    let d = out.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *x, g * d);
                }
                Op::Abs(x) => {
                    let d = self.value(*x).mapv(|a| {
                        if a > 0.0 {
                            1.0
                        } else if a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *x, g * d);
                }
                Op::Square(x) => {
                    let d = self.value(*x) * 2.0;
                    acc(&mut grads, *x, g * d);
                }
                Op::Sqrt(x) => {
                    let d = out.mapv(|r| 0.5 / r);
                    acc(&mut grads, *x, g * d);
                }
                Op::SoftmaxRows(x) => {
                    let gx = softmax_rows_backward(out, &g);
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxCols(x) => {
                    let gx = softmax_rows_backward(&out.t().to_owned(), &g.t().to_owned())
                        .t()
                        .to_owned();
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNormRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.dim());
                    let m = xv.ncols() as f64;
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / m;
                        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let y = out.row(r);
                        let gy = g.row(r);
                        let gmean = gy.sum() / m;
                        let gy_dot_y = gy.dot(&y) / m;
                        for c in 0..xv.ncols() {
                            gx[[r, c]] = inv * (gy[c] - gmean - y[c] * gy_dot_y);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let norm = xv.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
                        let y = out.row(r);
                        let gy = g.row(r);
                        if norm <= L2_EPS {
                            gx.row_mut(r).assign(&(&gy / L2_EPS));
                            continue;
                        }
                        let d = gy.dot(&y);
                        for c in 0..xv.ncols() {
                            gx[[r, c]] = (gy[c] - y[c] * d) / norm;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        let gp = g.slice(s![start..start + n, ..]).to_owned();
                        acc(&mut grads, *p, gp);
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        let gp = g.slice(s![.., start..start + n]).to_owned();
                        acc(&mut grads, *p, gp);
                        start += n;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start, end) => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.t().to_owned()),
                Op::Reshape(x) => {
                    let gx = Mat::from_shape_vec(self.value(*x).dim(), g.iter().copied().collect()).unwrap();
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Mat::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gx = Mat::from_elem(xv.dim(), g[[0, 0]] / xv.len().max(1) as f64);
                    acc(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let (n, m) = self.value(*x).dim();
                    let gx = g.broadcast((n, m)).unwrap().to_owned() / n as f64;
                    acc(&mut grads, *x, gx);
                }
                Op::SumRows(x) => {
                    let (n, m) = self.value(*x).dim();
                    let gx = g.broadcast((n, m)).unwrap().to_owned();
                    acc(&mut grads, *x, gx);
                }
                Op::SoftCrossEntropy(logits, targets) => {
                    let l = self.value(*logits);
                    let p = softmax_rows(l);
                    let gx = (p - targets) * (g[[0, 0]] / l.nrows() as f64);
                    acc(&mut grads, *logits, gx);
                }
                Op::BceWithLogits(logits, targets) => {
                    let l = self.value(*logits);
                    let gx = (l.mapv(sigmoid) - targets) * (g[[0, 0]] / l.len() as f64);
                    acc(&mut grads, *logits, gx);
                }
            }
        }

        let mut map = HashMap::new();
        for (id, v) in &self.leaves {
            if let Some(g) = grads[v.0].take() {
                map.insert(*id, g);
            }
        }
        Grads { map }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|a| (a - max).exp());
        let s = row.sum();
        row.mapv_inplace(|a| a / s);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|a| a - lse);
    }
    out
}

fn softmax_rows_backward(y: &Mat, g: &Mat) -> Mat {
    let mut gx = Mat::zeros(y.dim());
    for r in 0..y.nrows() {
        let yr = y.row(r);
        let gr = g.row(r);
        let d = yr.dot(&gr);
        for c in 0..y.ncols() {
            gx[[r, c]] = yr[c] * (gr[c] - d);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    /// Central finite differences of `f` on every entry of every parameter.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (r, c) = store.get(id).dim();
            for i in 0..r {
                for j in 0..c {
                    let h = 1e-6;
                    let orig = store.get(id)[[i, j]];
                    store.get_mut(id)[[i, j]] = orig + h;
                    let up = {
                        let mut g = Graph::new(store);
                        let l = f(&mut g);
                        g.scalar(l)
                    };
                    store.get_mut(id)[[i, j]] = orig - h;
                    let down = {
                        let mut g = Graph::new(store);
                        let l = f(&mut g);
                        g.scalar(l)
                    };
                    store.get_mut(id)[[i, j]] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.get(id).map(|m| m[[i, j]]).unwrap_or(0.0);
                    // Entries far below the parameter's gradient scale are
                    // dominated by differencing round-off.
                    let scale = grads.get(id).map_or(0.0, |m| m.fold(0.0f64, |a, v| a.max(v.abs())));
                    let denom = fd.abs().max(an.abs()).max(1e-3 * scale).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-5,
                        "{} [{i},{j}]: fd {fd} vs analytic {an}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        // Unit-scale inputs keep the quartic composite within the range
        // where central differences are accurate to 1e-5.
        let a = store.add("a", randn(&mut rng, 3, 4) * 0.5);
        let b = store.add("b", randn(&mut rng, 4, 5) * 0.5);
        let r = store.add("r", randn(&mut rng, 1, 5));
        let c = store.add("c", randn(&mut rng, 3, 1));
        check(&mut store, |g| {
            let a = g.param(a);
            let b = g.param(b);
            let r = g.param(r);
            let c = g.param(c);
            let x = g.matmul(a, b);
            let x = g.add_row(x, r);
            let x = g.mul_row(x, r);
            let x = g.mul_col(x, c);
            let y = g.gelu(x);
            let z = g.tanh(x);
            let w = g.sigmoid(x);
            let q = g.abs(x);
            let x = g.add(y, z);
            let x = g.sub(x, w);
            let x = g.mul(x, q);
            let x = g.square(x);
            let x = g.relu(x);
            let t = g.transpose(x);
            let x = g.matmul_t(t, t);
            let x = g.reshape(x, 1, 25);
            let x = g.mul(x, x);
            let x = g.sqrt(x, 0.5);
            g.mean(x)
        });
    }

    #[test]
    fn normalisations_and_reductions_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let a = store.add("a", randn(&mut rng, 4, 6));
        let b = store.add("b", randn(&mut rng, 2, 6));
        check(&mut store, |g| {
            let a = g.param(a);
            let b = g.param(b);
            let x = g.concat_rows(&[a, b]);
            let ln = g.layer_norm_rows(x);
            let n = g.l2_normalize_rows(x);
            let sm = g.softmax_rows(x);
            let sc = g.softmax_cols(x);
            let x = g.concat_cols(&[ln, n, sm, sc]);
            let x = g.gather_rows(x, &[5, 0, 0, 3]);
            let x = g.slice_cols(x, 2, 20);
            let m = g.mean_rows(x);
            let s = g.sum_rows(x);
            let x = g.mul(m, s);
            let x = g.scale(x, 0.3);
            g.sum(x)
        });
    }

    #[test]
    fn losses_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", randn(&mut rng, 5, 3));
        check(&mut store, |g| {
            let a = g.param(a);
            let ce = g.cross_entropy(a, &[0, 2, 1, 1, 0]);
            let t = Mat::from_shape_fn((5, 3), |(i, j)| ((i + j) % 2) as f64);
            let bce = g.bce_with_logits(a, t);
            g.add(ce, bce)
        });
    }

    #[test]
    fn shared_parameter_accumulates_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[2.0]]);
        let g = {
            let mut g = Graph::new(&store);
            let a = g.param(w);
            let b = g.param(w);
            assert_eq!(a, b);
            let y = g.mul(a, b);
            g.backward(y)
        };
        assert_eq!(g.get(w).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn weight_blob_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("x.weight", randn(&mut rng, 3, 7));
        store.add("x.bias", randn(&mut rng, 1, 7));
        let back = ParamStore::from_bytes(&store.to_bytes()).unwrap();
        for id in store.ids() {
            assert_eq!(store.name(id), back.name(id));
            let same = store
                .get(id)
                .iter()
                .zip(back.get(id).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
        }
        assert!(ParamStore::from_bytes(&store.to_bytes()[..20]).is_err());
    }

    #[test]
    fn inference_dropout_is_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::ones((2, 2)));
        assert_eq!(g.dropout(x, 0.5), x);
        assert_eq!(g.drop_path(x, 0.5), x);
    }
}
