//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every op of one forward pass. Parameters are pulled
//! in by name from a [`ParamStore`]; [`Graph::backward`] replays the tape in
//! reverse and returns one gradient per stored parameter (zeros for
//! parameters the loss never touched).

use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Real, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Gradient table keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    grads: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.grads.iter()
    }

    /// Accumulates `other * weight` into this table.
    pub fn accumulate(&mut self, other: &Gradients<F>, weight: F) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Shape(format!("gradient shape for {name}")));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b * weight;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.scale(weight));
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> F {
        self.grads.values().map(Tensor::sq_norm).sum::<F>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    MaskedSoftmax(Var),
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    NegSqDist(Var, Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<F>,
        weights: Vec<F>,
    },
    MeanSquare(Var),
    Sum(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::Embedding { .. } => "embedding",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::NegSqDist(..) => "neg_sq_dist",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::MeanSquare(_) => "mean_square",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// One forward pass worth of recorded ops.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    poisoned: Option<&'static str>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            poisoned: None,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(op.name());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first op whose output held NaN or Inf.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poisoned
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt inner {k} vs {k2}")));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).numel() != n {
            return Err(Error::Shape(format!(
                "add_row: bias of {} for {n} columns",
                self.value(bias).numel()
            )));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..m {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// Dense layer `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let out = self.value(a).scale(c);
        Ok(self.push(out, Op::Scale(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(F::zero()));
        Ok(self.push(out, Op::Relu(a)))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Shape("layer_norm: affine width".into()));
        }
        let eps = F::from_f64c(LN_EPS);
        let nf = F::from_usize(n).unwrap();
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![F::zero(); m * n];
        let mut inv_std = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax restricted to `mask`-true entries; masked entries are 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let out = masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Gathers rows of `table` (an embedding lookup).
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::InvalidToken { index: i, vocab: v });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scales each row to unit norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.dims(x);
        let mut out = self.value(x).clone();
        let mut norms = vec![F::zero(); m];
        for (i, norm) in norms.iter_mut().enumerate() {
            let row = out.row_mut(i);
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            *norm = n;
            if n > F::zero() {
                for v in row.iter_mut() {
                    *v = *v / n;
                }
            }
        }
        Ok(self.push(out, Op::NormalizeRows { x, norms }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::Shape("concat_cols: row count".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {n}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let t = Tensor::new(vec![m, end - start], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    /// `out[i, w] = −‖x_i − e_w‖²` for `x: m×d`, `e: v×d`.
    pub fn neg_sq_dist(&mut self, x: Var, e: Var) -> Result<Var> {
        let (m, d) = self.dims(x);
        let (v, d2) = self.dims(e);
        if d != d2 {
            return Err(Error::Shape(format!("neg_sq_dist width {d} vs {d2}")));
        }
        let xv = self.value(x);
        let ev = self.value(e);
        let mut out = vec![F::zero(); m * v];
        for i in 0..m {
            let xr = xv.row(i);
            for w in 0..v {
                let er = ev.row(w);
                let mut acc = F::zero();
                for (&a, &b) in xr.iter().zip(er) {
                    acc += (a - b) * (a - b);
                }
                out[i * v + w] = -acc;
            }
        }
        let t = Tensor::new(vec![m, v], out)?;
        Ok(self.push(t, Op::NegSqDist(x, e)))
    }

    /// Weighted mean over rows of `−log softmax(logits_i)[targets_i]`.
    /// Rows with weight 0 are ignored; if every weight is 0 the loss is 0.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[F],
    ) -> Result<Var> {
        let (m, v) = self.dims(logits);
        if targets.len() != m || weights.len() != m {
            return Err(Error::Shape("cross_entropy_rows: target count".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); m * v];
        let wsum: F = weights.iter().copied().sum();
        let mut loss = F::zero();
        for i in 0..m {
            if targets[i] >= v {
                return Err(Error::InvalidToken {
                    index: targets[i],
                    vocab: v,
                });
            }
            let row = lv.row(i);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&l| (l - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if weights[i] != F::zero() {
                loss += weights[i] * (lse - row[targets[i]]);
            }
        }
        if wsum > F::zero() {
            loss = loss / wsum;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted mean of `BCE(sigmoid(z), target)`, computed stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F], weights: &[F]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape("bce_with_logits: target count".into()));
        }
        let wsum: F = weights.iter().copied().sum();
        let mut loss = F::zero();
        for ((&z, &t), &w) in self.value(logits).data().iter().zip(targets).zip(weights) {
            if w != F::zero() {
                loss += w * bce_logit(z, t);
            }
        }
        if wsum > F::zero() {
            loss = loss / wsum;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = F::from_usize(t.numel().max(1)).unwrap();
        let out = Tensor::scalar(t.sq_norm() / n);
        Ok(self.push(out, Op::MeanSquare(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push(out, Op::Sum(a)))
    }

    /// Exact reverse-mode gradients of a scalar `loss` for every parameter in
    /// `store`. Parameters the loss does not reach get zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore<F>) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        if let Some(op) = self.poisoned {
            return Err(Error::NonFinite(format!("forward op {op}")));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads)?;
            // keep parameter gradients for collection below
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let mut out = BTreeMap::new();
        for (name, t) in store.iter() {
            let g = match self.params.get(name).and_then(|v| grads[v.0].take()) {
                Some(g) => Tensor::new(t.shape().to_vec(), g)?,
                None => Tensor::zeros(t.shape()),
            };
            out.insert(name.clone(), g);
        }
        let grads = Gradients { grads: out };
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                matmul_bt_into(g, bv, acc(grads, *a, m * k), m, n, k);
                matmul_at_into(av, g, acc(grads, *b, k * n), m, k, n);
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // C = A·Bᵀ: dA = dC · B ; dB = dCᵀ · A
                matmul_into(g, bv, acc(grads, *a, m * k), m, n, k);
                matmul_at_into(g, av, acc(grads, *b, n * k), m, n, k);
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g, F::one());
                add_into(acc(grads, *b, g.len()), g, F::one());
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g, F::one());
                add_into(acc(grads, *b, g.len()), g, -F::one());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::AddRow(a, bias) => {
                let (m, n) = self.dims(*a);
                add_into(acc(grads, *a, g.len()), g, F::one());
                let gb = acc(grads, *bias, n);
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
            }
            Op::Scale(a, c) => {
                add_into(acc(grads, *a, g.len()), g, *c);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    if av[i] > F::zero() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gamma).data().to_vec();
                let nf = F::from_usize(n).unwrap();
                {
                    let gg = acc(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let gbeta = acc(grads, *beta, n);
                    for i in 0..m {
                        for j in 0..n {
                            gbeta[j] += g[i * n + j];
                        }
                    }
                }
                let gx = acc(grads, *x, m * n);
                let mut dxhat = vec![F::zero(); n];
                for i in 0..m {
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..n {
                        dxhat[j] = g[i * n + j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[i * n + j];
                    }
                    mean_d = mean_d / nf;
                    mean_dx = mean_dx / nf;
                    for j in 0..n {
                        gx[i * n + j] +=
                            inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let (m, n) = self.dims(*x);
                let y = node.value.data();
                let gx = acc(grads, *x, m * n);
                for i in 0..m {
                    let dot: F = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let (v, d) = self.dims(*table);
                let gt = acc(grads, *table, v * d);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let (m, n) = self.dims(*x);
                let y = node.value.data();
                let gx = acc(grads, *x, m * n);
                for i in 0..m {
                    if norms[i] == F::zero() {
                        continue;
                    }
                    let dot: F = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        gx[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norms[i];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let gp = acc(grads, p, m * w);
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let w = node.value.cols();
                let gx = acc(grads, *x, m * n);
                for i in 0..m {
                    for j in 0..w {
                        gx[i * n + start + j] += g[i * w + j];
                    }
                }
            }
            Op::NegSqDist(x, e) => {
                let (m, d) = self.dims(*x);
                let v = self.dims(*e).0;
                let xv = self.value(*x).data();
                let ev = self.value(*e).data();
                let two = F::from_f64c(2.0);
                {
                    let gx = acc(grads, *x, m * d);
                    for i in 0..m {
                        for w in 0..v {
                            let c = g[i * v + w] * two;
                            for k in 0..d {
                                gx[i * d + k] -= c * (xv[i * d + k] - ev[w * d + k]);
                            }
                        }
                    }
                }
                let ge = acc(grads, *e, v * d);
                for i in 0..m {
                    for w in 0..v {
                        let c = g[i * v + w] * two;
                        for k in 0..d {
                            ge[w * d + k] += c * (xv[i * d + k] - ev[w * d + k]);
                        }
                    }
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (m, v) = self.dims(*logits);
                let wsum: F = weights.iter().copied().sum();
                if wsum > F::zero() {
                    let gl = acc(grads, *logits, m * v);
                    for i in 0..m {
                        let c = g[0] * weights[i] / wsum;
                        if c == F::zero() {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets[i] { F::one() } else { F::zero() };
                            gl[i * v + j] += c * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let wsum: F = weights.iter().copied().sum();
                if wsum > F::zero() {
                    let z = self.value(*logits).data();
                    let gl = acc(grads, *logits, z.len());
                    for i in 0..z.len() {
                        gl[i] += g[0] * weights[i] / wsum * (sigmoid(z[i]) - targets[i]);
                    }
                }
            }
            Op::MeanSquare(a) => {
                let av = self.value(*a).data();
                let n = F::from_usize(av.len().max(1)).unwrap();
                let c = g[0] * F::from_f64c(2.0) / n;
                let ga = acc(grads, *a, av.len());
                for i in 0..av.len() {
                    ga[i] += c * av[i];
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let ga = acc(grads, *a, n);
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Ok(())
    }
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F], c: F) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `−[t·ln σ(z) + (1−t)·ln(1−σ(z))]` without overflow.
pub fn bce_logit<F: Real>(z: F, t: F) -> F {
    z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln()
}

/// Row-wise softmax over entries where `mask` is true; other entries are 0.
///
/// Uses max-subtraction, so adding a constant to all valid logits of a row
/// leaves the result unchanged.
pub fn masked_softmax<F: Real>(logits: &Tensor<F>, mask: &[bool]) -> Result<Tensor<F>> {
    if mask.len() != logits.numel() {
        return Err(Error::Shape(format!(
            "mask of {} for {:?}",
            mask.len(),
            logits.shape()
        )));
    }
    let (m, n) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..m {
        let row = logits.row(i);
        let mrow = &mask[i * n..(i + 1) * n];
        let mx = row
            .iter()
            .zip(mrow)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(F::neg_infinity(), F::max);
        if mx == F::neg_infinity() {
            return Err(Error::FullyMasked { row: i });
        }
        let orow = out.row_mut(i);
        let mut z = F::zero();
        for j in 0..n {
            if mrow[j] {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                z += e;
            }
        }
        for v in orow.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone());
        }
        s
    }

    #[test]
    fn square_derivative() {
        let s = store(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &s).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn product_derivative() {
        let s = store(&[("x", Tensor::scalar(2.0)), ("y", Tensor::scalar(5.0))]);
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let y = g.param(&s, "y").unwrap();
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z, &s).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 5.0);
        assert_eq!(grads.get("y").unwrap().item(), 2.0);
    }

    #[test]
    fn unused_param_gets_zero_and_nonscalar_is_rejected() {
        let s = store(&[("x", Tensor::scalar(2.0)), ("unused", Tensor::zeros(&[2, 2]))]);
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let y = g.scale(x, 4.0).unwrap();
        let grads = g.backward(y, &s).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 4]);

        let mut g = Graph::new();
        let m = g.param(&s, "unused").unwrap();
        assert!(matches!(g.backward(m, &s), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let s = store(&[("x", Tensor::scalar(f64::MAX))]);
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.poisoned(), Some("mul"));
        assert!(matches!(g.backward(y, &s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_edge_cases() {
        let t = Tensor::from_rows(&[vec![5.0, 1.0, 2.0]]);
        let p = masked_softmax(&t, &[false, true, false]).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0]);

        let t = Tensor::from_rows(&[vec![0.3; 4]]);
        let p = masked_softmax(&t, &[true; 4]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25f64).abs() < 1e-15));

        assert!(matches!(
            masked_softmax(&t, &[false; 4]),
            Err(Error::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let p = masked_softmax(&t, &[true; 3]).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let oracle = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in p.data().iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_logit_is_stable() {
        assert!((bce_logit(0.0f64, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_logit(800.0f64, 1.0) < 1e-300);
        assert!((bce_logit(-800.0f64, 1.0) - 800.0).abs() < 1e-9);
    }
}
