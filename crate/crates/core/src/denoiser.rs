//! The x0-predicting denoiser: a post-norm transformer decoder whose
//! self-attention runs over the relation slots and whose cross-attention
//! reads the projected pair conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::relvocab::RelationVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent width; equals the embedding width and the mock feature width.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Hidden width of the two-layer condition encoder.
    pub tau_hidden: usize,
    /// Relation slots per image.
    pub seq_len: usize,
    pub d_feat: usize,
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        Self {
            d: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            tau_hidden: 128,
            seq_len: 8,
            d_feat: 32,
            steps: 200,
        }
    }

    /// Raw condition width: subject, object and union visual features plus
    /// subject and object text features.
    pub fn d_y(&self) -> usize {
        5 * self.d_feat
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("tau_hidden", self.tau_hidden),
            ("seq_len", self.seq_len),
            ("d_feat", self.d_feat),
            ("steps", self.steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::config("n_heads", "must divide d"));
        }
        if self.d_feat != self.d {
            return Err(Error::config(
                "d_feat",
                "must equal d (relation embeddings are compared with union features)",
            ));
        }
        Ok(())
    }
}

/// Per-pair conditioning, zero-padded to `L` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    /// `L × d_y`; rows past `n` are zero.
    pub y: Tensor<f64>,
    /// `L × d_feat` union-region features; valid rows unit norm, padded rows zero.
    pub y_so: Tensor<f64>,
    pub mask: Vec<bool>,
    pub n: usize,
}

impl ConditionSet {
    pub fn new(pairs_y: &[Vec<f64>], pairs_so: &[Vec<f64>], len: usize) -> Result<Self> {
        if pairs_y.len() != pairs_so.len() {
            return Err(Error::Invalid("condition row counts differ".into()));
        }
        let n = pairs_y.len().min(len);
        let dy = pairs_y.first().map_or(0, Vec::len);
        let df = pairs_so.first().map_or(0, Vec::len);
        let mut y = Tensor::zeros(&[len, dy]);
        let mut y_so = Tensor::zeros(&[len, df]);
        for j in 0..n {
            if pairs_y[j].len() != dy || pairs_so[j].len() != df {
                return Err(Error::Shape("ragged condition rows".into()));
            }
            y.row_mut(j).copy_from_slice(&pairs_y[j]);
            y_so.row_mut(j).copy_from_slice(&pairs_so[j]);
            crate::numerics::normalize_in_place(y_so.row_mut(j));
        }
        let mask = (0..len).map(|j| j < n).collect();
        Ok(Self { y, y_so, mask, n })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        if self.y.rows() != cfg.seq_len || self.y.cols() != cfg.d_y() {
            return Err(Error::Shape(format!(
                "condition y is {:?}, expected [{}, {}]",
                self.y.shape(),
                cfg.seq_len,
                cfg.d_y()
            )));
        }
        if self.y_so.rows() != cfg.seq_len || self.y_so.cols() != cfg.d_feat {
            return Err(Error::Shape("condition y_so width".into()));
        }
        if self.mask.len() != cfg.seq_len || self.n > cfg.seq_len {
            return Err(Error::Invalid("condition mask length".into()));
        }
        for j in 0..cfg.seq_len {
            if !self.mask[j] && self.y.row(j).iter().any(|&v| v != 0.0) {
                return Err(Error::Invalid(format!("padded condition row {j} not zero")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn time_embedding<F: Real>(t: usize, d: usize) -> Tensor<F> {
    let half = d / 2;
    Tensor::from_fn(&[1, d], |k| {
        let i = (k / 2).min(half.saturating_sub(1));
        let freq = (-(10000f64.ln()) * (2 * i) as f64 / d as f64).exp();
        let a = t as f64 * freq;
        F::from_f64c(if k % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Denoiser, condition encoder, and relation embedding table.
#[derive(Clone, Debug)]
pub struct RelationModel<F> {
    pub config: DenoiserConfig,
    pub params: ParamStore<F>,
    pub phrases: Vec<String>,
    pub sigma0: f64,
    pub tau_r: f64,
}

pub const EMB_TABLE: &str = "emb.table";

fn xavier<F: Real>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<F> {
    use rand::Rng as _;
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| F::from_f64c(rng.random_range(-a..a)))
}

impl<F: Real> RelationModel<F> {
    /// Fresh parameters; the embedding table starts from `vocab`.
    pub fn init(
        config: DenoiserConfig,
        vocab: &RelationVocabulary<F>,
        tau_r: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.dim() != config.d {
            return Err(Error::config(
                "d",
                format!("vocabulary width {} != d {}", vocab.dim(), config.d),
            ));
        }
        let d = config.d;
        let mut p = ParamStore::new();
        p.insert("tau.w1", xavier(config.d_y(), config.tau_hidden, rng));
        p.insert("tau.b1", Tensor::zeros(&[config.tau_hidden]));
        p.insert("tau.w2", xavier(config.tau_hidden, d, rng));
        p.insert("tau.b2", Tensor::zeros(&[d]));
        p.insert("denoiser.in.w", xavier(d, d, rng));
        p.insert("denoiser.in.b", Tensor::zeros(&[d]));
        for l in 0..config.n_layers {
            for block in ["self", "cross"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    p.insert(format!("denoiser.l{l}.{block}.{w}"), xavier(d, d, rng));
                }
                p.insert(format!("denoiser.l{l}.{block}.bo"), Tensor::zeros(&[d]));
            }
            p.insert(format!("denoiser.l{l}.ffn.w1"), xavier(d, config.ffn_dim, rng));
            p.insert(format!("denoiser.l{l}.ffn.b1"), Tensor::zeros(&[config.ffn_dim]));
            p.insert(format!("denoiser.l{l}.ffn.w2"), xavier(config.ffn_dim, d, rng));
            p.insert(format!("denoiser.l{l}.ffn.b2"), Tensor::zeros(&[d]));
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(format!("denoiser.l{l}.{ln}.g"), Tensor::full(&[d], F::one()));
                p.insert(format!("denoiser.l{l}.{ln}.b"), Tensor::zeros(&[d]));
            }
        }
        p.insert("denoiser.out.w", xavier(d, d, rng));
        p.insert("denoiser.out.b", Tensor::zeros(&[d]));
        p.insert(EMB_TABLE, vocab.embeddings().clone());
        Ok(Self {
            config,
            params: p,
            phrases: vocab.phrases().to_vec(),
            sigma0: vocab.sigma0,
            tau_r,
        })
    }

    /// Vocabulary view over the current embedding table.
    pub fn vocabulary(&self) -> Result<RelationVocabulary<F>> {
        RelationVocabulary::new(
            self.phrases.clone(),
            self.params.get(EMB_TABLE)?.clone(),
            self.sigma0,
        )
    }

    pub fn cast<G: Real>(&self) -> RelationModel<G> {
        RelationModel {
            config: self.config,
            params: self.params.cast(),
            phrases: self.phrases.clone(),
            sigma0: self.sigma0,
            tau_r: self.tau_r,
        }
    }

    fn p(&self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        g.param(&self.params, name)
    }

    /// Row-wise two-layer ReLU MLP over the raw conditions (`L × d`).
    pub fn encode_conditions_graph(&self, g: &mut Graph<F>, cond: &ConditionSet) -> Result<Var> {
        if cond.y.cols() != self.config.d_y() {
            return Err(Error::Shape(format!(
                "condition width {} != d_y {}",
                cond.y.cols(),
                self.config.d_y()
            )));
        }
        let y = g.constant(cond.y.cast());
        let (w1, b1) = (self.p(g, "tau.w1")?, self.p(g, "tau.b1")?);
        let (w2, b2) = (self.p(g, "tau.w2")?, self.p(g, "tau.b2")?);
        let h = g.linear(y, w1, Some(b1))?;
        let h = g.relu(h)?;
        g.linear(h, w2, Some(b2))
    }

    pub fn encode_conditions(&self, cond: &ConditionSet) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let c = self.encode_conditions_graph(&mut g, cond)?;
        Ok(g.value(c).clone())
    }

    /// Multi-head attention of `queries` over `memory`; `key_mask` hides
    /// memory rows.
    pub fn attention_graph(
        &self,
        g: &mut Graph<F>,
        prefix: &str,
        queries: Var,
        memory: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let d = self.config.d;
        let dh = d / heads;
        let wq = self.p(g, &format!("{prefix}.wq"))?;
        let wk = self.p(g, &format!("{prefix}.wk"))?;
        let wv = self.p(g, &format!("{prefix}.wv"))?;
        let wo = self.p(g, &format!("{prefix}.wo"))?;
        let bo = self.p(g, &format!("{prefix}.bo"))?;
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let rows = g.value(q).rows();
        let keys = g.value(k).rows();
        let mask: Vec<bool> = match key_mask {
            Some(m) => {
                if m.len() != keys {
                    return Err(Error::Shape("attention key mask".into()));
                }
                if !m.iter().any(|&b| b) {
                    return Err(Error::FullyMasked { row: 0 });
                }
                (0..rows).flat_map(|_| m.iter().copied()).collect()
            }
            None => vec![true; rows * keys],
        };
        let scale = F::from_f64c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = g.masked_softmax(s, &mask)?;
            outs.push(g.matmul(a, vh)?);
        }
        let o = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.linear(o, wo, Some(bo))
    }

    fn residual_norm(&self, g: &mut Graph<F>, x: Var, delta: Var, ln: &str) -> Result<Var> {
        let s = g.add(x, delta)?;
        let gamma = self.p(g, &format!("{ln}.g"))?;
        let beta = self.p(g, &format!("{ln}.b"))?;
        g.layer_norm(s, gamma, beta)
    }

    /// `f(x_t, t, tau(y))` on the tape; `encoded` is the output of
    /// [`Self::encode_conditions_graph`].
    pub fn denoise_graph(
        &self,
        g: &mut Graph<F>,
        x_t: Var,
        t: usize,
        encoded: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let cfg = &self.config;
        if t < 1 || t > cfg.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: cfg.steps,
            });
        }
        let cols = g.value(x_t).cols();
        if cols != cfg.d {
            return Err(Error::Shape(format!("x_t width {cols} != d {}", cfg.d)));
        }
        let w_in = self.p(g, "denoiser.in.w")?;
        let b_in = self.p(g, "denoiser.in.b")?;
        let mut h = g.linear(x_t, w_in, Some(b_in))?;
        let temb = g.constant(time_embedding(t, cfg.d));
        h = g.add_row(h, temb)?;
        for l in 0..cfg.n_layers {
            let sa = self.attention_graph(g, &format!("denoiser.l{l}.self"), h, h, None)?;
            h = self.residual_norm(g, h, sa, &format!("denoiser.l{l}.ln1"))?;
            let ca = self.attention_graph(
                g,
                &format!("denoiser.l{l}.cross"),
                h,
                encoded,
                Some(mask),
            )?;
            h = self.residual_norm(g, h, ca, &format!("denoiser.l{l}.ln2"))?;
            let w1 = self.p(g, &format!("denoiser.l{l}.ffn.w1"))?;
            let b1 = self.p(g, &format!("denoiser.l{l}.ffn.b1"))?;
            let w2 = self.p(g, &format!("denoiser.l{l}.ffn.w2"))?;
            let b2 = self.p(g, &format!("denoiser.l{l}.ffn.b2"))?;
            let f = g.linear(h, w1, Some(b1))?;
            let f = g.relu(f)?;
            let f = g.linear(f, w2, Some(b2))?;
            h = self.residual_norm(g, h, f, &format!("denoiser.l{l}.ln3"))?;
        }
        let w_out = self.p(g, "denoiser.out.w")?;
        let b_out = self.p(g, "denoiser.out.b")?;
        g.linear(h, w_out, Some(b_out))
    }

    /// Forward-only x0 prediction.
    pub fn denoise(&self, x_t: &Tensor<F>, t: usize, cond: &ConditionSet) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let enc = self.encode_conditions_graph(&mut g, cond)?;
        let x = g.constant(x_t.clone());
        let out = self.denoise_graph(&mut g, x, t, enc, &cond.mask)?;
        if let Some(op) = g.poisoned() {
            return Err(Error::NonFinite(format!("denoise: {op}")));
        }
        Ok(g.value(out).clone())
    }

    /// Forward-only prediction reusing an already encoded condition tensor.
    pub fn denoise_encoded(
        &self,
        x_t: &Tensor<F>,
        t: usize,
        encoded: &Tensor<F>,
        mask: &[bool],
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let enc = g.constant(encoded.clone());
        let x = g.constant(x_t.clone());
        let out = self.denoise_graph(&mut g, x, t, enc, mask)?;
        if let Some(op) = g.poisoned() {
            return Err(Error::NonFinite(format!("denoise: {op}")));
        }
        Ok(g.value(out).clone())
    }
}
