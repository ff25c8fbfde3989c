//! Causal self-attention sequence encoder.
//!
//! Tokens are embedded, summed with a positional embedding indexed from the
//! first real item, and passed through pre-norm transformer blocks. The
//! representation `f(s)` of a sequence is the final-layer output at its last
//! position. Item scores reuse the input embedding table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{token, PADDING};
use crate::error::{Error, Result};
use crate::graph::{AttentionLayout, Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::seed::mix;
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Number of items plus the padding token.
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn new(num_items: usize, max_len: usize) -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            max_len,
            vocab_size: num_items + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.max_len == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 2 {
            return bad("vocabulary must contain at least one item".into());
        }
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        self.vocab_size - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    Stochastic(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewKind {
    Original,
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRepr {
    pub vector: Vec<f64>,
    pub view: ViewKind,
    pub seed: Option<u64>,
}

pub const ITEM_EMB: &str = "item_emb";
pub const POS_EMB: &str = "pos_emb";

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn layer_name(l: usize, part: &str) -> String {
    format!("layer{l}.{part}")
}

/// Draws dropout masks in a fixed order from one seed.
struct MaskSource {
    rng: Option<ChaCha8Rng>,
    keep_scale: f64,
    rate: f64,
}

impl MaskSource {
    fn new(mode: DropoutMode, rate: f64) -> Self {
        let rng = match mode {
            DropoutMode::Stochastic(seed) if rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Self {
            rng,
            keep_scale: 1.0 / (1.0 - rate),
            rate,
        }
    }

    fn mask(&mut self, rows: usize, cols: usize) -> Option<Tensor> {
        let rng = self.rng.as_mut()?;
        let (rate, keep) = (self.rate, self.keep_scale);
        Some(Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect(),
        ))
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let (r, c) = g.value(x).shape();
        match self.mask(r, c) {
            Some(m) => g.mul_const(x, m),
            None => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Encoder {
    /// Embeddings ~ U(−1/√D, 1/√D) with a zero padding row; projections
    /// ~ U(−1/√fan_in, 1/√fan_in); zero biases; unit layer-norm scales.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_bound = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();
        let mut items = uniform(&mut rng, config.vocab_size, d, emb_bound);
        items.row_mut(PADDING).fill(0.0);
        params.push(ITEM_EMB, items);
        params.push(POS_EMB, uniform(&mut rng, config.max_len, d, emb_bound));
        for l in 0..config.layers {
            params.push(layer_name(l, "ln1.gamma"), Tensor::filled(1, d, 1.0));
            params.push(layer_name(l, "ln1.beta"), Tensor::zeros(1, d));
            for w in ["wq", "wk", "wv", "wo", "w1", "w2"] {
                params.push(layer_name(l, w), uniform(&mut rng, d, d, emb_bound));
                params.push(
                    layer_name(l, &w.replacen('w', "b", 1)),
                    Tensor::zeros(1, d),
                );
            }
            params.push(layer_name(l, "ln2.gamma"), Tensor::filled(1, d, 1.0));
            params.push(layer_name(l, "ln2.beta"), Tensor::zeros(1, d));
        }
        params.push("final_ln.gamma", Tensor::filled(1, d, 1.0));
        params.push("final_ln.beta", Tensor::zeros(1, d));
        Ok(Self { config, params })
    }

    /// Checks row shapes and returns the first non-padding position of each.
    pub fn validate_rows(&self, rows: &[Vec<usize>]) -> Result<Vec<usize>> {
        let l = self.config.max_len;
        rows.iter()
            .enumerate()
            .map(|(r, row)| {
                if row.len() != l {
                    return Err(Error::InvalidArgument(format!(
                        "row {r} has length {} but the encoder expects {l}",
                        row.len()
                    )));
                }
                let start = row.iter().take_while(|&&t| t == PADDING).count();
                if start == l {
                    return Err(Error::EmptySequence { row: r });
                }
                if let Some(t) = row[start..]
                    .iter()
                    .find(|&&t| t == PADDING || t >= self.config.vocab_size)
                {
                    return Err(Error::InvalidArgument(format!(
                        "row {r} has token {t} after its first item (vocab {})",
                        self.config.vocab_size
                    )));
                }
                Ok(start)
            })
            .collect()
    }

    /// Builds the encoder on `g` and returns the `N × D` representations.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        rows: &[Vec<usize>],
        mode: DropoutMode,
    ) -> Result<Var> {
        let n = rows.len();
        let l = self.config.max_len;
        let h = self.hidden_states(g, p, rows, mode)?;
        let last: Vec<usize> = (0..n).map(|r| r * l + l - 1).collect();
        Ok(g.gather_rows(h, &last))
    }

    /// Final-layer states of every position, `(N·L) × D`.
    pub fn hidden_states(
        &self,
        g: &mut Graph,
        p: &Bound,
        rows: &[Vec<usize>],
        mode: DropoutMode,
    ) -> Result<Var> {
        let starts = self.validate_rows(rows)?;
        Ok(self.forward_validated(g, p, rows, &starts, mode))
    }

    fn forward_validated(
        &self,
        g: &mut Graph,
        p: &Bound,
        rows: &[Vec<usize>],
        starts: &[usize],
        mode: DropoutMode,
    ) -> Var {
        let cfg = &self.config;
        let (n, l, d) = (rows.len(), cfg.max_len, cfg.dim);
        let mut drop = MaskSource::new(mode, cfg.dropout);

        let tokens: Vec<usize> = rows.iter().flatten().copied().collect();
        let positions: Vec<usize> = starts
            .iter()
            .flat_map(|&s| (0..l).map(move |i| i.saturating_sub(s)))
            .collect();
        let mut timeline = Tensor::zeros(n * l, d);
        for (r, &s) in starts.iter().enumerate() {
            for i in s..l {
                timeline.row_mut(r * l + i).fill(1.0);
            }
        }

        let emb = g.gather_rows(p.var(ITEM_EMB), &tokens);
        let pos = g.gather_rows(p.var(POS_EMB), &positions);
        let mut x = g.add(emb, pos);
        x = drop.apply(g, x);
        x = g.mul_const(x, timeline.clone());

        for layer in 0..cfg.layers {
            let v = |name: &str| p.var(&layer_name(layer, name));
            let h = g.layer_norm(x, v("ln1.gamma"), v("ln1.beta"));
            let q = g.linear(h, v("wq"), v("bq"));
            let k = g.linear(h, v("wk"), v("bk"));
            let val = g.linear(h, v("wv"), v("bv"));
            let attn_mask = drop.mask(1, n * cfg.heads * l * l);
            let layout = AttentionLayout {
                heads: cfg.heads,
                seq_len: l,
                starts: starts.to_vec(),
            };
            let a = g.attention(q, k, val, layout, attn_mask);
            let a = g.linear(a, v("wo"), v("bo"));
            let a = drop.apply(g, a);
            x = g.add(x, a);

            let h2 = g.layer_norm(x, v("ln2.gamma"), v("ln2.beta"));
            let f = g.linear(h2, v("w1"), v("b1"));
            let f = g.gelu(f);
            let f = g.linear(f, v("w2"), v("b2"));
            let f = drop.apply(g, f);
            x = g.add(x, f);
            x = g.mul_const(x, timeline.clone());
        }
        g.layer_norm(x, p.var("final_ln.gamma"), p.var("final_ln.beta"))
    }

    /// Representations for a batch of padded token rows.
    pub fn encode(&self, rows: &[Vec<usize>], mode: DropoutMode) -> Result<Vec<SequenceRepr>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, rows, mode)?;
        let (view, seed) = match mode {
            DropoutMode::Off => (ViewKind::Original, None),
            DropoutMode::Stochastic(s) => (ViewKind::Augmented, Some(s)),
        };
        Ok(g.value(out)
            .to_rows()
            .into_iter()
            .map(|vector| SequenceRepr { vector, view, seed })
            .collect())
    }

    /// Like [`Encoder::encode`] but processes rows in chunks and returns the
    /// plain `N × D` matrix; used by evaluation.
    pub fn encode_matrix(&self, rows: &[Vec<usize>], chunk: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.config.dim);
        for part in rows.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let out = self.forward(&mut g, &p, part, DropoutMode::Off)?;
            data.extend_from_slice(g.value(out).data());
        }
        Ok(Tensor::from_vec(rows.len(), self.config.dim, data))
    }

    /// Inner products of `repr` with the embeddings of `candidates` (dense
    /// item indices).
    pub fn score_items(&self, repr: &[f64], candidates: &[usize]) -> Vec<f64> {
        let table = self.params.get(ITEM_EMB).expect("item table");
        candidates
            .iter()
            .map(|&c| {
                table
                    .row(token(c))
                    .iter()
                    .zip(repr)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Scores of every representation row against every item, `N × n_items`.
    pub fn score_all(&self, reprs: &Tensor) -> Tensor {
        let table = self.params.get(ITEM_EMB).expect("item table");
        let items = Tensor::from_vec(
            table.rows() - 1,
            table.cols(),
            table.data()[table.cols()..].to_vec(),
        );
        matmul(reprs, false, &items, true)
    }

    /// Evaluates `loss_head` on the encoder outputs and returns the loss and
    /// the gradient of every encoder parameter (in [`ParamSet`] order).
    /// Dropout masks are drawn once and shared by the forward and backward
    /// pass.
    pub fn forward_backward<F>(
        &self,
        rows: &[Vec<usize>],
        mode: DropoutMode,
        batch_id: usize,
        loss_head: F,
    ) -> Result<(f64, Vec<Tensor>)>
    where
        F: FnOnce(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, rows, mode)?;
        let loss = loss_head(&mut g, out);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { batch: batch_id });
        }
        let mut grads = g.backward(loss);
        let tensors = p
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Ok((value, tensors))
    }
}

/// Seed for one view of one training step.
pub fn view_seed(run_seed: u64, step: u64, view: u64) -> u64 {
    mix(mix(run_seed, step), view)
}
