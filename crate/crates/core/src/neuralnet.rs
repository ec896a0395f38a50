//! Embedding → LSTM → tanh MLP → softmax classifier with hand-written
//! backpropagation.
//!
//! Weight matrices are stored input-major (`in × out`) and a minibatch of
//! equal-length sequences is processed together, so every step is a
//! matrix-matrix product. The representation read-out is the tanh MLP
//! activation that feeds the classifier head.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TokenId;
use crate::error::{Error, Result};
use crate::linalg::{axpy, gemm, log_sum_exp, softmax_in_place, Matrix, Op};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// Single-layer gated recurrent cell; the last hidden state feeds the MLP.
    Lstm,
    /// Mean of token embeddings; cheap baseline for debugging.
    MeanPool,
}

fn default_embed() -> usize {
    32
}
fn default_hidden() -> usize {
    64
}
fn default_mlp() -> usize {
    64
}
fn default_init() -> f64 {
    0.1
}
fn default_encoder() -> Encoder {
    Encoder::Lstm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_mlp")]
    pub mlp_hidden: usize,
    pub n_classes: usize,
    #[serde(default = "default_init")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_encoder")]
    pub encoder: Encoder,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            mlp_hidden: default_mlp(),
            n_classes,
            init_scale: default_init(),
            seed: 0,
            encoder: Encoder::Lstm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Width of the vector entering the MLP.
    pub fn encoder_width(&self) -> usize {
        match self.encoder {
            Encoder::Lstm => self.hidden_dim,
            Encoder::MeanPool => self.embed_dim,
        }
    }
}

/// All trainable tensors, in declaration order. Also used for gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub embedding: Matrix<T>,
    pub lstm_input: Matrix<T>,
    pub lstm_recurrent: Matrix<T>,
    pub lstm_bias: Matrix<T>,
    pub mlp_weight: Matrix<T>,
    pub mlp_bias: Matrix<T>,
    pub head_weight: Matrix<T>,
    pub head_bias: Matrix<T>,
}

pub const BLOCK_NAMES: [&str; 8] = [
    "embedding",
    "lstm_input",
    "lstm_recurrent",
    "lstm_bias",
    "mlp_weight",
    "mlp_bias",
    "head_weight",
    "head_bias",
];

impl<T: Scalar> Parameters<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h, m, k) = (cfg.embed_dim, cfg.hidden_dim, cfg.mlp_hidden, cfg.n_classes);
        let lstm = cfg.encoder == Encoder::Lstm;
        let gates = if lstm { 4 * h } else { 0 };
        Self {
            embedding: Matrix::zeros(cfg.vocab_size, e),
            lstm_input: Matrix::zeros(if lstm { e } else { 0 }, gates),
            lstm_recurrent: Matrix::zeros(if lstm { h } else { 0 }, gates),
            lstm_bias: Matrix::zeros(usize::from(lstm), gates),
            mlp_weight: Matrix::zeros(cfg.encoder_width(), m),
            mlp_bias: Matrix::zeros(1, m),
            head_weight: Matrix::zeros(m, k),
            head_bias: Matrix::zeros(1, k),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &Matrix<T>); 8] {
        [
            (BLOCK_NAMES[0], &self.embedding),
            (BLOCK_NAMES[1], &self.lstm_input),
            (BLOCK_NAMES[2], &self.lstm_recurrent),
            (BLOCK_NAMES[3], &self.lstm_bias),
            (BLOCK_NAMES[4], &self.mlp_weight),
            (BLOCK_NAMES[5], &self.mlp_bias),
            (BLOCK_NAMES[6], &self.head_weight),
            (BLOCK_NAMES[7], &self.head_bias),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 8] {
        [
            (BLOCK_NAMES[0], &mut self.embedding),
            (BLOCK_NAMES[1], &mut self.lstm_input),
            (BLOCK_NAMES[2], &mut self.lstm_recurrent),
            (BLOCK_NAMES[3], &mut self.lstm_bias),
            (BLOCK_NAMES[4], &mut self.mlp_weight),
            (BLOCK_NAMES[5], &mut self.mlp_bias),
            (BLOCK_NAMES[6], &mut self.head_weight),
            (BLOCK_NAMES[7], &mut self.head_bias),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for (_, b) in self.blocks_mut() {
            b.as_mut_slice().fill(T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, b) in self.blocks_mut() {
            b.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Name of the first block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.blocks()
            .iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(n, _)| *n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

/// One training input: a token sequence, its label, an importance weight and
/// an optional additive offset on the logits (used for product-of-experts).
#[derive(Clone, Debug)]
pub struct Batch<'a, T> {
    pub inputs: Vec<&'a [TokenId]>,
    pub labels: Vec<usize>,
    pub weights: Vec<T>,
    pub logit_offsets: Option<Vec<Vec<T>>>,
}

impl<'a, T: Scalar> Batch<'a, T> {
    pub fn new(inputs: Vec<&'a [TokenId]>, labels: Vec<usize>) -> Self {
        let n = inputs.len();
        Self {
            inputs,
            labels,
            weights: vec![T::one(); n],
            logit_offsets: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_offsets(mut self, offsets: Vec<Vec<T>>) -> Self {
        self.logit_offsets = Some(offsets);
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.labels.len() != self.inputs.len() || self.weights.len() != self.inputs.len() {
            return Err(Error::Argument("batch field lengths differ".into()));
        }
        if let Some(o) = &self.logit_offsets {
            if o.len() != self.inputs.len() {
                return Err(Error::Argument("logit offsets length differs".into()));
            }
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= T::zero())) {
            return Err(Error::Argument(format!(
                "example weights must be nonnegative, got {w}"
            )));
        }
        Ok(())
    }
}

/// Activations of a batch of equal-length sequences, kept for the backward
/// pass. Per-step buffers are `batch × width`, row-major, stacked over steps.
struct Trace<T> {
    batch: usize,
    steps: usize,
    /// `batch × steps`, row-major.
    tokens: Vec<TokenId>,
    /// Embedding rows fed to the cell, per step.
    inputs: Vec<T>,
    /// Post-activation gates per step, each row `[i | f | g | o]`.
    gates: Vec<T>,
    /// Cell states, `c_0 = 0` first.
    cells: Vec<T>,
    /// Hidden states, `h_0 = 0` first.
    hidden: Vec<T>,
    encoded: Vec<T>,
    rep: Vec<T>,
    logits: Vec<T>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn broadcast_rows<T: Scalar>(row: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        out.extend_from_slice(row);
    }
    out
}

fn add_column_sums<T: Scalar>(m: &[T], cols: usize, out: &mut [T]) {
    for r in m.chunks_exact(cols) {
        axpy(T::one(), r, out);
    }
}

/// Rows scored per forward call when evaluating many sequences.
const SCORE_CHUNK: usize = 256;

impl<T: Scalar> ModelState<T> {
    /// Parameters drawn uniformly from `[-init_scale, init_scale]`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.init_scale;
        for (_, block) in params.blocks_mut() {
            for x in block.as_mut_slice() {
                *x = if s > 0.0 {
                    T::of(rng.gen_range(-s..=s))
                } else {
                    T::zero()
                };
            }
        }
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::zeros(&config);
        Ok(Self { config, params })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn run(&self, seqs: &[&[TokenId]]) -> Result<Trace<T>> {
        let b = seqs.len();
        let steps = seqs.first().map_or(0, |s| s.len());
        for s in seqs {
            self.check_tokens(s)?;
            if s.len() != steps {
                return Err(Error::Input(
                    "sequences in one batch must have the same length".into(),
                ));
            }
        }
        let tokens: Vec<TokenId> = seqs.concat();
        let p = &self.params;
        let e = self.config.embed_dim;
        let h = self.config.hidden_dim;
        let (inputs, gates, cells, hidden, encoded) = match self.config.encoder {
            Encoder::Lstm => {
                let g4 = 4 * h;
                let mut inputs = vec![T::zero(); steps * b * e];
                let mut gates = vec![T::zero(); steps * b * g4];
                let mut cells = vec![T::zero(); (steps + 1) * b * h];
                let mut hidden = vec![T::zero(); (steps + 1) * b * h];
                for t in 0..steps {
                    let x = &mut inputs[t * b * e..(t + 1) * b * e];
                    for (n, xr) in x.chunks_exact_mut(e).enumerate() {
                        xr.copy_from_slice(p.embedding.row(tokens[n * steps + t] as usize));
                    }
                    let z = &mut gates[t * b * g4..(t + 1) * b * g4];
                    for zr in z.chunks_exact_mut(g4) {
                        zr.copy_from_slice(p.lstm_bias.row(0));
                    }
                    let one = T::one();
                    gemm(b, e, g4, one, x, Op::N, p.lstm_input.as_slice(), Op::N, one, z);
                    if t > 0 {
                        let h_prev = &hidden[t * b * h..(t + 1) * b * h];
                        let w = p.lstm_recurrent.as_slice();
                        gemm(b, h, g4, one, h_prev, Op::N, w, Op::N, one, z);
                    }
                    let (c_done, c_rest) = cells.split_at_mut((t + 1) * b * h);
                    let c_prev = &c_done[t * b * h..];
                    let c_next = &mut c_rest[..b * h];
                    let h_next = &mut hidden[(t + 1) * b * h..(t + 2) * b * h];
                    for n in 0..b {
                        let zr = &mut z[n * g4..(n + 1) * g4];
                        for v in &mut zr[..2 * h] {
                            *v = sigmoid(*v);
                        }
                        for v in &mut zr[2 * h..3 * h] {
                            *v = v.tanh();
                        }
                        for v in &mut zr[3 * h..] {
                            *v = sigmoid(*v);
                        }
                        for k in 0..h {
                            let c = zr[h + k] * c_prev[n * h + k] + zr[k] * zr[2 * h + k];
                            c_next[n * h + k] = c;
                            h_next[n * h + k] = zr[3 * h + k] * c.tanh();
                        }
                    }
                }
                let encoded = hidden[steps * b * h..].to_vec();
                (inputs, gates, cells, hidden, encoded)
            }
            Encoder::MeanPool => {
                let mut enc = vec![T::zero(); b * e];
                let inv = T::one() / T::of(steps.max(1) as f64);
                for (n, row) in enc.chunks_exact_mut(e).enumerate() {
                    for &tok in &tokens[n * steps..(n + 1) * steps] {
                        axpy(inv, p.embedding.row(tok as usize), row);
                    }
                }
                (vec![], vec![], vec![], vec![], enc)
            }
        };

        let d = self.config.encoder_width();
        let m = self.config.mlp_hidden;
        let k = self.config.n_classes;
        let one = T::one();
        let mut rep = broadcast_rows(p.mlp_bias.row(0), b);
        gemm(b, d, m, one, &encoded, Op::N, p.mlp_weight.as_slice(), Op::N, one, &mut rep);
        rep.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = broadcast_rows(p.head_bias.row(0), b);
        gemm(b, m, k, one, &rep, Op::N, p.head_weight.as_slice(), Op::N, one, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(self.numeric_error());
        }
        Ok(Trace {
            batch: b,
            steps,
            tokens,
            inputs,
            gates,
            cells,
            hidden,
            encoded,
            rep,
            logits,
        })
    }

    /// Logits (`n × K`) and representations (`n × mlp_hidden`) for a batch of
    /// equal-length sequences.
    pub fn forward_batch(&self, seqs: &[&[TokenId]]) -> Result<(Matrix<T>, Matrix<T>)> {
        let tr = self.run(seqs)?;
        Ok((
            Matrix::from_vec(tr.batch, self.config.n_classes, tr.logits),
            Matrix::from_vec(tr.batch, self.config.mlp_hidden, tr.rep),
        ))
    }

    /// Logits and representation for one sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<(Vec<T>, Vec<T>)> {
        let tr = self.run(&[tokens])?;
        Ok((tr.logits, tr.rep))
    }

    /// Logits and representations of any number of sequences, evaluated in
    /// fixed-size chunks.
    pub fn forward_many(&self, seqs: &[&[TokenId]]) -> Result<(Matrix<T>, Matrix<T>)> {
        let mut logits = Vec::with_capacity(seqs.len() * self.config.n_classes);
        let mut reps = Vec::with_capacity(seqs.len() * self.config.mlp_hidden);
        for chunk in seqs.chunks(SCORE_CHUNK) {
            let tr = self.run(chunk)?;
            logits.extend_from_slice(&tr.logits);
            reps.extend_from_slice(&tr.rep);
        }
        Ok((
            Matrix::from_vec(seqs.len(), self.config.n_classes, logits),
            Matrix::from_vec(seqs.len(), self.config.mlp_hidden, reps),
        ))
    }

    pub fn predict(&self, tokens: &[TokenId]) -> Result<usize> {
        Ok(crate::linalg::argmax(&self.forward(tokens)?.0))
    }

    pub fn representation(&self, tokens: &[TokenId]) -> Result<Vec<T>> {
        Ok(self.forward(tokens)?.1)
    }

    fn numeric_error(&self) -> Error {
        let parameter = self
            .params
            .first_non_finite()
            .unwrap_or("forward activations")
            .to_string();
        Error::Numeric {
            parameter,
            detail: "non-finite value in forward pass".into(),
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let k = self.config.n_classes;
        match labels.iter().find(|&&y| y >= k) {
            Some(y) => Err(Error::Input(format!("label {y} >= n_classes {k}"))),
            None => Ok(()),
        }
    }

    /// Offset-adjusted logits turned into probabilities, plus per-example
    /// cross-entropy.
    fn probabilities(&self, batch: &Batch<'_, T>, logits: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let k = self.config.n_classes;
        let mut probs = logits.to_vec();
        let mut losses = Vec::with_capacity(batch.len());
        for (n, z) in probs.chunks_exact_mut(k).enumerate() {
            if let Some(o) = &batch.logit_offsets {
                for (v, &b) in z.iter_mut().zip(&o[n]) {
                    *v += b;
                }
            }
            let l = log_sum_exp(z) - z[batch.labels[n]];
            if !l.is_finite() {
                return Err(self.numeric_error());
            }
            losses.push(l);
            softmax_in_place(z);
        }
        Ok((probs, losses))
    }

    /// Per-example cross-entropy without gradients.
    pub fn losses(&self, batch: &Batch<'_, T>) -> Result<Vec<T>> {
        batch.validate()?;
        self.check_labels(&batch.labels)?;
        let mut out = Vec::with_capacity(batch.len());
        for start in (0..batch.len()).step_by(SCORE_CHUNK) {
            let end = (start + SCORE_CHUNK).min(batch.len());
            let sub = Batch {
                inputs: batch.inputs[start..end].to_vec(),
                labels: batch.labels[start..end].to_vec(),
                weights: batch.weights[start..end].to_vec(),
                logit_offsets: batch.logit_offsets.as_ref().map(|o| o[start..end].to_vec()),
            };
            let tr = self.run(&sub.inputs)?;
            out.extend(self.probabilities(&sub, &tr.logits)?.1);
        }
        Ok(out)
    }

    /// Weighted mean cross-entropy `Σ wᵢ ℓᵢ / Σ wᵢ`; zero when all weights are
    /// zero.
    pub fn loss(&self, batch: &Batch<'_, T>) -> Result<T> {
        let losses = self.losses(batch)?;
        let wsum: T = batch.weights.iter().copied().sum();
        if wsum == T::zero() {
            return Ok(T::zero());
        }
        let total: T = losses.iter().zip(&batch.weights).map(|(&l, &w)| l * w).sum();
        Ok(total / wsum)
    }

    /// Weighted mean cross-entropy and its exact gradient.
    pub fn loss_and_grad(&self, batch: &Batch<'_, T>) -> Result<(T, Parameters<T>)> {
        let mut grads = Parameters::zeros(&self.config);
        let loss = self.loss_and_grad_into(batch, &mut grads)?;
        Ok((loss, grads))
    }

    /// As [`loss_and_grad`](Self::loss_and_grad) but overwrites `grads`.
    pub fn loss_and_grad_into(&self, batch: &Batch<'_, T>, grads: &mut Parameters<T>) -> Result<T> {
        let (loss, _) = self.loss_and_grad_reweighted(batch, grads, |_| Ok(batch.weights.clone()))?;
        Ok(loss)
    }

    /// Two-phase variant: runs the forward pass for the whole batch, hands the
    /// per-example losses to `reweight` to obtain the example weights (which
    /// replace `batch.weights`), then back-propagates the weighted mean.
    /// Returns the weighted mean loss and the weights used.
    pub fn loss_and_grad_reweighted<F>(
        &self,
        batch: &Batch<'_, T>,
        grads: &mut Parameters<T>,
        reweight: F,
    ) -> Result<(T, Vec<T>)>
    where
        F: FnOnce(&[T]) -> Result<Vec<T>>,
    {
        batch.validate()?;
        self.check_labels(&batch.labels)?;
        grads.fill_zero();
        let tr = self.run(&batch.inputs)?;
        let (mut probs, losses) = self.probabilities(batch, &tr.logits)?;
        let weights = reweight(&losses)?;
        if weights.len() != batch.len() {
            return Err(Error::Argument("reweight returned wrong length".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= T::zero())) {
            return Err(Error::Argument(format!(
                "example weights must be nonnegative, got {w}"
            )));
        }
        let wsum: T = weights.iter().copied().sum();
        if wsum == T::zero() {
            return Ok((T::zero(), weights));
        }
        let k = self.config.n_classes;
        let mut total = T::zero();
        for (n, d) in probs.chunks_exact_mut(k).enumerate() {
            let w = weights[n];
            total += w * losses[n];
            d[batch.labels[n]] -= T::one();
            let scale = w / wsum;
            d.iter_mut().for_each(|v| *v *= scale);
        }
        self.backward(&tr, &probs, grads);
        Ok((total / wsum, weights))
    }

    fn backward(&self, tr: &Trace<T>, dlogits: &[T], g: &mut Parameters<T>) {
        let p = &self.params;
        let b = tr.batch;
        let e = self.config.embed_dim;
        let h = self.config.hidden_dim;
        let d = self.config.encoder_width();
        let m = self.config.mlp_hidden;
        let k = self.config.n_classes;
        let (zero, one) = (T::zero(), T::one());

        // head
        add_column_sums(dlogits, k, g.head_bias.row_mut(0));
        gemm(m, b, k, one, &tr.rep, Op::T, dlogits, Op::N, one, g.head_weight.as_mut_slice());
        let mut da = vec![zero; b * m];
        gemm(b, k, m, one, dlogits, Op::N, p.head_weight.as_slice(), Op::T, zero, &mut da);
        for (v, &u) in da.iter_mut().zip(&tr.rep) {
            *v *= one - u * u;
        }
        // MLP
        add_column_sums(&da, m, g.mlp_bias.row_mut(0));
        let gw = g.mlp_weight.as_mut_slice();
        gemm(d, b, m, one, &tr.encoded, Op::T, &da, Op::N, one, gw);
        let mut denc = vec![zero; b * d];
        gemm(b, m, d, one, &da, Op::N, p.mlp_weight.as_slice(), Op::T, zero, &mut denc);

        let steps = tr.steps;
        match self.config.encoder {
            Encoder::MeanPool => {
                let inv = one / T::of(steps as f64);
                for (n, dr) in denc.chunks_exact(d).enumerate() {
                    for &tok in &tr.tokens[n * steps..(n + 1) * steps] {
                        axpy(inv, dr, g.embedding.row_mut(tok as usize));
                    }
                }
            }
            Encoder::Lstm => {
                let g4 = 4 * h;
                let mut dh = denc;
                let mut dc = vec![zero; b * h];
                let mut dz = vec![zero; b * g4];
                let mut dx = vec![zero; b * e];
                for t in (0..steps).rev() {
                    let z = &tr.gates[t * b * g4..(t + 1) * b * g4];
                    let c_prev = &tr.cells[t * b * h..(t + 1) * b * h];
                    let c = &tr.cells[(t + 1) * b * h..(t + 2) * b * h];
                    for n in 0..b {
                        let zr = &z[n * g4..(n + 1) * g4];
                        let dzr = &mut dz[n * g4..(n + 1) * g4];
                        for j in 0..h {
                            let (i, f, gg, o) = (zr[j], zr[h + j], zr[2 * h + j], zr[3 * h + j]);
                            let r = n * h + j;
                            let tc = c[r].tanh();
                            let dck = dc[r] + dh[r] * o * (one - tc * tc);
                            dzr[j] = dck * gg * i * (one - i);
                            dzr[h + j] = dck * c_prev[r] * f * (one - f);
                            dzr[2 * h + j] = dck * i * (one - gg * gg);
                            dzr[3 * h + j] = dh[r] * tc * o * (one - o);
                            dc[r] = dck * f;
                        }
                    }
                    add_column_sums(&dz, g4, g.lstm_bias.row_mut(0));
                    let x = &tr.inputs[t * b * e..(t + 1) * b * e];
                    let gin = g.lstm_input.as_mut_slice();
                    gemm(e, b, g4, one, x, Op::T, &dz, Op::N, one, gin);
                    let win = p.lstm_input.as_slice();
                    gemm(b, g4, e, one, &dz, Op::N, win, Op::T, zero, &mut dx);
                    for (n, dxr) in dx.chunks_exact(e).enumerate() {
                        let tok = tr.tokens[n * steps + t] as usize;
                        axpy(one, dxr, g.embedding.row_mut(tok));
                    }
                    if t > 0 {
                        let h_prev = &tr.hidden[t * b * h..(t + 1) * b * h];
                        let grec = g.lstm_recurrent.as_mut_slice();
                        gemm(h, b, g4, one, h_prev, Op::T, &dz, Op::N, one, grec);
                        let wrec = p.lstm_recurrent.as_slice();
                        gemm(b, g4, h, one, &dz, Op::N, wrec, Op::T, zero, &mut dh);
                    }
                }
            }
        }
    }

    /// Writes the textual checkpoint format:
    ///
    /// ```text
    /// pnpslab-model 1
    /// config <ModelConfig as one-line JSON>
    /// block <name> <rows> <cols>
    /// <rows*cols values, space separated, row-major>
    /// ...                      (one block pair per parameter, declared order)
    /// end
    /// ```
    ///
    /// Values are written with Rust's shortest round-trip formatting, so a
    /// save/load cycle is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "pnpslab-model 1")?;
        writeln!(w, "config {}", serde_json::to_string(&self.config)?)?;
        let mut line = String::new();
        for (name, m) in self.params.blocks() {
            writeln!(w, "block {name} {} {}", m.rows(), m.cols())?;
            line.clear();
            for (i, v) in m.as_slice().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{}", v.as_f64()).expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("unexpected end of checkpoint, expected {what}"),
                }),
            }
        };
        let perr = |line: usize, message: String| Error::Parse { line, message };

        let (ln, magic) = next("header")?;
        if magic.trim() != "pnpslab-model 1" {
            return Err(perr(ln, format!("bad header `{magic}`")));
        }
        let (ln, cfg_line) = next("config")?;
        let cfg_json = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| perr(ln, "expected `config <json>`".into()))?;
        let config: ModelConfig =
            serde_json::from_str(cfg_json).map_err(|e| perr(ln, e.to_string()))?;
        config.validate()?;
        let mut params = Parameters::zeros(&config);
        for (expected, block) in params.blocks_mut() {
            let (ln, head) = next("block header")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "block" || parts[1] != expected {
                return Err(perr(ln, format!("expected block `{expected}`, got `{head}`")));
            }
            let rows: usize = parts[2].parse().map_err(|_| perr(ln, "bad rows".into()))?;
            let cols: usize = parts[3].parse().map_err(|_| perr(ln, "bad cols".into()))?;
            if (rows, cols) != (block.rows(), block.cols()) {
                return Err(perr(
                    ln,
                    format!(
                        "block `{expected}` is {rows}x{cols}, config implies {}x{}",
                        block.rows(),
                        block.cols()
                    ),
                ));
            }
            let (ln, values) = next("block values")?;
            let data = block.as_mut_slice();
            let mut count = 0;
            for tok in values.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| perr(ln, format!("bad number `{tok}`")))?;
                if count >= data.len() {
                    return Err(perr(ln, "too many values".into()));
                }
                data[count] = T::of(v);
                count += 1;
            }
            if count != data.len() {
                return Err(perr(
                    ln,
                    format!("expected {} values, found {count}", data.len()),
                ));
            }
        }
        let (ln, end) = next("end")?;
        if end.trim() != "end" {
            return Err(perr(ln, "expected `end`".into()));
        }
        Ok(Self { config, params })
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_defaults(learning_rate: f64) -> Self {
        Self::new(learning_rate, 0.9, 0.999, 1e-8)
    }

    /// Updates each `(param, grad)` slice pair in place.
    pub fn step(&mut self, pairs: &mut [(&mut [T], &[T])]) {
        if self.first.is_empty() {
            self.first = pairs.iter().map(|(p, _)| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::one() - T::of(self.beta1.powi(self.step));
        let c2 = T::one() - T::of(self.beta2.powi(self.step));
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.epsilon);
        for (idx, (param, grad)) in pairs.iter_mut().enumerate() {
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for i in 0..param.len() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                param[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn step_model(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) {
        let gb = grads.blocks();
        let mut pairs: Vec<(&mut [T], &[T])> = params
            .blocks_mut()
            .into_iter()
            .zip(gb.iter())
            .map(|((_, p), (_, g))| (p.as_mut_slice(), g.as_slice()))
            .collect();
        self.step(&mut pairs);
    }
}

/// Logit table indexed by the binary feature value: the model sees nothing but
/// the spurious feature.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasOnlyModel<T> {
    /// `2 × n_classes`.
    pub table: Matrix<T>,
}

impl<T: Scalar> BiasOnlyModel<T> {
    pub fn new(n_classes: usize) -> Self {
        Self {
            table: Matrix::zeros(2, n_classes),
        }
    }

    pub fn forward(&self, feature_value: u8) -> Vec<T> {
        self.table.row(usize::from(feature_value.min(1))).to_vec()
    }

    pub fn log_probs(&self, feature_value: u8) -> Vec<T> {
        let l = self.forward(feature_value);
        let lse = log_sum_exp(&l);
        l.into_iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, feature_value: u8) -> Vec<T> {
        self.log_probs(feature_value).into_iter().map(T::exp).collect()
    }

    /// Weighted mean cross-entropy over `(feature value, label, weight)`.
    pub fn loss_and_grad(&self, data: &[(u8, usize, T)]) -> (T, Matrix<T>) {
        let k = self.table.cols();
        let mut grad = Matrix::zeros(2, k);
        let wsum: T = data.iter().map(|d| d.2).sum();
        if wsum == T::zero() {
            return (T::zero(), grad);
        }
        let mut total = T::zero();
        for &(f, y, w) in data {
            let mut p = self.forward(f);
            total += w * (log_sum_exp(&p) - p[y]);
            softmax_in_place(&mut p);
            p[y] -= T::one();
            axpy(w / wsum, &p, grad.row_mut(usize::from(f.min(1))));
        }
        (total / wsum, grad)
    }

    pub fn predict(&self, feature_value: u8) -> usize {
        crate::linalg::argmax(&self.forward(feature_value))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdBlockReport {
    pub name: &'static str,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<FdBlockReport>,
    pub passed: bool,
    /// Set when the step is so small that cancellation dominates; the result
    /// is then advisory only.
    pub warning: Option<String>,
}

impl FdReport {
    pub fn failing_blocks(&self) -> Vec<&'static str> {
        self.blocks
            .iter()
            .filter(|b| !b.passed)
            .map(|b| b.name)
            .collect()
    }
}

/// Gradient magnitudes below this are compared in absolute terms.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Compares [`ModelState::loss_and_grad`] against central differences for
/// every parameter.
pub fn finite_diff_check<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<'_, T>,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    finite_diff_check_with(model, batch, step, tolerance, |m, b| {
        Ok(m.loss_and_grad(b)?.1)
    })
}

/// Same as [`finite_diff_check`] with a caller-supplied analytic gradient.
/// Relative error is `|a - n| / max(|a|, |n|, FD_ABS_FLOOR)`.
pub fn finite_diff_check_with<T, F>(
    model: &ModelState<T>,
    batch: &Batch<'_, T>,
    step: f64,
    tolerance: f64,
    analytic: F,
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&ModelState<T>, &Batch<'_, T>) -> Result<Parameters<T>>,
{
    if !(step > 0.0) {
        return Err(Error::Argument("finite-difference step must be > 0".into()));
    }
    let warning = (step < 1e-8).then(|| {
        format!("step {step:e} is below 1e-8; cancellation error dominates, result is advisory")
    });
    let grads = analytic(model, batch)?;
    let mut probe = model.clone();
    let h = T::of(step);
    let two_h = T::of(2.0 * step);
    let mut blocks = Vec::new();
    for b in 0..BLOCK_NAMES.len() {
        let (name, n_params) = {
            let blocks = probe.params.blocks();
            (blocks[b].0, blocks[b].1.as_slice().len())
        };
        let mut worst = 0.0f64;
        let mut worst_index = None;
        for i in 0..n_params {
            let orig = probe.params.blocks()[b].1.as_slice()[i];
            probe.params.blocks_mut()[b].1.as_mut_slice()[i] = orig + h;
            let up = probe.loss(batch)?;
            probe.params.blocks_mut()[b].1.as_mut_slice()[i] = orig - h;
            let down = probe.loss(batch)?;
            probe.params.blocks_mut()[b].1.as_mut_slice()[i] = orig;
            let numeric = ((up - down) / two_h).as_f64();
            let a = grads.blocks()[b].1.as_slice()[i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > worst || rel.is_nan() {
                worst = if rel.is_nan() { f64::INFINITY } else { rel };
                worst_index = Some(i);
            }
        }
        blocks.push(FdBlockReport {
            name,
            n_params,
            max_rel_error: worst,
            worst_index,
            passed: worst <= tolerance,
        });
    }
    let passed = blocks.iter().all(|b| b.passed);
    Ok(FdReport {
        step,
        tolerance,
        blocks,
        passed,
        warning,
    })
}
