//! The tiny decoder-only language model and everything that trains it.
//!
//! Metrics and protocols talk to models through [`LanguageModel`], so rigged
//! test models and the transformer are interchangeable behind it.

mod batch;
mod checkpoint;
mod gradcheck;
mod layout;
mod linalg;
mod optim;
mod transformer;

use thiserror::Error;

use crate::corpus::TokenId;

pub use batch::Batch;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use gradcheck::{check_gradient, gradient_check};
pub use layout::{Layout, Section};
pub use optim::lr_at;
pub use transformer::{init_model, ModelState};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("context overflow: {len} tokens exceed context_len {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} out of range")]
    TokenOutOfRange(TokenId),
    #[error("nothing to predict: need at least 2 tokens")]
    NothingToPredict,
    #[error("empty input")]
    EmptyInput,
    #[error("divergence: non-finite loss or gradient at step {step}")]
    Divergence { step: u64 },
    #[error("batch shape mismatch: {0}")]
    BatchShape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub max_lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub init_seed: u64,
    pub adam: AdamConfig,
}

impl Default for ModelConfig {
    /// The desk configuration: 2 layers, d_model 64, 2 heads, ffn 256, V 2048, context 128.
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_ffn: 256,
            vocab_size: 2048,
            context_len: 128,
            max_lr: 6e-4,
            min_lr_ratio: 0.1,
            warmup_steps: 10,
            total_steps: 1000,
            init_seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_layers == 0 {
            v.push("n_layers must be >= 1".to_string());
        }
        if self.d_model == 0 || self.n_heads == 0 {
            v.push("d_model and n_heads must be positive".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            v.push("d_model not divisible by n_heads".to_string());
        }
        if self.d_ffn == 0 {
            v.push("d_ffn must be positive".to_string());
        }
        if self.vocab_size < 4 {
            v.push("vocab_size must be >= 4".to_string());
        }
        if self.context_len < 64 {
            v.push("context_len must be >= 64".to_string());
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            v.push("max_lr must be finite and >= 0".to_string());
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            v.push("min_lr_ratio must lie in (0, 1]".to_string());
        }
        if self.warmup_steps > self.total_steps {
            v.push("warmup_steps must not exceed total_steps".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(v.join("; ")))
        }
    }

    /// Closed-form parameter count of the tied-embedding architecture.
    pub fn param_count(&self) -> usize {
        let (v, d, c, f, l) = (self.vocab_size, self.d_model, self.context_len, self.d_ffn, self.n_layers);
        v * d + c * d + l * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-position logit rows, row-major `rows × vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.rows - 1)
    }
}

/// Index of the maximum; ties go to the lowest id.
pub fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Numerically stable log-softmax of `row` evaluated at `target`.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    row[target] - m - z.ln()
}

pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;

    /// Row `t` is the unnormalized next-token distribution after `tokens[..=t]`.
    fn forward(&self, tokens: &[TokenId]) -> Result<Logits, ModelError>;

    /// Greedy continuation of `n` tokens. The default recomputes the full
    /// forward pass at every position.
    fn greedy_decode(&self, prefix: &[TokenId], n: usize) -> Result<Vec<TokenId>, ModelError> {
        greedy_decode_recompute(self, prefix, n)
    }

    /// Greedy continuations of several prefixes; implementations may batch.
    fn greedy_decode_batch(&self, prefixes: &[Vec<TokenId>], n: usize) -> Result<Vec<Vec<TokenId>>, ModelError> {
        prefixes.iter().map(|p| self.greedy_decode(p, n)).collect()
    }

    /// Forward passes of several sequences; implementations may batch.
    fn forward_batch(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Logits>, ModelError> {
        seqs.iter().map(|s| self.forward(s)).collect()
    }

    /// Entry `i` is `log p(tokens[i+1] | tokens[..=i])`.
    fn token_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::NothingToPredict);
        }
        let logits = self.forward(tokens)?;
        Ok((0..tokens.len() - 1)
            .map(|i| log_softmax_at(logits.row(i), tokens[i + 1] as usize))
            .collect())
    }
}

/// Reference greedy decoder: one full forward per emitted token.
pub fn greedy_decode_recompute<M: LanguageModel + ?Sized>(
    model: &M,
    prefix: &[TokenId],
    n: usize,
) -> Result<Vec<TokenId>, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if prefix.len() + n > model.context_len() {
        return Err(ModelError::ContextOverflow { len: prefix.len() + n, max: model.context_len() });
    }
    let mut seq = prefix.to_vec();
    for _ in 0..n {
        let logits = model.forward(&seq)?;
        seq.push(argmax(logits.last()));
    }
    Ok(seq.split_off(prefix.len()))
}
