use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::layout::{LayerOffsets, Layout};
use super::linalg::{
    add_bias, gelu, gelu_grad, gemm, gemm_view, layernorm, layernorm_backward, softmax_in_place, sum_rows_into, View,
};
use super::optim::{adam_update, lr_at};
use super::{argmax, Batch, LanguageModel, Logits, ModelConfig, ModelError};
use crate::corpus::TokenId;
use crate::rng;

/// Weights, optimizer moments and counters of the transformer.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    layout: Layout,
    pub params: Vec<f64>,
    /// First Adam moment, congruent with `params`.
    pub m: Vec<f64>,
    /// Second Adam moment, congruent with `params`.
    pub v: Vec<f64>,
    /// Number of gradient updates applied so far.
    pub step: u64,
    pub rng_state: u64,
}

pub fn init_model(config: &ModelConfig) -> Result<ModelState, ModelError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = rng::substream(config.init_seed, rng::INIT);
    let mut params = vec![0.0; layout.total()];
    let base = Normal::new(0.0, 0.02).expect("valid std");
    let resid = Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
    for s in layout.sections() {
        let block = &mut params[s.offset..s.offset + s.len];
        if s.name.ends_with(".g") {
            block.fill(1.0);
        } else if s.name.ends_with("attn.w_o") || s.name.ends_with("mlp.w_2") {
            block.iter_mut().for_each(|p| *p = resid.sample(&mut rng));
        } else if s.decay {
            block.iter_mut().for_each(|p| *p = base.sample(&mut rng));
        }
    }
    let rng_state = rng.next_u64();
    let n = params.len();
    Ok(ModelState { config: *config, layout, params, m: vec![0.0; n], v: vec![0.0; n], step: 0, rng_state })
}

struct LayerCache {
    x_in: Vec<f64>,
    h1: Vec<f64>,
    st1: Vec<(f64, f64)>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    h2: Vec<f64>,
    st2: Vec<(f64, f64)>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct RowCache {
    layers: Vec<LayerCache>,
    x_out: Vec<f64>,
    hf: Vec<f64>,
    stf: Vec<(f64, f64)>,
}

/// Per-layer keys and values of every processed position.
struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
    seqs: usize,
}

impl ModelState {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.context_len {
            return Err(ModelError::ContextOverflow { len: tokens.len(), max: self.config.context_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange(t));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[TokenId], first_pos: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let mut x = vec![0.0; tokens.len() * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let e = self.p(self.layout.tok_emb + tok as usize * d, d);
            let p = self.p(self.layout.pos_emb + (first_pos + i) * d, d);
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        x
    }

    /// Causal self-attention of `n` query rows at absolute positions
    /// `first..first+n` against `total` key/value rows.
    #[allow(clippy::too_many_arguments)]
    fn attend(&self, q: &[f64], rsq: usize, k: &[f64], vv: &[f64], rskv: usize, n: usize, first: usize, total: usize, o: &mut [f64], probs: Option<&mut Vec<f64>>) {
        let (d, nh) = (self.config.d_model, self.config.n_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut s = vec![0.0; n * total];
        let mut all_probs = probs;
        for h in 0..nh {
            let off = h * dh;
            gemm_view(n, dh, total, View::new(&q[off..], rsq, 1), View::new(&k[off..], 1, rskv), &mut s, total, 0.0);
            for i in 0..n {
                let row = &mut s[i * total..(i + 1) * total];
                let visible = first + i + 1;
                row[..visible].iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(&mut row[..visible]);
                row[visible..].fill(0.0);
            }
            gemm_view(n, total, dh, View::new(&s, total, 1), View::new(&vv[off..], rskv, 1), &mut o[off..], d, 0.0);
            if let Some(p) = all_probs.as_deref_mut() {
                p.extend_from_slice(&s);
            }
        }
    }

    /// Runs `tokens` at positions `cache.len..` through the network, appending
    /// to the cache, and returns the final-norm hidden rows. `tokens` holds
    /// `cache.seqs` equal-length chunks that advance in lockstep.
    fn extend(&self, cache: &mut KvCache, tokens: &[TokenId]) -> Vec<f64> {
        let c = &self.config;
        let (d, f, ctx) = (c.d_model, c.d_ffn, c.context_len);
        let rows = tokens.len();
        let n = rows / cache.seqs;
        let first = cache.len;
        let total = first + n;
        let mut x = Vec::with_capacity(rows * d);
        for chunk in tokens.chunks_exact(n) {
            x.extend(self.embed(chunk, first));
        }
        let mut h = vec![0.0; rows * d];
        let mut st = vec![(0.0, 0.0); rows];
        let mut qkv = vec![0.0; rows * 3 * d];
        let mut o = vec![0.0; rows * d];
        let mut u = vec![0.0; rows * f];
        for (l, lo) in self.layout.layers.iter().enumerate() {
            layernorm(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), &mut h, &mut st);
            gemm(rows, d, 3 * d, &h, false, self.p(lo.w_qkv, 3 * d * d), false, &mut qkv, 0.0);
            add_bias(&mut qkv, self.p(lo.b_qkv, 3 * d));
            for s in 0..cache.seqs {
                let base = s * ctx * d;
                for i in 0..n {
                    let r = &qkv[(s * n + i) * 3 * d..(s * n + i + 1) * 3 * d];
                    let at = base + (first + i) * d;
                    cache.k[l][at..at + d].copy_from_slice(&r[d..2 * d]);
                    cache.v[l][at..at + d].copy_from_slice(&r[2 * d..]);
                }
                let kv = base..base + total * d;
                self.attend(
                    &qkv[s * n * 3 * d..],
                    3 * d,
                    &cache.k[l][kv.clone()],
                    &cache.v[l][kv],
                    d,
                    n,
                    first,
                    total,
                    &mut o[s * n * d..(s + 1) * n * d],
                    None,
                );
            }
            gemm(rows, d, d, &o, false, self.p(lo.w_o, d * d), false, &mut h, 0.0);
            add_bias(&mut h, self.p(lo.b_o, d));
            x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
            layernorm(&x, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), &mut h, &mut st);
            gemm(rows, d, f, &h, false, self.p(lo.w_1, d * f), false, &mut u, 0.0);
            add_bias(&mut u, self.p(lo.b_1, f));
            u.iter_mut().for_each(|v| *v = gelu(*v));
            gemm(rows, f, d, &u, false, self.p(lo.w_2, f * d), false, &mut h, 0.0);
            add_bias(&mut h, self.p(lo.b_2, d));
            x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        }
        cache.len = total;
        let mut hf = vec![0.0; rows * d];
        layernorm(&x, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d), &mut hf, &mut st);
        hf
    }

    fn new_cache(&self, seqs: usize) -> KvCache {
        let size = seqs * self.config.context_len * self.config.d_model;
        let l = self.config.n_layers;
        KvCache { k: vec![vec![0.0; size]; l], v: vec![vec![0.0; size]; l], len: 0, seqs }
    }

    fn head(&self, hf: &[f64]) -> Logits {
        let (d, vsz) = (self.config.d_model, self.config.vocab_size);
        let n = hf.len() / d;
        let mut data = vec![0.0; n * vsz];
        gemm(n, d, vsz, hf, false, self.p(self.layout.tok_emb, vsz * d), true, &mut data, 0.0);
        Logits { rows: n, vocab: vsz, data }
    }

    fn forward_train(&self, tokens: &[TokenId]) -> (RowCache, Vec<f64>) {
        let c = &self.config;
        let (d, f, nh) = (c.d_model, c.d_ffn, c.n_heads);
        let t = tokens.len();
        let mut x = self.embed(tokens, 0);
        let mut layers = Vec::with_capacity(c.n_layers);
        for lo in &self.layout.layers {
            let x_in = x.clone();
            let mut h1 = vec![0.0; t * d];
            let mut st1 = vec![(0.0, 0.0); t];
            layernorm(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), &mut h1, &mut st1);
            let mut qkv = vec![0.0; t * 3 * d];
            gemm(t, d, 3 * d, &h1, false, self.p(lo.w_qkv, 3 * d * d), false, &mut qkv, 0.0);
            add_bias(&mut qkv, self.p(lo.b_qkv, 3 * d));
            let mut o = vec![0.0; t * d];
            let mut probs = Vec::with_capacity(nh * t * t);
            self.attend(&qkv, 3 * d, &qkv[d..], &qkv[2 * d..], 3 * d, t, 0, t, &mut o, Some(&mut probs));
            let mut a = vec![0.0; t * d];
            gemm(t, d, d, &o, false, self.p(lo.w_o, d * d), false, &mut a, 0.0);
            add_bias(&mut a, self.p(lo.b_o, d));
            x.iter_mut().zip(&a).for_each(|(p, q)| *p += q);
            let x_mid = x.clone();
            let mut h2 = vec![0.0; t * d];
            let mut st2 = vec![(0.0, 0.0); t];
            layernorm(&x, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), &mut h2, &mut st2);
            let mut u = vec![0.0; t * f];
            gemm(t, d, f, &h2, false, self.p(lo.w_1, d * f), false, &mut u, 0.0);
            add_bias(&mut u, self.p(lo.b_1, f));
            let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            gemm(t, f, d, &g, false, self.p(lo.w_2, f * d), false, &mut a, 0.0);
            add_bias(&mut a, self.p(lo.b_2, d));
            x.iter_mut().zip(&a).for_each(|(p, q)| *p += q);
            layers.push(LayerCache { x_in, h1, st1, qkv, probs, o, x_mid, h2, st2, u, g });
        }
        let mut hf = vec![0.0; t * d];
        let mut stf = vec![(0.0, 0.0); t];
        layernorm(&x, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d), &mut hf, &mut stf);
        let logits = self.head(&hf).data;
        (RowCache { layers, x_out: x, hf, stf }, logits)
    }

    fn backward_layer(&self, lo: &LayerOffsets, lc: &LayerCache, t: usize, dx: &mut [f64], grad: &mut [f64]) {
        let c = &self.config;
        let (d, f, nh) = (c.d_model, c.d_ffn, c.n_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP block: x_out = x_mid + gelu(LN2(x_mid) W1 + b1) W2 + b2
        sum_rows_into(dx, &mut grad[lo.b_2..lo.b_2 + d]);
        gemm(f, t, d, &lc.g, true, dx, false, &mut grad[lo.w_2..lo.w_2 + f * d], 1.0);
        let mut du = vec![0.0; t * f];
        gemm(t, d, f, dx, false, self.p(lo.w_2, f * d), true, &mut du, 0.0);
        du.iter_mut().zip(&lc.u).for_each(|(g, &u)| *g *= gelu_grad(u));
        sum_rows_into(&du, &mut grad[lo.b_1..lo.b_1 + f]);
        gemm(d, t, f, &lc.h2, true, &du, false, &mut grad[lo.w_1..lo.w_1 + d * f], 1.0);
        let mut dh2 = vec![0.0; t * d];
        gemm(t, f, d, &du, false, self.p(lo.w_1, d * f), true, &mut dh2, 0.0);
        {
            let (dg, db) = grad[lo.ln2_g..lo.ln2_g + 2 * d].split_at_mut(d);
            layernorm_backward(&lc.x_mid, self.p(lo.ln2_g, d), &lc.st2, &dh2, dx, dg, db);
        }

        // Attention block: x_mid = x_in + Attn(LN1(x_in)) Wo + bo
        sum_rows_into(dx, &mut grad[lo.b_o..lo.b_o + d]);
        gemm(d, t, d, &lc.o, true, dx, false, &mut grad[lo.w_o..lo.w_o + d * d], 1.0);
        let mut d_o = vec![0.0; t * d];
        gemm(t, d, d, dx, false, self.p(lo.w_o, d * d), true, &mut d_o, 0.0);
        let mut dqkv = vec![0.0; t * 3 * d];
        let mut dp = vec![0.0; t * t];
        let qkv = &lc.qkv;
        for h in 0..nh {
            let off = h * dh;
            let p = &lc.probs[h * t * t..(h + 1) * t * t];
            // dP = dO V^T
            gemm_view(t, dh, t, View::new(&d_o[off..], d, 1), View::new(&qkv[2 * d + off..], 1, 3 * d), &mut dp, t, 0.0);
            // dV = P^T dO
            gemm_view(t, t, dh, View::new(p, 1, t), View::new(&d_o[off..], d, 1), &mut dqkv[2 * d + off..], 3 * d, 0.0);
            // dS = P ⊙ (dP - rowsum(P ⊙ dP)), scaled
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                dr[i + 1..].fill(0.0);
            }
            // dQ = dS K, dK = dS^T Q
            gemm_view(t, t, dh, View::new(&dp, t, 1), View::new(&qkv[d + off..], 3 * d, 1), &mut dqkv[off..], 3 * d, 0.0);
            gemm_view(t, t, dh, View::new(&dp, 1, t), View::new(&qkv[off..], 3 * d, 1), &mut dqkv[d + off..], 3 * d, 0.0);
        }
        sum_rows_into(&dqkv, &mut grad[lo.b_qkv..lo.b_qkv + 3 * d]);
        gemm(d, t, 3 * d, &lc.h1, true, &dqkv, false, &mut grad[lo.w_qkv..lo.w_qkv + 3 * d * d], 1.0);
        let mut dh1 = vec![0.0; t * d];
        gemm(t, 3 * d, d, &dqkv, false, self.p(lo.w_qkv, 3 * d * d), true, &mut dh1, 0.0);
        let (dg, db) = grad[lo.ln1_g..lo.ln1_g + 2 * d].split_at_mut(d);
        layernorm_backward(&lc.x_in, self.p(lo.ln1_g, d), &lc.st1, &dh1, dx, dg, db);
    }

    /// Accumulates into `grad` the gradient for one row given `dlogits`.
    fn backward_row(&self, tokens: &[TokenId], cache: &RowCache, dlogits: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let (d, vsz) = (c.d_model, c.vocab_size);
        let t = tokens.len();
        let lay = &self.layout;
        let mut dhf = vec![0.0; t * d];
        gemm(t, vsz, d, dlogits, false, self.p(lay.tok_emb, vsz * d), false, &mut dhf, 0.0);
        gemm(vsz, t, d, dlogits, true, &cache.hf, false, &mut grad[lay.tok_emb..lay.tok_emb + vsz * d], 1.0);
        let mut dx = vec![0.0; t * d];
        {
            let (dg, db) = grad[lay.lnf_g..lay.lnf_g + 2 * d].split_at_mut(d);
            layernorm_backward(&cache.x_out, self.p(lay.lnf_g, d), &cache.stf, &dhf, &mut dx, dg, db);
        }
        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            self.backward_layer(lo, lc, t, &mut dx, grad);
        }
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let e = lay.tok_emb + tok as usize * d;
            grad[e..e + d].iter_mut().zip(row).for_each(|(g, v)| *g += v);
            let p = lay.pos_emb + i * d;
            grad[p..p + d].iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.rows() > 0 && batch.seq_len() > self.config.context_len {
            return Err(ModelError::ContextOverflow { len: batch.seq_len(), max: self.config.context_len });
        }
        for r in 0..batch.rows() {
            if let Some(&t) = batch.row(r).iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(ModelError::TokenOutOfRange(t));
            }
        }
        Ok(())
    }

    /// Mean next-token cross-entropy over masked positions and its gradient.
    /// A batch without supervised positions has zero loss and zero gradient.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_batch(batch)?;
        let vsz = self.config.vocab_size;
        let mut grad = vec![0.0; self.params.len()];
        let total = batch.masked_count();
        if total == 0 {
            return Ok((0.0, grad));
        }
        let inv = 1.0 / total as f64;
        let mut loss = 0.0;
        for r in 0..batch.rows() {
            let len = batch.effective_len(r);
            if len == 0 {
                continue;
            }
            let tokens = &batch.row(r)[..len];
            let mask = batch.mask(r);
            let (cache, mut dl) = self.forward_train(tokens);
            for t in 0..len {
                let row = &mut dl[t * vsz..(t + 1) * vsz];
                if !mask[t] {
                    row.fill(0.0);
                    continue;
                }
                softmax_in_place(row);
                let y = tokens[t + 1] as usize;
                loss -= row[y].ln();
                row[y] -= 1.0;
                row.iter_mut().for_each(|g| *g *= inv);
            }
            self.backward_row(tokens, &cache, &dl, &mut grad);
        }
        Ok((loss * inv, grad))
    }

    /// One update at `lr_at(self.step)`; returns the pre-update mean loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64, ModelError> {
        let lr = lr_at(self.step, &self.config);
        self.train_step_with_lr(batch, lr)
    }

    /// One update at an explicit learning rate. On a non-finite loss or
    /// gradient the state is left untouched.
    pub fn train_step_with_lr(&mut self, batch: &Batch, lr: f64) -> Result<f64, ModelError> {
        let (loss, grad) = self.loss_and_grad(batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::Divergence { step: self.step });
        }
        let t = self.step + 1;
        adam_update(&self.layout, &self.config.adam, &mut self.params, &mut self.m, &mut self.v, &grad, lr, t);
        self.step = t;
        Ok(loss)
    }

    /// FNV-1a over the bit patterns of all stores and counters.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for s in [&self.params, &self.m, &self.v] {
            s.iter().for_each(|x| eat(x.to_bits()));
        }
        eat(self.step);
        eat(self.rng_state);
        h
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.m).chain(&self.v).all(|x| x.is_finite())
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>, m: Vec<f64>, v: Vec<f64>, step: u64, rng_state: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() || m.len() != layout.total() || v.len() != layout.total() {
            return Err(ModelError::Checkpoint("parameter store size does not match config".into()));
        }
        Ok(ModelState { config, layout, params, m, v, step, rng_state })
    }
}

/// Splits `seqs` into runs of equal length, at most `LOCKSTEP` long.
fn equal_length_groups(seqs: &[Vec<TokenId>]) -> Vec<&[Vec<TokenId>]> {
    const LOCKSTEP: usize = 32;
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=seqs.len() {
        if i == seqs.len() || i - start == LOCKSTEP || seqs[i].len() != seqs[start].len() {
            groups.push(&seqs[start..i]);
            start = i;
        }
    }
    groups
}

impl ModelState {
    fn decode_lockstep(&self, prefixes: &[Vec<TokenId>], n: usize) -> Result<Vec<Vec<TokenId>>, ModelError> {
        for p in prefixes {
            self.check_tokens(p)?;
            if p.len() + n > self.config.context_len {
                return Err(ModelError::ContextOverflow { len: p.len() + n, max: self.config.context_len });
            }
        }
        let (d, bsz) = (self.config.d_model, prefixes.len());
        let flat: Vec<TokenId> = prefixes.iter().flatten().copied().collect();
        let mut cache = self.new_cache(bsz);
        let hf = self.extend(&mut cache, &flat);
        let per = prefixes[0].len();
        let mut last: Vec<f64> = (0..bsz).flat_map(|b| hf[((b + 1) * per - 1) * d..(b + 1) * per * d].iter().copied()).collect();
        let mut out = vec![Vec::with_capacity(n); bsz];
        for i in 0..n {
            let logits = self.head(&last);
            let next: Vec<TokenId> = (0..bsz).map(|b| argmax(logits.row(b))).collect();
            out.iter_mut().zip(&next).for_each(|(o, &t)| o.push(t));
            if i + 1 < n {
                last = self.extend(&mut cache, &next);
            }
        }
        Ok(out)
    }
}

impl LanguageModel for ModelState {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn forward(&self, tokens: &[TokenId]) -> Result<Logits, ModelError> {
        self.check_tokens(tokens)?;
        let mut cache = self.new_cache(1);
        let hf = self.extend(&mut cache, tokens);
        Ok(self.head(&hf))
    }

    fn greedy_decode_batch(&self, prefixes: &[Vec<TokenId>], n: usize) -> Result<Vec<Vec<TokenId>>, ModelError> {
        let mut out = Vec::with_capacity(prefixes.len());
        for group in equal_length_groups(prefixes) {
            out.extend(self.decode_lockstep(group, n)?);
        }
        Ok(out)
    }

    fn forward_batch(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Logits>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        for group in equal_length_groups(seqs) {
            group.iter().try_for_each(|s| self.check_tokens(s))?;
            let flat: Vec<TokenId> = group.iter().flatten().copied().collect();
            let mut cache = self.new_cache(group.len());
            let logits = self.head(&self.extend(&mut cache, &flat));
            let per = logits.rows / group.len();
            let width = per * logits.vocab;
            out.extend(logits.data.chunks_exact(width).map(|c| Logits { rows: per, vocab: logits.vocab, data: c.to_vec() }));
        }
        Ok(out)
    }

    /// Incremental decoding over a key/value cache.
    fn greedy_decode(&self, prefix: &[TokenId], n: usize) -> Result<Vec<TokenId>, ModelError> {
        self.check_tokens(prefix)?;
        if prefix.len() + n > self.config.context_len {
            return Err(ModelError::ContextOverflow { len: prefix.len() + n, max: self.config.context_len });
        }
        let d = self.config.d_model;
        let mut cache = self.new_cache(1);
        let hf = self.extend(&mut cache, prefix);
        let mut last = hf[hf.len() - d..].to_vec();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let next = argmax(&self.head(&last).data);
            out.push(next);
            if i + 1 < n {
                last = self.extend(&mut cache, &[next]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::greedy_decode_recompute;

    pub(crate) fn micro() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 16,
            context_len: 64,
            max_lr: 1e-2,
            warmup_steps: 0,
            total_steps: 100,
            init_seed: 3,
            ..ModelConfig::default()
        }
    }

    /// Bumps every parameter off its init so LN gains and biases matter.
    fn perturbed(c: &ModelConfig) -> ModelState {
        let mut s = init_model(c).unwrap();
        for (i, p) in s.params.iter_mut().enumerate() {
            *p += 0.3 * ((i as f64) * 0.731).sin();
        }
        s
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&micro()).unwrap();
        let b = init_model(&micro()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.step, 0);
        let c = init_model(&ModelConfig { init_seed: 4, ..micro() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn invalid_config_rejected() {
        let err = init_model(&ModelConfig { d_model: 64, n_heads: 3, ..ModelConfig::default() }).unwrap_err();
        assert!(err.to_string().contains("d_model not divisible by n_heads"));
    }

    #[test]
    fn forward_is_causal() {
        let s = perturbed(&micro());
        let toks: Vec<TokenId> = (0..20).map(|i| (i * 7 % 16) as TokenId).collect();
        let base = s.forward(&toks).unwrap();
        for t in 0..19 {
            let mut alt = toks.clone();
            alt[t + 1] = (alt[t + 1] + 5) % 16;
            let l = s.forward(&alt).unwrap();
            for r in 0..=t {
                assert_eq!(l.row(r), base.row(r), "row {r} changed when token {} changed", t + 1);
            }
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let s = perturbed(&micro());
        let l = s.forward(&[1, 2, 3, 4, 5]).unwrap();
        for t in 0..5 {
            let sum: f64 = (0..16).map(|y| crate::model::log_softmax_at(l.row(t), y).exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn overlength_is_context_overflow() {
        let s = init_model(&micro()).unwrap();
        let err = s.forward(&vec![1; 65]).unwrap_err();
        assert!(err.to_string().contains("context overflow"));
        assert!(s.greedy_decode(&[1; 40], 32).is_err());
        assert!(matches!(s.forward(&[99]), Err(ModelError::TokenOutOfRange(99))));
    }

    #[test]
    fn training_forward_matches_inference_forward() {
        let s = perturbed(&micro());
        let toks: Vec<TokenId> = (0..30).map(|i| (i * 5 % 16) as TokenId).collect();
        let (_, train_logits) = s.forward_train(&toks);
        let inf = s.forward(&toks).unwrap();
        for (a, b) in train_logits.iter().zip(&inf.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cached_decode_matches_full_recompute() {
        let s = perturbed(&micro());
        let prefix: Vec<TokenId> = (0..32).map(|i| (i * 3 % 16) as TokenId).collect();
        assert_eq!(s.greedy_decode(&prefix, 32).unwrap(), greedy_decode_recompute(&s, &prefix, 32).unwrap());
    }

    #[test]
    fn batched_paths_match_single() {
        let s = perturbed(&micro());
        let seqs: Vec<Vec<TokenId>> =
            (0..5).map(|r| (0..(if r < 3 { 12 } else { 9 })).map(|i| ((i * 3 + r * 7) % 16) as TokenId).collect()).collect();
        let dec = s.greedy_decode_batch(&seqs, 20).unwrap();
        let fwd = s.forward_batch(&seqs).unwrap();
        for (i, q) in seqs.iter().enumerate() {
            assert_eq!(dec[i], s.greedy_decode(q, 20).unwrap());
            let single = s.forward(q).unwrap();
            assert_eq!(fwd[i].rows, single.rows);
            for (a, b) in fwd[i].data.iter().zip(&single.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_step_is_deterministic_and_counts() {
        let batch = Batch::from_sequences(&[(0..20).map(|i| (3 + i % 13) as TokenId).collect()]);
        let mut a = init_model(&micro()).unwrap();
        let mut b = init_model(&micro()).unwrap();
        let la = a.train_step(&batch).unwrap();
        let lb = b.train_step(&batch).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.step, 1);
        assert!(a.is_finite());
    }

    #[test]
    fn divergence_leaves_state_untouched() {
        let batch = Batch::from_sequences(&[vec![1, 3, 4, 5]]);
        let mut s = init_model(&micro()).unwrap();
        s.params[0] = f64::NAN;
        let before = s.clone();
        let err = s.train_step(&batch).unwrap_err();
        assert!(err.to_string().contains("divergence"));
        assert_eq!(s.step, before.step);
        assert_eq!(s.m, before.m);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let c = ModelConfig::default();
        let s = init_model(&c).unwrap();
        let batch = Batch::from_sequences(&[(0..64).map(|i| (i * 31 % 2048) as TokenId).collect()]);
        let (loss, _) = s.loss_and_grad(&batch).unwrap();
        assert!((loss - (2048f64).ln()).abs() < 0.1, "{loss}");
    }
}
