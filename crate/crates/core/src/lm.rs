//! One-layer pre-norm transformer: RMS-norm, rotary causal self-attention,
//! gated SiLU MLP, untied unembedding.
//!
//! Activations use the row-vector convention: a sequence is an `L x d`
//! matrix and every projection is `x.dot(W)`.
//!
//! Manifest order: `embed, attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up,
//! w_down, final_norm, unembed`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{contract, Error, Result};
use crate::params::ParamSet;
use crate::Scalar;

const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Sequences per gradient accumulation chunk. Fixed so that the summation
/// order (and thus the result) does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub ctx_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub seed: u64,
    /// Targets equal to this id are excluded from loss and accuracy.
    #[serde(default)]
    pub pad_id: Option<TokenId>,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 4096,
            d_model: 256,
            n_heads: 4,
            d_mlp: 1024,
            ctx_len: 256,
            rope_base: default_rope_base(),
            seed: 0,
            pad_id: None,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_mlp == 0 || self.ctx_len == 0 {
            return bad("LM dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if !(self.rope_base > 0.0) {
            return bad("rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let (v, d, m) = (self.vocab_size, self.d_model, self.d_mlp);
        2 * v * d + 4 * d * d + 3 * d * m + 3 * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T: Scalar> {
    pub config: LmConfig,
    pub embed: Array2<T>,
    pub attn_norm: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub mlp_norm: Array1<T>,
    pub w_gate: Array2<T>,
    pub w_up: Array2<T>,
    pub w_down: Array2<T>,
    pub final_norm: Array1<T>,
    pub unembed: Array2<T>,
}

impl<T: Scalar> ParamSet<T> for LmParams<T> {
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        vec![
            ("embed", self.embed.shape().to_vec(), self.embed.as_slice().unwrap()),
            ("attn_norm", self.attn_norm.shape().to_vec(), self.attn_norm.as_slice().unwrap()),
            ("wq", self.wq.shape().to_vec(), self.wq.as_slice().unwrap()),
            ("wk", self.wk.shape().to_vec(), self.wk.as_slice().unwrap()),
            ("wv", self.wv.shape().to_vec(), self.wv.as_slice().unwrap()),
            ("wo", self.wo.shape().to_vec(), self.wo.as_slice().unwrap()),
            ("mlp_norm", self.mlp_norm.shape().to_vec(), self.mlp_norm.as_slice().unwrap()),
            ("w_gate", self.w_gate.shape().to_vec(), self.w_gate.as_slice().unwrap()),
            ("w_up", self.w_up.shape().to_vec(), self.w_up.as_slice().unwrap()),
            ("w_down", self.w_down.shape().to_vec(), self.w_down.as_slice().unwrap()),
            ("final_norm", self.final_norm.shape().to_vec(), self.final_norm.as_slice().unwrap()),
            ("unembed", self.unembed.shape().to_vec(), self.unembed.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("embed", self.embed.as_slice_mut().unwrap()),
            ("attn_norm", self.attn_norm.as_slice_mut().unwrap()),
            ("wq", self.wq.as_slice_mut().unwrap()),
            ("wk", self.wk.as_slice_mut().unwrap()),
            ("wv", self.wv.as_slice_mut().unwrap()),
            ("wo", self.wo.as_slice_mut().unwrap()),
            ("mlp_norm", self.mlp_norm.as_slice_mut().unwrap()),
            ("w_gate", self.w_gate.as_slice_mut().unwrap()),
            ("w_up", self.w_up.as_slice_mut().unwrap()),
            ("w_down", self.w_down.as_slice_mut().unwrap()),
            ("final_norm", self.final_norm.as_slice_mut().unwrap()),
            ("unembed", self.unembed.as_slice_mut().unwrap()),
        ]
    }
}

/// Activation capture sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HookSite {
    /// Post-nonlinearity MLP hidden state, `silu(gate) * up`, before the
    /// down projection (`blocks.0.mlp.hook_post`).
    MlpPost,
}

impl std::fmt::Display for HookSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HookSite::MlpPost => write!(f, "blocks.0.mlp.hook_post"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HookTap<T: Scalar> {
    pub site: HookSite,
    /// `tokens x d_mlp`.
    pub buffer: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    pub logits: Array2<T>,
    pub taps: Vec<HookTap<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn tap(&self, site: HookSite) -> Option<&Array2<T>> {
        self.taps.iter().find(|t| t.site == site).map(|t| &t.buffer)
    }
}

/// Replaces the MLP hidden state in place during a forward pass.
pub type MlpPatch<'a, T> = &'a (dyn Fn(&mut Array2<T>) + Sync);

struct Cache<T: Scalar> {
    tokens: Vec<TokenId>,
    x0: Array2<T>,
    r1: Array1<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    o: Array2<T>,
    x1: Array2<T>,
    r2: Array1<T>,
    h2: Array2<T>,
    gate: Array2<T>,
    up: Array2<T>,
    post: Array2<T>,
    x2: Array2<T>,
    r3: Array1<T>,
    h3: Array2<T>,
    rope: (Array2<T>, Array2<T>),
}

fn rms_norm<T: Scalar>(x: &Array2<T>, g: &Array1<T>) -> (Array2<T>, Array1<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(NORM_EPS);
    let inv: Array1<T> = x
        .rows()
        .into_iter()
        .map(|r| T::one() / ((r.iter().map(|&v| v * v).sum::<T>() / d) + eps).sqrt())
        .collect();
    let mut y = x.clone();
    for (mut row, &r) in y.rows_mut().into_iter().zip(inv.iter()) {
        row.zip_mut_with(g, |v, &gi| *v = *v * r * gi);
    }
    (y, inv)
}

/// Returns `dx` and accumulates `dg`.
fn rms_norm_backward<T: Scalar>(
    x: &Array2<T>,
    g: &Array1<T>,
    inv: &Array1<T>,
    dy: &Array2<T>,
    dg: &mut Array1<T>,
) -> Array2<T> {
    let d = T::of(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let r = inv[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut ux = T::zero();
        for j in 0..x.ncols() {
            let u = dyr[j] * g[j];
            ux += u * xr[j];
            dg[j] += dyr[j] * xr[j] * r;
        }
        let c = r * r * r * ux / d;
        for j in 0..x.ncols() {
            dx[[i, j]] = r * dyr[j] * g[j] - xr[j] * c;
        }
    }
    dx
}

/// `(cos, sin)` tables, `len x head_dim/2`.
fn rope_tables<T: Scalar>(len: usize, head_dim: usize, base: f64) -> (Array2<T>, Array2<T>) {
    let half = head_dim / 2;
    let mut cos = Array2::zeros((len, half));
    let mut sin = Array2::zeros((len, half));
    for p in 0..len {
        for i in 0..half {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            cos[[p, i]] = T::of(theta.cos());
            sin[[p, i]] = T::of(theta.sin());
        }
    }
    (cos, sin)
}

/// Rotates every head of `x` in place; `inverse` applies the transpose rotation.
fn apply_rope<T: Scalar>(x: &mut Array2<T>, n_heads: usize, tables: &(Array2<T>, Array2<T>), inverse: bool) {
    let hd = x.ncols() / n_heads;
    let (cos, sin) = tables;
    for p in 0..x.nrows() {
        for h in 0..n_heads {
            for i in 0..hd / 2 {
                let (a, b) = (h * hd + 2 * i, h * hd + 2 * i + 1);
                let (c, mut s) = (cos[[p, i]], sin[[p, i]]);
                if inverse {
                    s = -s;
                }
                let (x0, x1) = (x[[p, a]], x[[p, b]]);
                x[[p, a]] = x0 * c - x1 * s;
                x[[p, b]] = x0 * s + x1 * c;
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_rows_causal<T: Scalar>(scores: &mut Array2<T>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.iter().take(i + 1).copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn normal_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)))
}

impl<T: Scalar> LmParams<T> {
    /// Seeded initialization: N(0, 0.02) weights, with the two residual
    /// output projections (`wo`, `w_down`) scaled by `1/sqrt(2)`; norm gains
    /// start at one.
    pub fn init(cfg: &LmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (v, d, m) = (cfg.vocab_size, cfg.d_model, cfg.d_mlp);
        let out_std = INIT_STD / 2f64.sqrt();
        Ok(LmParams {
            config: cfg.clone(),
            embed: normal_matrix(&mut rng, v, d, INIT_STD),
            attn_norm: Array1::ones(d),
            wq: normal_matrix(&mut rng, d, d, INIT_STD),
            wk: normal_matrix(&mut rng, d, d, INIT_STD),
            wv: normal_matrix(&mut rng, d, d, INIT_STD),
            wo: normal_matrix(&mut rng, d, d, out_std),
            mlp_norm: Array1::ones(d),
            w_gate: normal_matrix(&mut rng, d, m, INIT_STD),
            w_up: normal_matrix(&mut rng, d, m, INIT_STD),
            w_down: normal_matrix(&mut rng, m, d, out_std),
            final_norm: Array1::ones(d),
            unembed: normal_matrix(&mut rng, d, v, INIT_STD),
        })
    }

    /// All-zero parameters of the shapes given by `cfg` (load targets).
    pub fn zeros(cfg: &LmConfig) -> Result<Self> {
        cfg.validate()?;
        let (v, d, m) = (cfg.vocab_size, cfg.d_model, cfg.d_mlp);
        Ok(LmParams {
            config: cfg.clone(),
            embed: Array2::zeros((v, d)),
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::zeros(d),
            w_gate: Array2::zeros((d, m)),
            w_up: Array2::zeros((d, m)),
            w_down: Array2::zeros((m, d)),
            final_norm: Array1::zeros(d),
            unembed: Array2::zeros((d, v)),
        })
    }

    /// Same shapes as `self`, all zeros (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, d) in z.tensors_mut() {
            d.fill(T::zero());
        }
        z
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        contract!(
            tokens.len() <= self.config.ctx_len,
            "sequence of length {} exceeds ctx_len {}",
            tokens.len(),
            self.config.ctx_len
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn attention_and_mlp(&self, tokens: &[TokenId], patch: Option<MlpPatch<'_, T>>, keep_probs: bool) -> Cache<T> {
        let cfg = &self.config;
        let (len, d, nh) = (tokens.len(), cfg.d_model, cfg.n_heads);
        let hd = cfg.head_dim();
        let mut x0 = Array2::zeros((len, d));
        for (i, &t) in tokens.iter().enumerate() {
            x0.row_mut(i).assign(&self.embed.row(t as usize));
        }
        let (h1, r1) = rms_norm(&x0, &self.attn_norm);
        let rope = rope_tables::<T>(len, hd, cfg.rope_base);
        let mut q = h1.dot(&self.wq);
        let mut k = h1.dot(&self.wk);
        let v = h1.dot(&self.wv);
        apply_rope(&mut q, nh, &rope, false);
        apply_rope(&mut k, nh, &rope, false);
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut o = Array2::zeros((len, d));
        let mut probs = Vec::with_capacity(if keep_probs { nh } else { 0 });
        for h in 0..nh {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            softmax_rows_causal(&mut scores);
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            if keep_probs {
                probs.push(scores);
            }
        }
        let x1 = &x0 + &o.dot(&self.wo);
        let (h2, r2) = rms_norm(&x1, &self.mlp_norm);
        let gate = h2.dot(&self.w_gate);
        let up = h2.dot(&self.w_up);
        let mut post = Array2::from_shape_fn(gate.raw_dim(), |(i, j)| {
            let a = gate[[i, j]];
            a * sigmoid(a) * up[[i, j]]
        });
        if let Some(p) = patch {
            p(&mut post);
        }
        Cache {
            tokens: tokens.to_vec(),
            x0,
            r1,
            h1,
            q,
            k,
            v,
            probs,
            o,
            x1,
            r2,
            h2,
            gate,
            up,
            post,
            x2: Array2::zeros((0, 0)),
            r3: Array1::zeros(0),
            h3: Array2::zeros((0, 0)),
            rope,
        }
    }

    fn forward_cached(&self, tokens: &[TokenId], patch: Option<MlpPatch<'_, T>>, keep: bool) -> (Array2<T>, Cache<T>) {
        let mut c = self.attention_and_mlp(tokens, patch, keep);
        c.x2 = &c.x1 + &c.post.dot(&self.w_down);
        let (h3, r3) = rms_norm(&c.x2, &self.final_norm);
        let logits = h3.dot(&self.unembed);
        c.h3 = h3;
        c.r3 = r3;
        (logits, c)
    }

    /// Logits for every position plus the requested activation taps.
    pub fn forward(&self, tokens: &[TokenId], taps: &[HookSite]) -> Result<ForwardOutput<T>> {
        self.forward_patched(tokens, taps, None)
    }

    /// As [`forward`](Self::forward), optionally replacing the MLP hidden
    /// state before the down projection. Taps observe the patched state.
    pub fn forward_patched(
        &self,
        tokens: &[TokenId],
        taps: &[HookSite],
        patch: Option<MlpPatch<'_, T>>,
    ) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        let (logits, cache) = self.forward_cached(tokens, patch, false);
        let taps = taps
            .iter()
            .map(|&site| match site {
                HookSite::MlpPost => HookTap { site, buffer: cache.post.clone() },
            })
            .collect();
        Ok(ForwardOutput { logits, taps })
    }

    /// MLP hidden state only, skipping the unembedding.
    pub fn mlp_post(&self, tokens: &[TokenId]) -> Result<Array2<T>> {
        self.check_tokens(tokens)?;
        Ok(self.attention_and_mlp(tokens, None, false).post)
    }

    /// Mean next-token cross-entropy (nats) of one block, and the number of
    /// scored positions. Inputs are `block[..n-1]`, targets `block[1..]`.
    pub fn block_loss(&self, block: &[TokenId], patch: Option<MlpPatch<'_, T>>) -> Result<(f64, usize)> {
        contract!(block.len() >= 2, "a block needs at least two tokens");
        let out = self.forward_patched(&block[..block.len() - 1], &[], patch)?;
        let (sum, n) = loss_sum(out.logits.view(), &block[1..], self.config.pad_id);
        Ok((if n == 0 { 0.0 } else { sum / n as f64 }, n))
    }

    /// Mean loss over blocks plus exact gradients of that mean.
    pub fn loss_and_grads<B: AsRef<[TokenId]> + Sync>(&self, blocks: &[B]) -> Result<(f64, LmParams<T>)> {
        for b in blocks {
            let b = b.as_ref();
            contract!(b.len() >= 2, "a block needs at least two tokens");
            self.check_tokens(&b[..b.len() - 1])?;
            if let Some(&bad) = b.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Contract(format!("target id {bad} out of range")));
            }
        }
        let pad = self.config.pad_id;
        let n_valid: usize = blocks
            .iter()
            .map(|b| b.as_ref()[1..].iter().filter(|&&t| Some(t) != pad).count())
            .sum();
        if n_valid == 0 {
            return Ok((0.0, self.zeros_like()));
        }
        let partials: Vec<(f64, LmParams<T>)> = blocks
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grads = self.zeros_like();
                let mut loss = 0.0;
                for b in chunk {
                    let b = b.as_ref();
                    loss += self.backward_into(&b[..b.len() - 1], &b[1..], n_valid, &mut grads);
                }
                (loss, grads)
            })
            .collect();
        let mut iter = partials.into_iter();
        let (mut loss, mut grads) = iter.next().unwrap();
        for (l, g) in iter {
            loss += l;
            grads.add_assign_from(&g);
        }
        Ok((loss / n_valid as f64, grads))
    }

    /// Accumulates gradients of `sum CE / norm` for one sequence into `g`;
    /// returns the unnormalized loss sum.
    fn backward_into(&self, inputs: &[TokenId], targets: &[TokenId], norm: usize, g: &mut LmParams<T>) -> f64 {
        let cfg = &self.config;
        let (logits, c) = self.forward_cached(inputs, None, true);
        let (len, nh, hd) = (inputs.len(), cfg.n_heads, cfg.head_dim());
        let inv_norm = T::of(1.0 / norm as f64);

        // d loss / d logits
        let mut loss = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for i in 0..len {
            if Some(targets[i]) == cfg.pad_id {
                continue;
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            loss += (lse - row[targets[i] as usize]).f64();
            for j in 0..row.len() {
                dlogits[[i, j]] = (row[j] - lse).exp() * inv_norm;
            }
            dlogits[[i, targets[i] as usize]] -= inv_norm;
        }

        g.unembed += &c.h3.t().dot(&dlogits);
        let dh3 = dlogits.dot(&self.unembed.t());
        let dx2 = rms_norm_backward(&c.x2, &self.final_norm, &c.r3, &dh3, &mut g.final_norm);

        // MLP
        g.w_down += &c.post.t().dot(&dx2);
        let dpost = dx2.dot(&self.w_down.t());
        let mut dgate = Array2::zeros(c.gate.raw_dim());
        let mut dup = Array2::zeros(c.up.raw_dim());
        for ((i, j), &dp) in dpost.indexed_iter() {
            let a = c.gate[[i, j]];
            let sg = sigmoid(a);
            let silu = a * sg;
            dup[[i, j]] = dp * silu;
            dgate[[i, j]] = dp * c.up[[i, j]] * sg * (T::one() + a * (T::one() - sg));
        }
        g.w_gate += &c.h2.t().dot(&dgate);
        g.w_up += &c.h2.t().dot(&dup);
        let dh2 = dgate.dot(&self.w_gate.t()) + dup.dot(&self.w_up.t());
        let mut dx1 = dx2;
        dx1 += &rms_norm_backward(&c.x1, &self.mlp_norm, &c.r2, &dh2, &mut g.mlp_norm);

        // attention
        g.wo += &c.o.t().dot(&dx1);
        let do_ = dx1.dot(&self.wo.t());
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..nh {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &c.probs[h];
            let do_h = do_.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&do_h));
            let dp = do_h.dot(&c.v.slice(cols).t());
            let mut ds = p * &dp;
            let row_dots = ds.sum_axis(Axis(1));
            for ((i, j), v) in ds.indexed_iter_mut() {
                *v -= p[[i, j]] * row_dots[i];
                *v *= scale;
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        apply_rope(&mut dq, nh, &c.rope, true);
        apply_rope(&mut dk, nh, &c.rope, true);
        g.wq += &c.h1.t().dot(&dq);
        g.wk += &c.h1.t().dot(&dk);
        g.wv += &c.h1.t().dot(&dv);
        let dh1 = dq.dot(&self.wq.t()) + dk.dot(&self.wk.t()) + dv.dot(&self.wv.t());
        let mut dx0 = dx1;
        dx0 += &rms_norm_backward(&c.x0, &self.attn_norm, &c.r1, &dh1, &mut g.attn_norm);
        for (i, &t) in c.tokens.iter().enumerate() {
            let mut row = g.embed.row_mut(t as usize);
            row += &dx0.row(i);
        }
        loss
    }
}

/// Sum of per-position cross-entropy over non-pad targets, and their count.
fn loss_sum<T: Scalar>(logits: ArrayView2<T>, targets: &[TokenId], pad: Option<TokenId>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if Some(t) == pad {
            continue;
        }
        let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
        sum += lse - row[t as usize].f64();
        n += 1;
    }
    (sum, n)
}

/// Mean next-token cross-entropy in nats; rows whose target is `pad` are masked.
pub fn lm_loss<T: Scalar>(logits: ArrayView2<T>, targets: &[TokenId], pad: Option<TokenId>) -> Result<f64> {
    contract!(
        logits.nrows() == targets.len(),
        "logits have {} rows but {} targets were given",
        logits.nrows(),
        targets.len()
    );
    let (sum, n) = loss_sum(logits, targets, pad);
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Index of the largest logit (first on ties).
pub fn argmax<T: Scalar>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `(loss sum, correct, scored)` next-token predictions over one block,
/// from a single forward pass.
pub fn block_metrics<T: Scalar>(params: &LmParams<T>, block: &[TokenId]) -> Result<(f64, usize, usize)> {
    contract!(block.len() >= 2, "a block needs at least two tokens");
    let out = params.forward(&block[..block.len() - 1], &[])?;
    let pad = params.config.pad_id;
    let (sum, n) = loss_sum(out.logits.view(), &block[1..], pad);
    let hits = out
        .logits
        .rows()
        .into_iter()
        .zip(&block[1..])
        .filter(|(row, &t)| Some(t) != pad && argmax(row.view()) == t as usize)
        .count();
    Ok((sum, hits, n))
}

/// `(correct, scored)` next-token predictions over one block.
pub fn block_hits<T: Scalar>(params: &LmParams<T>, block: &[TokenId]) -> Result<(usize, usize)> {
    let (_, hits, n) = block_metrics(params, block)?;
    Ok((hits, n))
}

/// Fraction of positions where the argmax prediction equals the next token,
/// over `n_tokens` tokens drawn from a fork of `stream`.
pub fn next_token_accuracy<T: Scalar>(
    params: &LmParams<T>,
    stream: &crate::corpus::TokenStream,
    n_tokens: usize,
) -> Result<f64> {
    contract!(n_tokens > 0, "n_tokens must be positive");
    let blocks = stream.clone().sample_blocks(n_tokens);
    let counts: Result<Vec<(usize, usize)>> = blocks.par_iter().map(|b| block_hits(params, &b.tokens)).collect();
    let (hits, n) = counts?.into_iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if n == 0 { 0.0 } else { hits as f64 / n as f64 })
}

impl AsRef<[TokenId]> for crate::corpus::TokenBlock {
    fn as_ref(&self) -> &[TokenId] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LmConfig {
        LmConfig { vocab_size: 32, d_model: 8, n_heads: 2, d_mlp: 16, ctx_len: 16, seed: 3, ..Default::default() }
    }

    #[test]
    fn closed_form_param_count() {
        let p = LmParams::<f64>::init(&tiny()).unwrap();
        // 2*32*8 + 4*8*8 + 3*8*16 + 3*8
        assert_eq!(p.num_params(), 512 + 256 + 384 + 24);
        assert_eq!(p.num_params(), tiny().num_params());
    }

    #[test]
    fn init_is_deterministic_and_norms_are_one() {
        let a = LmParams::<f32>::init(&tiny()).unwrap();
        let b = LmParams::<f32>::init(&tiny()).unwrap();
        assert_eq!(a.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.to_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(a.attn_norm.iter().chain(a.mlp_norm.iter()).chain(a.final_norm.iter()).all(|&g| g == 1.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(LmConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(LmConfig { d_model: 6, n_heads: 2, ..tiny() }.validate().is_err());
    }

    #[test]
    fn forward_contract_errors() {
        let p = LmParams::<f64>::init(&tiny()).unwrap();
        assert!(matches!(p.forward(&[1; 17], &[]), Err(Error::Contract(_))));
        assert!(matches!(p.forward(&[1, 32], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::<f64>::zeros((5, 4096));
        let loss = lm_loss(logits.view(), &[1, 2, 3, 4, 5], None).unwrap();
        assert!((loss - (4096f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 40.0] {
            let mut logits = Array2::<f64>::zeros((3, 8));
            for (i, t) in [2usize, 5, 7].iter().enumerate() {
                logits[[i, *t]] = margin;
            }
            let l = lm_loss(logits.view(), &[2, 5, 7], None).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn pad_targets_are_masked() {
        let mut logits = Array2::<f64>::zeros((2, 4));
        logits[[1, 0]] = 100.0;
        let masked = lm_loss(logits.view(), &[1, 3], Some(1)).unwrap();
        let only_second = lm_loss(logits.slice(s![1..2, ..]), &[3], None).unwrap();
        assert_eq!(masked, only_second);
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let p = LmParams::<f64>::init(&tiny()).unwrap();
        let blocks = vec![vec![1u32, 4, 9, 4, 2], vec![3, 3, 1, 9]];
        let (_, g) = p.loss_and_grads(&blocks).unwrap();
        // Token 2 only appears as a final target; 20 never appears.
        assert!(g.embed.row(20).iter().all(|&x| x == 0.0));
        assert!(g.embed.row(2).iter().all(|&x| x == 0.0));
        assert!(g.embed.row(4).iter().any(|&x| x != 0.0));
        for ((n1, s1, _), (n2, s2, _)) in g.tensors().iter().zip(p.tensors().iter()) {
            assert_eq!((n1, s1), (n2, s2));
        }
    }
}
