//! Sparse autoencoder over MLP hidden activations.
//!
//! ```text
//! x_bar = x - c(x) - b_dec
//! f     = ReLU(W_enc x_bar + b_enc)
//! x_hat = W_dec f + b_dec
//! L     = mean_batch(mean_elem((x - x_hat)^2)) + lambda * mean_batch(sum |f|)
//! ```
//!
//! `c(x)` depends on [`Centering`]. Decoder columns are renormalized to unit
//! length after every optimizer step.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{contract, Error, Result};
use crate::lm::LmParams;
use crate::params::ParamSet;
use crate::train::{adam_step, AdamConfig, AdamState};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    /// Subtract only the decoder bias.
    #[default]
    DecoderBias,
    /// Also subtract the mean of the input vector's own entries.
    ScalarMean,
    /// Also subtract a fixed dataset mean estimated before training.
    DatasetMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub n: usize,
    pub expansion: usize,
    pub l1_coeff: f64,
    pub adam: AdamConfig,
    pub block_len: usize,
    pub batch_blocks: usize,
    pub train_tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub centering: Centering,
    /// A feature with no activation over this many trailing tokens is dead.
    pub dead_window_tokens: usize,
    pub eval_every_tokens: usize,
}

impl SaeConfig {
    /// Hyperparameters of the reference setup for input width `n`.
    pub fn reference(n: usize) -> Self {
        SaeConfig {
            n,
            expansion: 16,
            l1_coeff: 3e-4,
            adam: AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.9999, eps: 1e-8 },
            block_len: 24,
            batch_blocks: 128,
            train_tokens: 15_000_000,
            seed: 0,
            centering: Centering::DecoderBias,
            dead_window_tokens: 1_000_000,
            eval_every_tokens: 1_000_000,
        }
    }

    pub fn m(&self) -> usize {
        self.n * self.expansion
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.block_len * self.batch_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.expansion == 0 {
            return Err(Error::Config("SAE width and expansion must be positive".into()));
        }
        if !(self.l1_coeff >= 0.0) {
            return Err(Error::Config("L1 coefficient must be non-negative".into()));
        }
        if self.block_len == 0 || self.batch_blocks == 0 || self.eval_every_tokens == 0 {
            return Err(Error::Config("SAE batch geometry must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T: Scalar> {
    pub config: SaeConfig,
    /// `m x n`
    pub w_enc: Array2<T>,
    pub b_enc: Array1<T>,
    /// `n x m`, unit-norm columns.
    pub w_dec: Array2<T>,
    pub b_dec: Array1<T>,
    /// Fixed input mean, used only with [`Centering::DatasetMean`].
    pub data_mean: Option<Array1<T>>,
}

impl<T: Scalar> ParamSet<T> for SaeParams<T> {
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        vec![
            ("w_enc", self.w_enc.shape().to_vec(), self.w_enc.as_slice().unwrap()),
            ("b_enc", self.b_enc.shape().to_vec(), self.b_enc.as_slice().unwrap()),
            ("w_dec", self.w_dec.shape().to_vec(), self.w_dec.as_slice().unwrap()),
            ("b_dec", self.b_dec.shape().to_vec(), self.b_dec.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("w_enc", self.w_enc.as_slice_mut().unwrap()),
            ("b_enc", self.b_enc.as_slice_mut().unwrap()),
            ("w_dec", self.w_dec.as_slice_mut().unwrap()),
            ("b_dec", self.b_dec.as_slice_mut().unwrap()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaeLoss {
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
}

impl<T: Scalar> SaeParams<T> {
    /// Encoder rows drawn from N(0, 1/n); the decoder starts as the
    /// column-normalized encoder transpose; biases start at zero.
    pub fn init(cfg: &SaeConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, m) = (cfg.n, cfg.m());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).unwrap();
        let w_enc = Array2::from_shape_fn((m, n), |_| T::of(dist.sample(&mut rng)));
        let mut p = SaeParams {
            config: cfg.clone(),
            w_dec: w_enc.t().as_standard_layout().into_owned(),
            w_enc,
            b_enc: Array1::zeros(m),
            b_dec: Array1::zeros(n),
            data_mean: None,
        };
        p.normalize_decoder();
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn m(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, d) in z.tensors_mut() {
            d.fill(T::zero());
        }
        z
    }

    /// Rescales each decoder column to unit L2 norm (zero columns untouched).
    pub fn normalize_decoder(&mut self) {
        for mut col in self.w_dec.columns_mut() {
            let norm = col.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::zero() {
                col.mapv_inplace(|x| x / norm);
            }
        }
    }

    /// Largest `| ||W_dec[:, j]|| - 1 |` over columns.
    pub fn max_decoder_norm_deviation(&self) -> f64 {
        self.w_dec
            .columns()
            .into_iter()
            .map(|c| (c.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn center_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut xc = &x - &self.b_dec;
        match self.config.centering {
            Centering::DecoderBias => {}
            Centering::ScalarMean => {
                for (mut row, orig) in xc.rows_mut().into_iter().zip(x.rows()) {
                    let mean = orig.sum() / T::of(orig.len() as f64);
                    row.mapv_inplace(|v| v - mean);
                }
            }
            Centering::DatasetMean => {
                if let Some(mu) = &self.data_mean {
                    xc -= mu;
                }
            }
        }
        xc
    }

    fn check_width(&self, width: usize) -> Result<()> {
        contract!(width == self.n(), "input width {width} does not match SAE width {}", self.n());
        Ok(())
    }

    /// Feature activations for a batch of inputs (`N x n` -> `N x m`).
    pub fn encode_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_width(x.ncols())?;
        let z = self.center_batch(x).dot(&self.w_enc.t()) + &self.b_enc;
        Ok(z.mapv(|v| v.max(T::zero())))
    }

    pub fn encode(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        let x2 = x.insert_axis(Axis(0));
        Ok(self.encode_batch(x2)?.row(0).to_owned())
    }

    pub fn decode_batch(&self, f: ArrayView2<T>) -> Result<Array2<T>> {
        contract!(f.ncols() == self.m(), "code width {} does not match SAE hidden width {}", f.ncols(), self.m());
        Ok(f.dot(&self.w_dec.t()) + &self.b_dec)
    }

    pub fn decode(&self, f: ArrayView1<T>) -> Result<Array1<T>> {
        Ok(self.decode_batch(f.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    pub fn reconstruct(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let f = self.encode_batch(x)?;
        self.decode_batch(f.view())
    }

    pub fn loss(&self, x: ArrayView2<T>) -> Result<SaeLoss> {
        contract!(x.nrows() > 0, "empty batch");
        let f = self.encode_batch(x)?;
        let xh = self.decode_batch(f.view())?;
        Ok(loss_terms(x, &f, &xh, self.config.l1_coeff))
    }

    /// Loss and its exact gradients. The decoder bias receives gradient
    /// through both the reconstruction and the input centering.
    pub fn loss_and_grads(&self, x: ArrayView2<T>) -> Result<(SaeLoss, SaeParams<T>)> {
        contract!(x.nrows() > 0, "empty batch");
        self.check_width(x.ncols())?;
        let (rows, n) = (x.nrows(), self.n());
        let xc = self.center_batch(x);
        let z = xc.dot(&self.w_enc.t()) + &self.b_enc;
        let f = z.mapv(|v| v.max(T::zero()));
        let xh = f.dot(&self.w_dec.t()) + &self.b_dec;
        let loss = loss_terms(x, &f, &xh, self.config.l1_coeff);

        let mut g = self.zeros_like();
        let d_xh = (&xh - &x) * T::of(2.0 / (rows * n) as f64);
        g.w_dec = d_xh.t().dot(&f);
        let mut db_dec = d_xh.sum_axis(Axis(0));
        let l1 = T::of(self.config.l1_coeff / rows as f64);
        let mut dz = d_xh.dot(&self.w_dec);
        ndarray::Zip::from(&mut dz).and(&z).for_each(|d, &zv| {
            *d = if zv > T::zero() { *d + l1 } else { T::zero() };
        });
        g.w_enc = dz.t().dot(&xc);
        g.b_enc = dz.sum_axis(Axis(0));
        // x_bar = x - ... - b_dec  =>  d/d b_dec picks up -dL/dx_bar.
        let d_xc = dz.dot(&self.w_enc);
        db_dec -= &d_xc.sum_axis(Axis(0));
        g.b_dec = db_dec;
        Ok((loss, g))
    }
}

fn loss_terms<T: Scalar>(x: ArrayView2<T>, f: &Array2<T>, xh: &Array2<T>, lambda: f64) -> SaeLoss {
    let rows = x.nrows() as f64;
    let n = x.ncols() as f64;
    let sq: f64 = ndarray::Zip::from(&x).and(xh).fold(0.0, |acc, &a, &b| {
        let d = a.f64() - b.f64();
        acc + d * d
    });
    let abs: f64 = f.iter().map(|v| v.f64().abs()).sum();
    let mse = sq / (rows * n);
    let l1 = abs / rows;
    SaeLoss { total: mse + lambda * l1, mse, l1 }
}

/// Source of activation batches (`rows x n`) for SAE training.
pub trait ActivationSource<T: Scalar> {
    fn width(&self) -> usize;
    fn next_batch(&mut self) -> Result<Array2<T>>;
}

/// Cycles through a fixed activation matrix in seeded, reshuffled epochs of
/// `block_len`-row blocks.
pub struct MatrixSource<T: Scalar> {
    data: Array2<T>,
    block_len: usize,
    batch_blocks: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> MatrixSource<T> {
    pub fn new(data: Array2<T>, block_len: usize, batch_blocks: usize, seed: u64) -> Result<Self> {
        contract!(data.nrows() >= block_len && block_len > 0, "activation matrix shorter than one block");
        let n_blocks = data.nrows() / block_len;
        let mut s = MatrixSource {
            data,
            block_len,
            batch_blocks,
            order: (0..n_blocks).collect(),
            cursor: n_blocks,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle_if_needed();
        Ok(s)
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }
}

impl<T: Scalar> ActivationSource<T> for MatrixSource<T> {
    fn width(&self) -> usize {
        self.data.ncols()
    }

    fn next_batch(&mut self) -> Result<Array2<T>> {
        let mut out = Array2::zeros((self.batch_blocks * self.block_len, self.data.ncols()));
        for b in 0..self.batch_blocks {
            self.reshuffle_if_needed();
            let blk = self.order[self.cursor];
            self.cursor += 1;
            let src = self.data.slice(ndarray::s![blk * self.block_len..(blk + 1) * self.block_len, ..]);
            out.slice_mut(ndarray::s![b * self.block_len..(b + 1) * self.block_len, ..]).assign(&src);
        }
        Ok(out)
    }
}

/// Streams MLP hidden activations of an LM over sampled blocks, shuffled at
/// block granularity through a buffer of `buffer_batches` batches.
pub struct LmActivationSource<'a, T: Scalar> {
    lm: &'a LmParams<T>,
    stream: TokenStream,
    batch_blocks: usize,
    buffer_batches: usize,
    buffer: Vec<Array2<T>>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> LmActivationSource<'a, T> {
    pub fn new(lm: &'a LmParams<T>, stream: TokenStream, batch_blocks: usize, buffer_batches: usize, seed: u64) -> Self {
        LmActivationSource { lm, stream, batch_blocks, buffer_batches: buffer_batches.max(1), buffer: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<T: Scalar> ActivationSource<T> for LmActivationSource<'_, T> {
    fn width(&self) -> usize {
        self.lm.config.d_mlp
    }

    fn next_batch(&mut self) -> Result<Array2<T>> {
        if self.buffer.len() < self.batch_blocks {
            let blocks = self.stream.sample_blocks(self.stream.block_len() * self.batch_blocks * self.buffer_batches);
            let acts: Result<Vec<Array2<T>>> = blocks.par_iter().map(|b| self.lm.mlp_post(&b.tokens)).collect();
            self.buffer.extend(acts?);
            self.buffer.shuffle(&mut self.rng);
        }
        let take: Vec<Array2<T>> = self.buffer.split_off(self.buffer.len() - self.batch_blocks);
        let views: Vec<_> = take.iter().map(|a| a.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("blocks share a width"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeDiagnostics {
    pub step: u64,
    pub tokens_seen: usize,
    /// Mean number of active features per token over the window.
    pub mean_l0: f64,
    pub mean_mse: f64,
    pub mean_loss: f64,
    pub dead_features: Vec<usize>,
    pub explained_loss: Option<f64>,
}

pub enum SaeEvent<'a, T: Scalar> {
    Step(u64, &'a SaeParams<T>),
    Eval(&'a SaeDiagnostics, &'a SaeParams<T>),
    Diverged(&'a SaeParams<T>),
}

#[derive(Default)]
struct Window {
    tokens: usize,
    active: usize,
    mse_sum: f64,
    loss_sum: f64,
    batches: usize,
}

/// Adam training on batches from `source`, renormalizing decoder columns
/// after every step. The decoder bias starts at the first batch's mean (and
/// so does the dataset mean under [`Centering::DatasetMean`]).
pub fn train_sae<T: Scalar>(
    cfg: &SaeConfig,
    source: &mut dyn ActivationSource<T>,
    mut on_event: impl FnMut(SaeEvent<'_, T>) -> Result<()>,
) -> Result<(SaeParams<T>, Vec<SaeDiagnostics>)> {
    cfg.validate()?;
    contract!(source.width() == cfg.n, "activation width {} != SAE width {}", source.width(), cfg.n);
    let mut params = SaeParams::<T>::init(cfg)?;
    let mut state = AdamState::new(&params, cfg.adam);
    let mut last_active = vec![0usize; cfg.m()];
    let mut tokens_seen = 0usize;
    let mut window = Window::default();
    let mut next_eval = cfg.eval_every_tokens;
    let mut trace = Vec::new();
    let mut step = 0u64;
    while tokens_seen < cfg.train_tokens {
        let batch = source.next_batch()?;
        if step == 0 {
            let mean = batch.mean_axis(Axis(0)).expect("nonempty batch");
            if cfg.centering == Centering::DatasetMean {
                params.data_mean = Some(mean);
            } else {
                params.b_dec = mean;
            }
        }
        let (loss, grads) = params.loss_and_grads(batch.view())?;
        if !loss.total.is_finite() {
            on_event(SaeEvent::Diverged(&params))?;
            return Err(Error::Divergence { step, loss: loss.total });
        }
        // Sparsity statistics from the pre-step codes.
        let f = params.encode_batch(batch.view())?;
        for (i, row) in f.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > T::zero() {
                    window.active += 1;
                    last_active[j] = tokens_seen + i + 1;
                }
            }
        }
        adam_step(&mut params, &grads, &mut state)?;
        params.normalize_decoder();
        step += 1;
        tokens_seen += batch.nrows();
        window.tokens += batch.nrows();
        window.mse_sum += loss.mse;
        window.loss_sum += loss.total;
        window.batches += 1;
        on_event(SaeEvent::Step(step, &params))?;

        if tokens_seen >= next_eval || tokens_seen >= cfg.train_tokens {
            let dead_features = if tokens_seen >= cfg.dead_window_tokens {
                (0..cfg.m()).filter(|&j| tokens_seen - last_active[j] >= cfg.dead_window_tokens).collect()
            } else {
                Vec::new()
            };
            let d = SaeDiagnostics {
                step,
                tokens_seen,
                mean_l0: window.active as f64 / window.tokens as f64,
                mean_mse: window.mse_sum / window.batches as f64,
                mean_loss: window.loss_sum / window.batches as f64,
                dead_features,
                explained_loss: None,
            };
            log::debug!("sae step {step}: l0 {:.2} mse {:.3e} dead {}", d.mean_l0, d.mean_mse, d.dead_features.len());
            on_event(SaeEvent::Eval(&d, &params))?;
            trace.push(d);
            window = Window::default();
            while next_eval <= tokens_seen {
                next_eval += cfg.eval_every_tokens;
            }
        }
    }
    Ok((params, trace))
}

/// Mean L0 and MSE of `sae` on a fixed activation matrix.
pub fn sparsity_stats<T: Scalar>(sae: &SaeParams<T>, x: ArrayView2<T>) -> Result<(f64, f64)> {
    let f = sae.encode_batch(x)?;
    let l0 = f.iter().filter(|&&v| v > T::zero()).count() as f64 / x.nrows() as f64;
    let loss = sae.loss(x)?;
    Ok((l0, loss.mse))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainedLoss {
    /// `(L_ablate - L_subst) / (L_ablate - L_clean)`, unclamped.
    pub raw: f64,
    pub clamped: f64,
    pub clean: f64,
    pub substituted: f64,
    pub ablated: f64,
}

/// Fraction of the ablation loss gap recovered when the MLP hidden state is
/// replaced by its SAE reconstruction, over `n_tokens` tokens of a fork of
/// `stream`.
pub fn explained_loss<T: Scalar>(
    lm: &LmParams<T>,
    sae: &SaeParams<T>,
    stream: &TokenStream,
    n_tokens: usize,
) -> Result<ExplainedLoss> {
    contract!(lm.config.d_mlp == sae.n(), "LM d_mlp {} != SAE width {}", lm.config.d_mlp, sae.n());
    let blocks = stream.clone().sample_blocks(n_tokens);
    let substitute = |h: &mut Array2<T>| {
        *h = sae.reconstruct(h.view()).expect("width checked above");
    };
    let ablate = |h: &mut Array2<T>| h.fill(T::zero());
    let per_block: Result<Vec<[f64; 4]>> = blocks
        .par_iter()
        .map(|b| {
            let (c, n) = lm.block_loss(&b.tokens, None)?;
            let (s, _) = lm.block_loss(&b.tokens, Some(&substitute))?;
            let (a, _) = lm.block_loss(&b.tokens, Some(&ablate))?;
            let w = n as f64;
            Ok([c * w, s * w, a * w, w])
        })
        .collect();
    let sums = per_block?.into_iter().fold([0.0; 4], |acc, x| [acc[0] + x[0], acc[1] + x[1], acc[2] + x[2], acc[3] + x[3]]);
    contract!(sums[3] > 0.0, "no scored positions in the evaluation stream");
    let (clean, substituted, ablated) = (sums[0] / sums[3], sums[1] / sums[3], sums[2] / sums[3]);
    if (ablated - clean).abs() < 1e-9 {
        return Err(Error::UndefinedMetric(format!(
            "explained loss: ablated and clean losses coincide ({ablated} vs {clean})"
        )));
    }
    let raw = (ablated - substituted) / (ablated - clean);
    Ok(ExplainedLoss { raw, clamped: raw.clamp(0.0, 1.0), clean, substituted, ablated })
}
