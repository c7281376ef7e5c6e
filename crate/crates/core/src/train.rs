//! Adam optimizer, LM training/fine-tuning loop and evaluation.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{contract, Error, Result};
use crate::lm::{block_metrics, LmParams};
use crate::params::ParamSet;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P, config: AdamConfig) -> Self {
        let n = params.num_params();
        AdamState { config, m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }
}

/// One bias-corrected Adam update. Gradients are checked for non-finite
/// entries first; on failure nothing is modified.
pub fn adam_step<T: Scalar, P: ParamSet<T>>(params: &mut P, grads: &P, state: &mut AdamState<T>) -> Result<()> {
    contract!(
        state.m.len() == params.num_params() && grads.num_params() == params.num_params(),
        "optimizer buffers do not match the parameter manifest"
    );
    if let Err(name) = grads.all_finite() {
        return Err(Error::NonFinite { tensor: format!("grad.{name}"), step: state.step + 1 });
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::of(c.beta1);
    let b2 = T::of(c.beta2);
    let one = T::one();
    let corr1 = T::of(1.0 - c.beta1.powi(t));
    let corr2 = T::of(1.0 - c.beta2.powi(t));
    let lr = T::of(c.lr);
    let eps = T::of(c.eps);
    let g_flat = grads.to_flat();
    let mut offset = 0;
    for (_, p) in params.tensors_mut() {
        for (j, w) in p.iter_mut().enumerate() {
            let i = offset + j;
            let g = g_flat[i];
            state.m[i] = b1 * state.m[i] + (one - b1) * g;
            state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
            let m_hat = state.m[i] / corr1;
            let v_hat = state.v[i] / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        offset += p.len();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_tokens: usize,
    pub batch_blocks: usize,
    pub block_len: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub eval_tokens: usize,
    pub seed: u64,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_tokens == 0 && self.init_from.is_none() {
            return Err(Error::Config("total_tokens must be positive when training from scratch".into()));
        }
        if self.batch_blocks == 0 || self.block_len < 2 {
            return Err(Error::Config("batch_blocks must be positive and block_len at least 2".into()));
        }
        if self.eval_every == 0 || (self.total_tokens > 0 && self.eval_every > self.total_tokens) {
            return Err(Error::Config("eval_every must be in 1..=total_tokens".into()));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_blocks * self.block_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMetrics {
    pub name: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// One line of the metrics trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub tokens_seen: usize,
    pub train_loss: Option<f64>,
    pub streams: Vec<StreamMetrics>,
}

impl EvalRecord {
    pub fn stream(&self, name: &str) -> Option<&StreamMetrics> {
        self.streams.iter().find(|s| s.name == name)
    }
}

/// Per-stream mean loss and next-token accuracy over `n_tokens` tokens of a
/// fork of each stream. Pure: repeated calls give identical numbers.
pub fn evaluate<T: Scalar>(
    params: &LmParams<T>,
    streams: &[(String, TokenStream)],
    n_tokens: usize,
) -> Result<Vec<StreamMetrics>> {
    contract!(n_tokens > 0, "n_tokens must be positive");
    streams
        .iter()
        .map(|(name, stream)| {
            let blocks = stream.clone().sample_blocks(n_tokens);
            let per_block: Result<Vec<(f64, usize, usize)>> = blocks
                .par_iter()
                .map(|b| block_metrics(params, &b.tokens))
                .collect();
            let (loss_sum, hits, n) =
                per_block?.into_iter().fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
            let denom = n.max(1) as f64;
            Ok(StreamMetrics { name: name.clone(), loss: loss_sum / denom, accuracy: hits as f64 / denom })
        })
        .collect()
}

pub struct TrainOutcome<T: Scalar> {
    pub params: LmParams<T>,
    pub trace: Vec<EvalRecord>,
}

/// Training events delivered to the caller (checkpointing, logging).
pub enum TrainEvent<'a, T: Scalar> {
    Eval(&'a EvalRecord, &'a LmParams<T>),
    /// The loss became non-finite; these are the last finite parameters.
    Diverged(&'a LmParams<T>),
}

/// Trains (or, with parameters loaded from a checkpoint, fine-tunes) `params`
/// on `train` for `cfg.total_tokens` tokens.
///
/// Evaluates every `eval_every` tokens and once at the start and end; each
/// evaluation is reported through `on_event` before training continues.
pub fn train_lm<T: Scalar>(
    cfg: &TrainConfig,
    mut params: LmParams<T>,
    mut train: TokenStream,
    evals: &[(String, TokenStream)],
    mut on_event: impl FnMut(TrainEvent<'_, T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    contract!(
        train.block_len() == cfg.block_len,
        "train stream block length {} != configured {}",
        train.block_len(),
        cfg.block_len
    );
    contract!(cfg.block_len - 1 <= params.config.ctx_len, "block_len exceeds ctx_len + 1");
    let mut trace = Vec::new();
    if cfg.total_tokens == 0 {
        return Ok(TrainOutcome { params, trace });
    }
    let mut state = AdamState::new(&params, cfg.adam);
    let steps = cfg.total_tokens.div_ceil(cfg.tokens_per_step());
    let mut tokens_seen = 0;
    let mut next_eval = 0;
    let mut recent_loss = Vec::new();
    for step in 0..=steps {
        if tokens_seen >= next_eval || step == steps {
            let record = EvalRecord {
                step: step as u64,
                tokens_seen,
                train_loss: if recent_loss.is_empty() {
                    None
                } else {
                    Some(recent_loss.iter().sum::<f64>() / recent_loss.len() as f64)
                },
                streams: if evals.is_empty() { Vec::new() } else { evaluate(&params, evals, cfg.eval_tokens)? },
            };
            recent_loss.clear();
            log::info!("step {step} tokens {tokens_seen}: {:?}", record.streams);
            on_event(TrainEvent::Eval(&record, &params))?;
            trace.push(record);
            next_eval += cfg.eval_every;
        }
        if step == steps {
            break;
        }
        let batch = train.sample_blocks(cfg.tokens_per_step());
        let (loss, mut grads) = params.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            on_event(TrainEvent::Diverged(&params))?;
            return Err(Error::Divergence { step: step as u64, loss });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.l2_norm();
            if norm > clip {
                grads.scale(T::of(clip / norm));
            }
        }
        adam_step(&mut params, &grads, &mut state)?;
        if let Err(name) = params.all_finite() {
            return Err(Error::NonFinite { tensor: name.to_string(), step: state.step });
        }
        recent_loss.push(loss);
        tokens_seen += cfg.tokens_per_step();
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single-tensor parameter set for optimizer tests.
    #[derive(Clone)]
    struct Vector(Vec<f64>);

    impl ParamSet<f64> for Vector {
        fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
            vec![("w", vec![self.0.len()], &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("w", &mut self.0)]
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Vector(vec![1.0, -2.0, 3.5]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &Vector(vec![0.0; 3]), &mut st).unwrap();
        }
        assert_eq!(p.0, vec![1.0, -2.0, 3.5]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25;
        // w' = 1 - 0.1 * 0.5 / (0.5 + 1e-8) = 0.900000001999999996
        let mut p = Vector(vec![1.0]);
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut st = AdamState::new(&p, cfg);
        adam_step(&mut p, &Vector(vec![0.5]), &mut st).unwrap();
        assert!((p.0[0] - 0.900_000_002).abs() < 1e-15, "{}", p.0[0]);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_leaves_params() {
        let mut p = Vector(vec![1.0]);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &Vector(vec![f64::NAN]), &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref tensor, .. } if tensor == "grad.w"));
        assert_eq!(p.0, vec![1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn trajectories_are_bitwise_reproducible() {
        let run = || {
            let mut p = Vector(vec![0.3, -0.7]);
            let mut st = AdamState::new(&p, AdamConfig::default());
            for k in 0..20 {
                let g = Vector(p.0.iter().map(|w| 2.0 * w + 0.01 * k as f64).collect());
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            total_tokens: 0,
            batch_blocks: 1,
            block_len: 8,
            adam: AdamConfig::default(),
            grad_clip: None,
            eval_every: 1,
            eval_tokens: 8,
            seed: 0,
            init_from: None,
        };
        assert!(cfg.validate().is_err());
    }
}
