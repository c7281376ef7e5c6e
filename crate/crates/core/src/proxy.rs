//! Log-likelihood-ratio feature proxy: how much more likely a token string
//! is under a single-token feature hypothesis than under the corpus unigram
//! distribution. All logarithms are natural.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenStream, Tokenizer};
use crate::error::{contract, Error, Result};
use crate::flow::{ActivationMatrix, SparseRow};
use crate::Scalar;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Add-alpha smoothed unigram distribution over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnigramModel {
    pub counts: Vec<u64>,
    pub total: u64,
    pub alpha: f64,
}

impl UnigramModel {
    pub fn from_tokens(tokens: &[TokenId], vocab_size: usize, alpha: f64) -> Result<Self> {
        contract!(alpha >= 0.0, "smoothing alpha must be non-negative, got {alpha}");
        contract!(!tokens.is_empty(), "cannot fit a unigram model on zero tokens");
        let mut counts = vec![0u64; vocab_size];
        for &t in tokens {
            contract!((t as usize) < vocab_size, "token {t} outside vocabulary of {vocab_size}");
            counts[t as usize] += 1;
        }
        Ok(UnigramModel { counts, total: tokens.len() as u64, alpha })
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn prob(&self, t: TokenId) -> f64 {
        let c = self.counts.get(t as usize).copied().unwrap_or(0) as f64;
        (c + self.alpha) / (self.total as f64 + self.alpha * self.vocab_size() as f64)
    }
}

/// Counts `n_tokens` tokens drawn from a fork of `stream`.
pub fn fit_unigram(stream: &TokenStream, n_tokens: usize, alpha: f64) -> Result<UnigramModel> {
    contract!(n_tokens > 0, "n_tokens must be positive");
    let tokens: Vec<TokenId> = stream.clone().sample_blocks(n_tokens).into_iter().flat_map(|b| b.tokens).collect();
    UnigramModel::from_tokens(&tokens, stream.vocab_size(), alpha)
}

/// `P(t|h) = (1 - epsilon) * uniform(targets)(t) + epsilon * p(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHypothesis {
    pub name: String,
    pub target_tokens: BTreeSet<TokenId>,
    pub epsilon: f64,
}

impl FeatureHypothesis {
    pub fn new(name: impl Into<String>, targets: impl IntoIterator<Item = TokenId>, epsilon: f64) -> Result<Self> {
        let h = FeatureHypothesis { name: name.into(), target_tokens: targets.into_iter().collect(), epsilon };
        h.validate()?;
        Ok(h)
    }

    /// Targets are every token of the encodings of `strings`.
    pub fn from_strings(name: impl Into<String>, strings: &[String], tokenizer: &Tokenizer, epsilon: f64) -> Result<Self> {
        let targets: Vec<TokenId> = strings.iter().flat_map(|s| tokenizer.encode(s.as_bytes())).collect();
        FeatureHypothesis::new(name, targets, epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_tokens.is_empty() {
            return Err(Error::Config(format!("hypothesis `{}` has no target tokens", self.name)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("hypothesis `{}`: epsilon {} outside [0, 1]", self.name, self.epsilon)));
        }
        Ok(())
    }

    pub fn prob(&self, t: TokenId, u: &UnigramModel) -> f64 {
        let uniform = if self.target_tokens.contains(&t) { 1.0 / self.target_tokens.len() as f64 } else { 0.0 };
        (1.0 - self.epsilon) * uniform + self.epsilon * u.prob(t)
    }

    /// `log P(t|h) - log p(t)`.
    pub fn token_llr(&self, t: TokenId, u: &UnigramModel) -> Result<f64> {
        contract!((t as usize) < u.vocab_size(), "token {t} outside vocabulary of {}", u.vocab_size());
        let p = u.prob(t);
        if p == 0.0 {
            return Err(Error::UndefinedMetric(format!("unigram probability of token {t} is zero")));
        }
        let q = self.prob(t, u);
        if q == 0.0 {
            return Err(Error::UndefinedMetric(format!("hypothesis `{}` gives token {t} zero probability", self.name)));
        }
        Ok(q.ln() - p.ln())
    }
}

/// `sum over t in s of [log P(t|h) - log p(t)]`.
pub fn string_llr(s: &[TokenId], h: &FeatureHypothesis, u: &UnigramModel) -> Result<f64> {
    s.iter().map(|&t| h.token_llr(t, u)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Weights proportional to activation.
    #[default]
    ActivationWeighted,
    /// Every active position counts equally.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrReport {
    pub feature: usize,
    pub hypothesis: String,
    pub llr: f64,
    pub activation_mass_on_target: f64,
    /// `(1 - mass) / mass`; `None` when no activation falls on a target.
    pub off_target_activity_ratio: Option<f64>,
}

/// Feature-level LLR over the positions where the feature is active.
pub fn feature_llr<T: Scalar>(
    feature: usize,
    row: &SparseRow<T>,
    tokens: &[TokenId],
    h: &FeatureHypothesis,
    u: &UnigramModel,
    agg: Aggregation,
) -> Result<LlrReport> {
    let total: f64 = row.values.iter().map(|v| v.f64()).sum();
    if row.nnz() == 0 || !(total > 0.0) {
        return Err(Error::UndefinedMetric(format!("feature {feature} never activates")));
    }
    let (mut llr, mut on_target) = (0.0, 0.0);
    for (&i, &a) in row.indices.iter().zip(&row.values) {
        let t = *tokens.get(i as usize).ok_or_else(|| {
            Error::Contract(format!("activation at token {i} beyond the {} stream tokens", tokens.len()))
        })?;
        let a = a.f64();
        let w = match agg {
            Aggregation::ActivationWeighted => a / total,
            Aggregation::Unweighted => 1.0 / row.nnz() as f64,
        };
        llr += w * h.token_llr(t, u)?;
        if h.target_tokens.contains(&t) {
            on_target += a;
        }
    }
    let mass = (on_target / total).clamp(0.0, 1.0);
    Ok(LlrReport {
        feature,
        hypothesis: h.name.clone(),
        llr,
        activation_mass_on_target: mass,
        off_target_activity_ratio: (mass > 0.0).then(|| (1.0 - mass) / mass),
    })
}

/// Reports for every live feature of `matrix`, sorted by decreasing LLR.
pub fn rank_features<T: Scalar>(
    matrix: &ActivationMatrix<T>,
    tokens: &[TokenId],
    h: &FeatureHypothesis,
    u: &UnigramModel,
    agg: Aggregation,
) -> Result<Vec<LlrReport>> {
    contract!(tokens.len() == matrix.n_tokens, "{} tokens for a matrix over {}", tokens.len(), matrix.n_tokens);
    let reports: Result<Vec<Option<LlrReport>>> = matrix
        .rows
        .par_iter()
        .enumerate()
        .map(|(j, row)| match feature_llr(j, row, tokens, h, u, agg) {
            Ok(r) => Ok(Some(r)),
            Err(Error::UndefinedMetric(_)) if row.nnz() == 0 => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut out: Vec<LlrReport> = reports?.into_iter().flatten().collect();
    out.sort_by(|a, b| b.llr.total_cmp(&a.llr).then(a.feature.cmp(&b.feature)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eight() -> UnigramModel {
        // counts: 0 x4, 1 x2, 2 x1, 3 x1
        UnigramModel::from_tokens(&[0, 0, 1, 0, 2, 1, 3, 0], 4, 0.0).unwrap()
    }

    #[test]
    fn hand_counted_probabilities() {
        let u = eight();
        assert_eq!([u.prob(0), u.prob(1), u.prob(2), u.prob(3)], [0.5, 0.25, 0.125, 0.125]);
    }

    #[test]
    fn repeated_token_has_probability_one() {
        let u = UnigramModel::from_tokens(&[5; 10], 8, 0.0).unwrap();
        assert_eq!(u.prob(5), 1.0);
        assert_eq!(u.prob(4), 0.0);
    }

    #[test]
    fn smoothed_probabilities_sum_to_one() {
        for alpha in [0.0, 0.5, 3.0] {
            let u = UnigramModel::from_tokens(&[0, 1, 1, 7], 9, alpha).unwrap();
            let s: f64 = (0..9).map(|t| u.prob(t)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_is_an_error() {
        let u = UnigramModel::from_tokens(&[5; 10], 8, 0.0).unwrap();
        let h = FeatureHypothesis::new("h", [5], 0.5).unwrap();
        assert!(matches!(string_llr(&[4], &h, &u), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn point_mass_on_one_eighth_token_gives_ln_8() {
        let h = FeatureHypothesis::new("h", [2], 0.0).unwrap();
        let v = string_llr(&[2], &h, &eight()).unwrap();
        assert!((v - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_eighth_mass_on_target_gives_ratio_seven() {
        let u = eight();
        let h = FeatureHypothesis::new("h", [2], DEFAULT_EPSILON).unwrap();
        let row = SparseRow { indices: vec![0, 4], values: vec![7.0f64, 1.0] };
        let r = feature_llr(0, &row, &[0, 0, 1, 0, 2, 1, 3, 0], &h, &u, Aggregation::ActivationWeighted).unwrap();
        assert_eq!(r.activation_mass_on_target, 0.125);
        assert_eq!(r.off_target_activity_ratio, Some(7.0));
    }

    #[test]
    fn empty_hypothesis_is_rejected() {
        assert!(FeatureHypothesis::new("h", [], 0.1).is_err());
        assert!(FeatureHypothesis::new("h", [1], 1.5).is_err());
    }
}
