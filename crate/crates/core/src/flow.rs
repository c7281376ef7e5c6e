//! Feature activation matrices over a shared token stream, cross-model
//! feature correlation, persistence classification and the lineage graph.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TokenId, TokenStream};
use crate::error::{contract, Error, Result};
use crate::lm::LmParams;
use crate::sae::SaeParams;
use crate::Scalar;

/// A fixed token sequence cut into equal blocks; every model of a lineage
/// is run over the same blocks so their features can be compared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedTokens {
    pub id: String,
    pub block_len: usize,
    pub tokens: Vec<TokenId>,
    pub digest: String,
}

impl SharedTokens {
    pub fn new(id: impl Into<String>, block_len: usize, tokens: Vec<TokenId>) -> Result<Self> {
        contract!(block_len > 0 && !tokens.is_empty(), "empty token stream");
        contract!(tokens.len().is_multiple_of(block_len), "{} tokens do not split into blocks of {block_len}", tokens.len());
        let digest = stream_digest(&tokens, block_len);
        Ok(SharedTokens { id: id.into(), block_len, tokens, digest })
    }

    /// Draws whole blocks from a fork of `stream` until `n_tokens` is reached.
    pub fn sample(id: impl Into<String>, stream: &TokenStream, n_tokens: usize) -> Result<Self> {
        let blocks = stream.clone().sample_blocks(n_tokens);
        let tokens = blocks.into_iter().flat_map(|b| b.tokens).collect();
        SharedTokens::new(id, stream.block_len(), tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blocks(&self) -> std::slice::Chunks<'_, TokenId> {
        self.tokens.chunks(self.block_len)
    }
}

/// SHA-256 over the block length and the token ids (little-endian `u32`).
pub fn stream_digest(tokens: &[TokenId], block_len: usize) -> String {
    let mut h = Sha256::new();
    h.update((block_len as u64).to_le_bytes());
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Nonzero activations of one feature: strictly increasing token indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow<T> {
    pub indices: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseRow<T> {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    /// Exact zero-variance test over the dense length `n`.
    pub fn is_constant(&self, n: usize) -> bool {
        match self.values.first() {
            None => true,
            Some(&v0) => self.nnz() == n && self.values.iter().all(|&v| v == v0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix<T: Scalar> {
    pub model_id: String,
    pub sae_id: String,
    pub token_stream_id: String,
    pub n_tokens: usize,
    pub stream_digest: String,
    pub rows: Vec<SparseRow<T>>,
}

impl<T: Scalar> ActivationMatrix<T> {
    pub fn m(&self) -> usize {
        self.rows.len()
    }

    /// Builds a matrix from a dense `n_tokens x m` array (negative entries
    /// are a contract violation).
    pub fn from_dense(
        model_id: &str,
        stream: &SharedTokens,
        sae_id: &str,
        dense: &Array2<T>,
    ) -> Result<Self> {
        contract!(dense.nrows() == stream.len(), "dense matrix has {} rows for {} tokens", dense.nrows(), stream.len());
        let mut rows = vec![SparseRow::default(); dense.ncols()];
        for (t, r) in dense.rows().into_iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                contract!(v >= T::zero(), "negative activation {v} at token {t}, feature {j}");
                if v > T::zero() {
                    rows[j].indices.push(t as u32);
                    rows[j].values.push(v);
                }
            }
        }
        Ok(ActivationMatrix {
            model_id: model_id.into(),
            sae_id: sae_id.into(),
            token_stream_id: stream.id.clone(),
            n_tokens: stream.len(),
            stream_digest: stream.digest.clone(),
            rows,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (j, row) in self.rows.iter().enumerate() {
            contract!(row.indices.len() == row.values.len(), "feature {j}: index/value lengths differ");
            contract!(row.indices.windows(2).all(|w| w[0] < w[1]), "feature {j}: token indices not strictly increasing");
            contract!(row.indices.last().is_none_or(|&i| (i as usize) < self.n_tokens), "feature {j}: token index out of range");
            contract!(row.values.iter().all(|&v| v >= T::zero() && v.is_finite()), "feature {j}: negative or non-finite activation");
        }
        Ok(())
    }

    /// Features with zero variance over the stream.
    pub fn dead(&self) -> BTreeSet<usize> {
        (0..self.m()).filter(|&j| self.rows[j].is_constant(self.n_tokens)).collect()
    }

    /// Per-token lists of `(feature, activation)`, in feature order.
    pub fn by_token(&self) -> Vec<Vec<(u32, T)>> {
        let mut out = vec![Vec::new(); self.n_tokens];
        for (j, row) in self.rows.iter().enumerate() {
            for (&t, &v) in row.indices.iter().zip(&row.values) {
                out[t as usize].push((j as u32, v));
            }
        }
        out
    }
}

/// SAE feature activations of `lm` over every block of `stream`.
pub fn collect_activations<T: Scalar>(
    lm: &LmParams<T>,
    sae: &SaeParams<T>,
    stream: &SharedTokens,
    model_id: &str,
    sae_id: &str,
) -> Result<ActivationMatrix<T>> {
    contract!(lm.config.d_mlp == sae.n(), "SAE width {} does not match LM d_mlp {}", sae.n(), lm.config.d_mlp);
    let per_block: Result<Vec<Vec<(u32, u32, T)>>> = stream
        .blocks()
        .collect::<Vec<_>>()
        .par_iter()
        .enumerate()
        .map(|(b, toks)| {
            let codes = sae.encode_batch(lm.mlp_post(toks)?.view())?;
            let base = (b * stream.block_len) as u32;
            let mut nz = Vec::new();
            for (i, row) in codes.rows().into_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if v > T::zero() {
                        nz.push((j as u32, base + i as u32, v));
                    }
                }
            }
            Ok(nz)
        })
        .collect();
    let mut rows = vec![SparseRow::default(); sae.m()];
    for block in per_block? {
        for (j, t, v) in block {
            let r: &mut SparseRow<T> = &mut rows[j as usize];
            r.indices.push(t);
            r.values.push(v);
        }
    }
    Ok(ActivationMatrix {
        model_id: model_id.into(),
        sae_id: sae_id.into(),
        token_stream_id: stream.id.clone(),
        n_tokens: stream.len(),
        stream_digest: stream.digest.clone(),
        rows,
    })
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    sum: f64,
    sum_sq: f64,
    constant: bool,
}

fn moments<T: Scalar>(row: &SparseRow<T>, n: usize) -> Moments {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for v in &row.values {
        let v = v.f64();
        sum += v;
        sum_sq += v * v;
    }
    Moments { sum, sum_sq, constant: row.is_constant(n) }
}

fn pearson_from(a: Moments, b: Moments, sum_ab: f64, n: usize) -> Option<f64> {
    if a.constant || b.constant {
        return None;
    }
    let n = n as f64;
    let cov = sum_ab - a.sum * b.sum / n;
    let var_a = a.sum_sq - a.sum * a.sum / n;
    let var_b = b.sum_sq - b.sum * b.sum / n;
    let denom = (var_a * var_b).sqrt();
    if !(denom > 0.0) {
        return None;
    }
    Some((cov / denom).clamp(-1.0, 1.0))
}

/// Pearson correlation of two sparse rows over the dense length `n`
/// (implicit zeros included), from sums accumulated in a single merge pass.
/// `None` when either row has zero variance.
pub fn pearson<T: Scalar>(a: &SparseRow<T>, b: &SparseRow<T>, n: usize) -> Option<f64> {
    let (mut i, mut j) = (0, 0);
    let mut sum_ab = 0.0;
    while i < a.nnz() && j < b.nnz() {
        match a.indices[i].cmp(&b.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum_ab += a.values[i].f64() * b.values[j].f64();
                i += 1;
                j += 1;
            }
        }
    }
    pearson_from(moments(a, n), moments(b, n), sum_ab, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub parent_feature: usize,
    pub child_feature: usize,
    pub correlation: f64,
}

/// Best counterpart of every feature on both sides of a parent/child pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matches {
    pub parent_model: String,
    pub child_model: String,
    pub m_parent: usize,
    pub m_child: usize,
    /// Indexed by child feature: best parent (`None` for dead children or
    /// when every parent is dead).
    pub best_parent: Vec<Option<FeatureMatch>>,
    /// Indexed by parent feature: best child.
    pub best_child: Vec<Option<FeatureMatch>>,
    pub dead_parent: BTreeSet<usize>,
    pub dead_child: BTreeSet<usize>,
}

/// For every live `target` feature, the live `source` feature with the
/// highest correlation (lowest id on ties). Correlations are accumulated in
/// increasing token order, the same order as [`pearson`], so the values are
/// bitwise identical to pairwise evaluation.
fn best_over<T: Scalar>(targets: &ActivationMatrix<T>, sources: &ActivationMatrix<T>) -> Vec<Option<(usize, f64)>> {
    let n = targets.n_tokens;
    let src_moments: Vec<Moments> = sources.rows.iter().map(|r| moments(r, n)).collect();
    let src_by_token = sources.by_token();
    targets
        .rows
        .par_iter()
        .map_init(
            || vec![0.0f64; sources.m()],
            |dot, row| {
                let tm = moments(row, n);
                if tm.constant {
                    return None;
                }
                dot.fill(0.0);
                for (&t, &v) in row.indices.iter().zip(&row.values) {
                    for &(i, u) in &src_by_token[t as usize] {
                        dot[i as usize] += u.f64() * v.f64();
                    }
                }
                let mut best: Option<(usize, f64)> = None;
                for (i, &sm) in src_moments.iter().enumerate() {
                    if let Some(r) = pearson_from(sm, tm, dot[i], n) {
                        if best.is_none_or(|(_, b)| r > b) {
                            best = Some((i, r));
                        }
                    }
                }
                best
            },
        )
        .collect()
}

/// Greedy per-feature argmax matching in both directions (many-to-one allowed).
pub fn best_matches<T: Scalar>(parent: &ActivationMatrix<T>, child: &ActivationMatrix<T>) -> Result<Matches> {
    if parent.stream_digest != child.stream_digest || parent.n_tokens != child.n_tokens {
        return Err(Error::Comparability(format!(
            "`{}` was collected on stream {} ({} tokens), `{}` on {} ({} tokens)",
            parent.model_id, parent.stream_digest, parent.n_tokens, child.model_id, child.stream_digest, child.n_tokens
        )));
    }
    let best_parent = best_over(child, parent)
        .into_iter()
        .enumerate()
        .map(|(c, b)| b.map(|(p, r)| FeatureMatch { parent_feature: p, child_feature: c, correlation: r }))
        .collect();
    let best_child = best_over(parent, child)
        .into_iter()
        .enumerate()
        .map(|(p, b)| b.map(|(c, r)| FeatureMatch { parent_feature: p, child_feature: c, correlation: r }))
        .collect();
    Ok(Matches {
        parent_model: parent.model_id.clone(),
        child_model: child.model_id.clone(),
        m_parent: parent.m(),
        m_child: child.m(),
        best_parent,
        best_child,
        dead_parent: parent.dead(),
        dead_child: child.dead(),
    })
}

pub const DEFAULT_THRESHOLD: f64 = 0.80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionClassification {
    pub parent_model: String,
    pub child_model: String,
    pub threshold: f64,
    /// Sorted by `(parent, child)`.
    pub persisting: Vec<FeatureMatch>,
    pub emerging: BTreeSet<usize>,
    pub disappearing: BTreeSet<usize>,
    pub dead_parent: BTreeSet<usize>,
    pub dead_child: BTreeSet<usize>,
}

impl EvolutionClassification {
    pub fn persisting_parents(&self) -> BTreeSet<usize> {
        self.persisting.iter().map(|m| m.parent_feature).collect()
    }

    pub fn persisting_children(&self) -> BTreeSet<usize> {
        self.persisting.iter().map(|m| m.child_feature).collect()
    }

    /// Checks that live features on each side are split exactly between
    /// persisting and emerging (child) or disappearing (parent).
    pub fn check_partition(&self, m_parent: usize, m_child: usize) -> Result<()> {
        let side = |persist: BTreeSet<usize>, other: &BTreeSet<usize>, dead: &BTreeSet<usize>, m: usize, what: &str| {
            contract!(persist.is_disjoint(other), "{what}: feature both persisting and not");
            contract!(persist.is_disjoint(dead) && other.is_disjoint(dead), "{what}: dead feature classified");
            contract!(persist.len() + other.len() + dead.len() == m, "{what}: partition does not cover all features");
            Ok(())
        };
        side(self.persisting_children(), &self.emerging, &self.dead_child, m_child, "child")?;
        side(self.persisting_parents(), &self.disappearing, &self.dead_parent, m_parent, "parent")
    }
}

/// Persisting pairs are the best matches (from either side) with
/// correlation above `threshold`; live children without one emerge and live
/// parents without one disappear.
pub fn classify(matches: &Matches, threshold: f64) -> EvolutionClassification {
    let above = |m: &&FeatureMatch| m.correlation > threshold;
    let pairs: BTreeMap<(usize, usize), FeatureMatch> = matches
        .best_parent
        .iter()
        .chain(&matches.best_child)
        .flatten()
        .filter(above)
        .map(|m| ((m.parent_feature, m.child_feature), *m))
        .collect();
    let persisting: Vec<FeatureMatch> = pairs.into_values().collect();
    let pc: BTreeSet<usize> = persisting.iter().map(|m| m.child_feature).collect();
    let pp: BTreeSet<usize> = persisting.iter().map(|m| m.parent_feature).collect();
    let emerging = (0..matches.m_child).filter(|j| !matches.dead_child.contains(j) && !pc.contains(j)).collect();
    let disappearing = (0..matches.m_parent).filter(|i| !matches.dead_parent.contains(i) && !pp.contains(i)).collect();
    EvolutionClassification {
        parent_model: matches.parent_model.clone(),
        child_model: matches.child_model.clone(),
        threshold,
        persisting,
        emerging,
        disappearing,
        dead_parent: matches.dead_parent.clone(),
        dead_child: matches.dead_child.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub parent: String,
    pub child: String,
    pub persisting: usize,
    pub emerging: usize,
    pub disappearing: usize,
    pub dead_parent: usize,
    pub dead_child: usize,
}

impl FlowEdge {
    fn of(c: &EvolutionClassification) -> Self {
        FlowEdge {
            parent: c.parent_model.clone(),
            child: c.child_model.clone(),
            persisting: c.persisting.len(),
            emerging: c.emerging.len(),
            disappearing: c.disappearing.len(),
            dead_parent: c.dead_parent.len(),
            dead_child: c.dead_child.len(),
        }
    }
}

/// Feature counts along multi-hop paths of the lineage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainCounts {
    /// Base features persisting into at least one fine-tune.
    pub base_into_either_finetune: usize,
    /// Merged features persisting from at least one fine-tune.
    pub merged_from_either_finetune: usize,
    /// Merged features persisting from a fine-tune feature that itself
    /// persists from the base.
    pub merged_from_base: usize,
    /// `merged_from_either_finetune - merged_from_base`.
    pub merged_emerged_in_finetune: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<FlowEdge>,
    pub chains: ChainCounts,
}

/// Lineage graph for base -> {fine-tune A, fine-tune B} -> merged.
pub fn build_flow_graph(
    base_a: &EvolutionClassification,
    base_b: &EvolutionClassification,
    a_merged: &EvolutionClassification,
    b_merged: &EvolutionClassification,
) -> Result<FlowGraph> {
    let base = &base_a.parent_model;
    let (fa, fb) = (&base_a.child_model, &base_b.child_model);
    let merged = &a_merged.child_model;
    contract!(&base_b.parent_model == base, "fine-tunes descend from different bases: {base} vs {}", base_b.parent_model);
    contract!(fa != fb, "both fine-tune edges name the model {fa}");
    contract!(&a_merged.parent_model == fa, "merge edge starts at {} but fine-tune A is {fa}", a_merged.parent_model);
    contract!(&b_merged.parent_model == fb, "merge edge starts at {} but fine-tune B is {fb}", b_merged.parent_model);
    contract!(&b_merged.child_model == merged, "merge edges end at different models: {merged} vs {}", b_merged.child_model);
    let mut names = BTreeSet::new();
    for n in [base, fa, fb, merged] {
        contract!(names.insert(n), "model label {n} used twice in the lineage");
    }

    let base_into_either = base_a.persisting_parents().union(&base_b.persisting_parents()).count();
    let from_ft: BTreeSet<usize> = a_merged.persisting_children().union(&b_merged.persisting_children()).copied().collect();
    let mut from_base = BTreeSet::new();
    for (first, second) in [(base_a, a_merged), (base_b, b_merged)] {
        let rooted = first.persisting_children();
        from_base.extend(second.persisting.iter().filter(|m| rooted.contains(&m.parent_feature)).map(|m| m.child_feature));
    }
    Ok(FlowGraph {
        nodes: vec![base.clone(), fa.clone(), fb.clone(), merged.clone()],
        edges: [base_a, base_b, a_merged, b_merged].into_iter().map(FlowEdge::of).collect(),
        chains: ChainCounts {
            base_into_either_finetune: base_into_either,
            merged_from_either_finetune: from_ft.len(),
            merged_from_base: from_base.len(),
            merged_emerged_in_finetune: from_ft.len() - from_base.len(),
        },
    })
}
