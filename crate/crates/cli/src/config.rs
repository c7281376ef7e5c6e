//! Run configuration: one TOML file describing the whole lineage experiment.
//!
//! Relative paths resolve against the config file's directory; a leading
//! `@out/` resolves against the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use featflow::corpus::{synthetic::Domain, SourceFormat};
use featflow::merge::SlerpMode;
use featflow::proxy::Aggregation;
use featflow::sae::Centering;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    pub tokenizer: TokenizerSection,
    #[serde(rename = "corpus")]
    pub corpora: Vec<CorpusSection>,
    #[serde(default)]
    pub mix: MixSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub finetune: TrainSection,
    pub lineage: LineageSection,
    #[serde(default)]
    pub merge: MergeSection,
    pub sae: SaeSection,
    #[serde(default)]
    pub collect: CollectSection,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default, rename = "hypothesis")]
    pub hypotheses: Vec<HypothesisSection>,
    #[serde(default)]
    pub proxy: ProxySection,
    #[serde(default)]
    pub autointerp: AutointerpSection,
    #[serde(default)]
    pub report: ReportSection,

    /// Directory of the config file; not part of the file itself.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    /// Corpora the tokenizer is trained on; empty means all.
    #[serde(default)]
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub name: String,
    /// Defaults to `@out/data/<name>.txt`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: SourceFormat,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub domain: Domain,
    pub documents: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSection {
    pub validation_fraction: f64,
    /// Per-corpus sampling weights; corpora without an entry weigh 1.
    /// Absent means token-balanced.
    #[serde(default)]
    pub weights: Option<BTreeMap<String, f64>>,
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection { validation_fraction: 0.1, weights: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub ctx_len: usize,
    #[serde(default = "rope_base")]
    pub rope_base: f64,
}

fn rope_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub tokens: usize,
    pub batch_blocks: usize,
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "clip")]
    pub grad_clip: Option<f64>,
    /// Defaults to the full budget (one evaluation at the end).
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default = "eval_tokens")]
    pub eval_tokens: usize,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn clip() -> Option<f64> {
    Some(1.0)
}
fn eval_tokens() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineageSection {
    pub base: ModelSpec,
    /// Exactly two; the merge interpolates from the first to the second.
    pub finetunes: Vec<ModelSpec>,
    pub merged: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    pub grid_points: usize,
    pub eval_tokens: usize,
    #[serde(default)]
    pub mode: SlerpMode,
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection { grid_points: 21, eval_tokens: 8000, mode: SlerpMode::WholeVector }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSection {
    #[serde(default = "expansion")]
    pub expansion: usize,
    #[serde(default = "l1")]
    pub l1_coeff: f64,
    #[serde(default = "sae_lr")]
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "sae_beta2")]
    pub beta2: f64,
    #[serde(default = "sae_block")]
    pub block_len: usize,
    pub batch_blocks: usize,
    pub train_tokens: usize,
    /// Defaults to half the training budget.
    #[serde(default)]
    pub dead_window_tokens: Option<usize>,
    /// Defaults to a quarter of the training budget.
    #[serde(default)]
    pub eval_every_tokens: Option<usize>,
    #[serde(default)]
    pub centering: Centering,
    #[serde(default = "buffer")]
    pub buffer_batches: usize,
    /// Tokens used for the explained-loss check after training.
    #[serde(default = "explained")]
    pub explained_loss_tokens: usize,
}

fn expansion() -> usize {
    16
}
fn l1() -> f64 {
    3e-4
}
fn sae_lr() -> f64 {
    1e-4
}
fn sae_beta2() -> f64 {
    0.9999
}
fn sae_block() -> usize {
    24
}
fn buffer() -> usize {
    8
}
fn explained() -> usize {
    4800
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectSection {
    pub n_tokens: usize,
    pub block_len: usize,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection { n_tokens: 24_000, block_len: 24 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    pub threshold: f64,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection { threshold: featflow::flow::DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisSection {
    pub name: String,
    /// Every token of every string's encoding is a target.
    pub strings: Vec<String>,
    #[serde(default = "epsilon")]
    pub epsilon: f64,
}

fn epsilon() -> f64 {
    featflow::proxy::DEFAULT_EPSILON
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySection {
    pub alpha: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Reports kept per model and hypothesis.
    pub top: usize,
}

impl Default for ProxySection {
    fn default() -> Self {
        ProxySection { alpha: featflow::proxy::DEFAULT_ALPHA, aggregation: Aggregation::ActivationWeighted, top: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutointerpSection {
    pub model: String,
    pub k_explain: usize,
    pub k_score: usize,
    pub per_call_usd: f64,
    pub max_in_flight: usize,
    /// Live features interpreted per lineage model, drawn at random.
    pub features_per_model: usize,
    pub fixtures: PathBuf,
    pub base_url: String,
    /// Environment variable holding the provider key.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for AutointerpSection {
    fn default() -> Self {
        AutointerpSection {
            model: "gpt-4-turbo".into(),
            k_explain: 40,
            k_score: 40,
            per_call_usd: 0.055,
            max_in_flight: 4,
            features_per_model: 20,
            fixtures: "@out/autointerp/fixtures.jsonl".into(),
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Tokens shown around each feature's maximum.
    pub window: usize,
    /// Feature pages rendered per model.
    pub features_per_model: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { window: 64, features_per_model: 10 }
    }
}

fn cfg_err(m: impl Into<String>) -> CliError {
    CliError::Config(m.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn out(&self) -> PathBuf {
        if self.out_dir.is_absolute() {
            self.out_dir.clone()
        } else {
            self.base_dir.join(&self.out_dir)
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match p.strip_prefix("@out") {
            Ok(rest) => self.out().join(rest),
            Err(_) if p.is_absolute() => p.to_path_buf(),
            Err(_) => self.base_dir.join(p),
        }
    }

    pub fn corpus(&self, name: &str) -> Option<&CorpusSection> {
        self.corpora.iter().find(|c| c.name == name)
    }

    pub fn corpus_path(&self, c: &CorpusSection) -> PathBuf {
        match &c.path {
            Some(p) => self.resolve(p),
            None => self.out().join("data").join(format!("{}.txt", c.name)),
        }
    }

    pub fn model_names(&self) -> Vec<String> {
        let mut v = vec![self.lineage.base.name.clone()];
        v.extend(self.lineage.finetunes.iter().map(|f| f.name.clone()));
        v.push(self.lineage.merged.clone());
        v
    }

    /// Corpora a model has been trained on, including its ancestors'.
    pub fn lineage_sources(&self, model: &str) -> Result<Vec<String>, CliError> {
        let l = &self.lineage;
        let mut out: BTreeSet<String> = l.base.sources.iter().cloned().collect();
        if model == l.base.name {
        } else if let Some(ft) = l.finetunes.iter().find(|f| f.name == model) {
            out.extend(ft.sources.iter().cloned());
        } else if model == l.merged {
            out.extend(l.finetunes.iter().flat_map(|f| f.sources.iter().cloned()));
        } else {
            return Err(cfg_err(format!("`{model}` is not a model of the lineage ({})", self.model_names().join(", "))));
        }
        Ok(out.into_iter().collect())
    }

    /// Every corpus used anywhere in the lineage, in config order.
    pub fn all_lineage_sources(&self) -> Vec<String> {
        let used: BTreeSet<&String> = std::iter::once(&self.lineage.base)
            .chain(&self.lineage.finetunes)
            .flat_map(|m| m.sources.iter())
            .collect();
        self.corpora.iter().filter(|c| used.contains(&c.name)).map(|c| c.name.clone()).collect()
    }

    /// `(parent, child)` edges of the lineage DAG.
    pub fn edges(&self) -> Vec<(String, String)> {
        let l = &self.lineage;
        let mut e: Vec<(String, String)> = l.finetunes.iter().map(|f| (l.base.name.clone(), f.name.clone())).collect();
        e.extend(l.finetunes.iter().map(|f| (f.name.clone(), l.merged.clone())));
        e
    }

    /// Structural checks; run before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut names = BTreeSet::new();
        for c in &self.corpora {
            if !names.insert(c.name.as_str()) {
                return Err(cfg_err(format!("corpus `{}` is declared twice", c.name)));
            }
            if c.synthetic.is_none() && !self.corpus_path(c).exists() {
                return Err(cfg_err(format!("corpus `{}`: {} does not exist", c.name, self.corpus_path(c).display())));
            }
        }
        if self.corpora.is_empty() {
            return Err(cfg_err("no corpora declared"));
        }
        for s in &self.tokenizer.sources {
            if !names.contains(s.as_str()) {
                return Err(cfg_err(format!("tokenizer source `{s}` is not a declared corpus")));
            }
        }
        let l = &self.lineage;
        if l.finetunes.len() != 2 {
            return Err(cfg_err(format!("the lineage needs exactly two fine-tunes, got {}", l.finetunes.len())));
        }
        let mut models = BTreeSet::new();
        for m in self.model_names() {
            if m.is_empty() || m.contains(['/', '\\']) || m.starts_with('.') {
                return Err(cfg_err(format!("model name `{m}` is not a valid directory name")));
            }
            if !models.insert(m.clone()) {
                return Err(cfg_err(format!("model name `{m}` is used twice in the lineage")));
            }
        }
        for spec in std::iter::once(&l.base).chain(&l.finetunes) {
            if spec.sources.is_empty() {
                return Err(cfg_err(format!("model `{}` has no training sources", spec.name)));
            }
            for s in &spec.sources {
                if !names.contains(s.as_str()) {
                    return Err(cfg_err(format!("model `{}` uses undeclared corpus `{s}`", spec.name)));
                }
            }
        }
        if let Some(w) = &self.mix.weights {
            for (k, v) in w {
                if !names.contains(k.as_str()) || !(*v > 0.0) {
                    return Err(cfg_err(format!("mix weight for `{k}` must name a corpus and be positive")));
                }
            }
        }
        if !(0.0..1.0).contains(&self.mix.validation_fraction) || self.mix.validation_fraction == 0.0 {
            return Err(cfg_err("mix.validation_fraction must be in (0, 1)"));
        }
        for (name, t) in [("train", &self.train), ("finetune", &self.finetune)] {
            if t.tokens == 0 || t.batch_blocks == 0 || !(t.lr > 0.0) || t.eval_tokens == 0 {
                return Err(cfg_err(format!("[{name}] needs positive tokens, batch_blocks, lr and eval_tokens")));
            }
            if t.eval_every.is_some_and(|e| e == 0 || e > t.tokens) {
                return Err(cfg_err(format!("[{name}] eval_every must be in 1..=tokens")));
            }
        }
        if self.merge.grid_points < 2 || self.merge.eval_tokens == 0 {
            return Err(cfg_err("[merge] needs at least 2 grid points and positive eval_tokens"));
        }
        let s = &self.sae;
        if s.batch_blocks == 0 || s.train_tokens == 0 || s.block_len < 2 || !(s.lr > 0.0) {
            return Err(cfg_err("[sae] needs positive batch_blocks, train_tokens and lr, and block_len >= 2"));
        }
        if s.block_len > self.model.ctx_len || self.collect.block_len > self.model.ctx_len || self.collect.block_len == 0 {
            return Err(cfg_err("SAE and collection block lengths must be in 1..=model.ctx_len"));
        }
        if self.collect.n_tokens == 0 {
            return Err(cfg_err("[collect] n_tokens must be positive"));
        }
        if !(-1.0..1.0).contains(&self.classify.threshold) {
            return Err(cfg_err("[classify] threshold must be in [-1, 1)"));
        }
        let mut hyp = BTreeSet::new();
        for h in &self.hypotheses {
            if !hyp.insert(h.name.as_str()) {
                return Err(cfg_err(format!("hypothesis `{}` is declared twice", h.name)));
            }
            if h.strings.iter().all(|s| s.is_empty()) {
                return Err(cfg_err(format!("hypothesis `{}` has no target strings", h.name)));
            }
            if !(0.0..=1.0).contains(&h.epsilon) {
                return Err(cfg_err(format!("hypothesis `{}`: epsilon must be in [0, 1]", h.name)));
            }
        }
        if !(self.proxy.alpha >= 0.0) {
            return Err(cfg_err("[proxy] alpha must be non-negative"));
        }
        let a = &self.autointerp;
        if a.k_explain == 0 || a.k_score == 0 || a.max_in_flight == 0 {
            return Err(cfg_err("[autointerp] k_explain, k_score and max_in_flight must be positive"));
        }
        if self.report.window == 0 {
            return Err(cfg_err("[report] window must be positive"));
        }
        Ok(())
    }
}
