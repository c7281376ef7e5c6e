//! Automated feature interpretation with a chat-style language model:
//! sample quantized activation evidence, ask for an explanation, ask the
//! model to simulate activations from that explanation on held-out
//! evidence, and score the simulation by correlation.
//!
//! Provider traffic goes through [`LlmClient`]. [`ReplayClient`] answers
//! from a fixture store without any network access, which makes the whole
//! path reproducible offline; [`RecordingClient`] fills that store.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TokenId, Tokenizer};
use crate::error::{contract, Error, Result};
use crate::flow::SparseRow;
use crate::Scalar;

pub const MAX_LEVEL: u8 = 10;
pub const TEMPLATE_VERSION: &str = "v1";

/// Linear quantization of `[0, max]` onto levels `0..=10`, rounding half up.
pub fn quantize(activation: f64, max: f64) -> u8 {
    if !(max > 0.0) || !(activation > 0.0) {
        return 0;
    }
    ((10.0 * activation / max + 0.5).floor()).clamp(0.0, f64::from(MAX_LEVEL)) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceSplit {
    Explain,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub position: usize,
    pub token: String,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSample {
    pub feature: usize,
    pub split: EvidenceSplit,
    /// Ordered by stream position.
    pub items: Vec<EvidenceItem>,
}

impl EvidenceSample {
    pub fn levels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.level).collect()
    }
}

/// Draws disjoint explain and score samples for one feature. Half of each
/// sample comes from the top-activating positions (alternating ranks between
/// the two splits), half uniformly from the remaining positions of the stream.
pub fn sample_evidence<T: Scalar>(
    feature: usize,
    row: &SparseRow<T>,
    tokens: &[TokenId],
    tokenizer: &Tokenizer,
    k_explain: usize,
    k_score: usize,
    seed: u64,
) -> Result<(EvidenceSample, EvidenceSample)> {
    if row.nnz() == 0 {
        return Err(Error::UndefinedMetric(format!("feature {feature} never activates")));
    }
    let n = tokens.len();
    contract!(k_explain + k_score <= n, "requested {} evidence items from {n} tokens", k_explain + k_score);
    contract!(row.indices.last().is_some_and(|&i| (i as usize) < n), "activation row extends past the token stream");
    let max = row.max().f64();

    let mut ranked: Vec<(usize, f64)> = row.indices.iter().zip(&row.values).map(|(&i, &v)| (i as usize, v.f64())).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (top_e, top_s) = (k_explain.div_ceil(2), k_score.div_ceil(2));
    let mut explain_pos = Vec::new();
    let mut score_pos = Vec::new();
    let mut ranked_iter = ranked.iter().map(|r| r.0);
    while explain_pos.len() < top_e || score_pos.len() < top_s {
        let Some(p) = ranked_iter.next() else { break };
        if explain_pos.len() < top_e && (explain_pos.len() <= score_pos.len() || score_pos.len() >= top_s) {
            explain_pos.push(p);
        } else {
            score_pos.push(p);
        }
    }

    let mut used = vec![false; n];
    for &p in explain_pos.iter().chain(&score_pos) {
        used[p] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&p| !used[p]).collect();
    let need_e = k_explain - explain_pos.len();
    let need_s = k_score - score_pos.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (feature as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let picks = index::sample(&mut rng, free.len(), need_e + need_s).into_vec();
    explain_pos.extend(picks[..need_e].iter().map(|&i| free[i]));
    score_pos.extend(picks[need_e..].iter().map(|&i| free[i]));

    let dense = |p: usize| match row.indices.binary_search(&(p as u32)) {
        Ok(k) => row.values[k].f64(),
        Err(_) => 0.0,
    };
    let build = |mut pos: Vec<usize>, split| {
        pos.sort_unstable();
        EvidenceSample {
            feature,
            split,
            items: pos
                .into_iter()
                .map(|p| EvidenceItem { position: p, token: tokenizer.token_str(tokens[p]), level: quantize(dense(p), max) })
                .collect(),
        }
    };
    Ok((build(explain_pos, EvidenceSplit::Explain), build(score_pos, EvidenceSplit::Score)))
}

/// Tokens are shown with escapes so that whitespace stays visible and each
/// item fits on one line.
pub fn display_token(token: &str) -> String {
    token.escape_debug().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: String) -> Self {
        ChatMessage { role: role.into(), content }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Hex SHA-256 of the request's JSON encoding; the fixture key.
    pub fn key(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("requests serialize")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub model: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

const EXPLAIN_SYSTEM: &str = "You are studying a neuron in a small language model. You will see tokens \
paired with the neuron's activation on that token, quantized to an integer from 0 (inactive) to 10 \
(maximally active). Describe in one short phrase what the neuron responds to. Do not repeat any \
token/activation pair from the list.";

const SIMULATE_SYSTEM: &str = "You are simulating a neuron in a small language model from a description \
of what it responds to. For every numbered token, predict its activation as an integer from 0 to 10. \
Answer with one line per token in the form `index<TAB>token<TAB>activation` and nothing else.";

pub fn explain_request(sample: &EvidenceSample, model: &str) -> ChatRequest {
    let mut body = String::from("Token\tActivation\n");
    for item in &sample.items {
        body.push_str(&format!("{}\t{}\n", display_token(&item.token), item.level));
    }
    body.push_str("\nExplanation of the neuron's behavior:");
    ChatRequest {
        model: model.into(),
        messages: vec![ChatMessage::new("system", EXPLAIN_SYSTEM.into()), ChatMessage::new("user", body)],
        temperature: 0.0,
        max_tokens: 64,
    }
}

pub fn simulate_request(explanation: &str, sample: &EvidenceSample, model: &str) -> ChatRequest {
    let mut body = format!("Neuron description: {explanation}\n\nTokens:\n");
    for (i, item) in sample.items.iter().enumerate() {
        body.push_str(&format!("{i}\t{}\n", display_token(&item.token)));
    }
    ChatRequest {
        model: model.into(),
        messages: vec![ChatMessage::new("system", SIMULATE_SYSTEM.into()), ChatMessage::new("user", body)],
        temperature: 0.0,
        max_tokens: (8 * sample.items.len() + 32) as u32,
    }
}

/// Flat per-call price; a feature costs two calls (explain and simulate).
#[derive(Debug, Default)]
pub struct CostLedger {
    per_call_usd: f64,
    per_feature: Mutex<HashMap<usize, (u32, f64)>>,
}

impl CostLedger {
    pub fn new(per_call_usd: f64) -> Self {
        CostLedger { per_call_usd, per_feature: Mutex::new(HashMap::new()) }
    }

    fn charge(&self, feature: usize) -> f64 {
        let mut m = self.per_feature.lock().unwrap();
        let e = m.entry(feature).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += self.per_call_usd;
        self.per_call_usd
    }

    pub fn feature_cost(&self, feature: usize) -> f64 {
        self.per_feature.lock().unwrap().get(&feature).map_or(0.0, |e| e.1)
    }

    pub fn calls(&self) -> u32 {
        self.per_feature.lock().unwrap().values().map(|e| e.0).sum()
    }

    pub fn total(&self) -> f64 {
        let m = self.per_feature.lock().unwrap();
        let mut keys: Vec<_> = m.keys().copied().collect();
        keys.sort_unstable();
        keys.iter().map(|k| m[k].1).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub feature: usize,
    pub text: String,
    pub model: String,
    pub cost_usd: f64,
}

pub fn generate_explanation(
    client: &dyn LlmClient,
    sample: &EvidenceSample,
    model: &str,
    ledger: &CostLedger,
) -> Result<Explanation> {
    let req = explain_request(sample, model);
    let resp = client.complete(&req)?;
    let cost = ledger.charge(sample.feature);
    let text = resp.text.trim().to_string();
    if text.is_empty() {
        return Err(Error::Protocol { message: "empty explanation".into(), raw: resp.text });
    }
    for item in &sample.items {
        let pair = format!("{}\t{}", display_token(&item.token), item.level);
        if text.contains(&pair) {
            return Err(Error::Protocol { message: "explanation repeats a verbatim evidence pair".into(), raw: resp.text });
        }
    }
    Ok(Explanation { feature: sample.feature, text: resp.text, model: resp.model, cost_usd: cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub predicted: Vec<u8>,
    /// Positions whose level was missing, unparseable or out of range.
    pub flagged: Vec<usize>,
}

/// Parses one predicted level per token from a simulation response.
///
/// Lines in `index<TAB>token<TAB>level` form are preferred; other lines are
/// read as prose, taking the first integer as the index and the last number
/// as the level. The first entry for an index wins. Missing entries become
/// 0, out-of-range levels are clamped; both are flagged.
pub fn parse_levels(text: &str, n: usize) -> Simulation {
    static PROSE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let prose = PROSE.get_or_init(|| Regex::new(r"^\D*?(\d+)\b.*?(-?\d+(?:\.\d+)?)\D*$").unwrap());
    let mut seen: Vec<Option<(f64, bool)>> = vec![None; n];
    for line in text.lines() {
        let line = line.trim();
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = if fields.len() >= 3 {
            fields[0].trim().parse::<usize>().ok().zip(fields[fields.len() - 1].trim().parse::<f64>().ok())
        } else {
            prose.captures(line).and_then(|c| c[1].parse::<usize>().ok().zip(c[2].parse::<f64>().ok()))
        };
        if let Some((idx, level)) = parsed {
            if idx < n && seen[idx].is_none() {
                let in_range = (0.0..=f64::from(MAX_LEVEL)).contains(&level);
                seen[idx] = Some((level.round().clamp(0.0, f64::from(MAX_LEVEL)), in_range));
            }
        }
    }
    let mut flagged = Vec::new();
    let predicted = seen
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            Some((v, ok)) => {
                if !ok {
                    flagged.push(i);
                }
                *v as u8
            }
            None => {
                flagged.push(i);
                0
            }
        })
        .collect();
    Simulation { predicted, flagged }
}

pub fn simulate(
    client: &dyn LlmClient,
    explanation: &Explanation,
    sample: &EvidenceSample,
    model: &str,
    ledger: &CostLedger,
) -> Result<Simulation> {
    let resp = client.complete(&simulate_request(explanation.text.trim(), sample, model))?;
    ledger.charge(sample.feature);
    let sim = parse_levels(&resp.text, sample.items.len());
    if !sim.flagged.is_empty() {
        log::warn!("feature {}: {} simulated levels imputed or clamped", sample.feature, sim.flagged.len());
    }
    Ok(sim)
}

/// Two-pass Pearson correlation; `None` on zero variance.
pub fn pearson_dense(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let d = (saa * sbb).sqrt();
    (d > 0.0).then(|| (sab / d).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScore {
    pub feature: usize,
    pub predicted: Vec<u8>,
    pub true_levels: Vec<u8>,
    pub pearson_r: Option<f64>,
}

pub fn score(feature: usize, predicted: &[u8], true_levels: &[u8]) -> Result<SimulationScore> {
    contract!(predicted.len() == true_levels.len(), "{} predictions for {} observations", predicted.len(), true_levels.len());
    contract!(predicted.len() >= 2, "scoring needs at least two observations");
    let p: Vec<f64> = predicted.iter().map(|&x| f64::from(x)).collect();
    let t: Vec<f64> = true_levels.iter().map(|&x| f64::from(x)).collect();
    Ok(SimulationScore {
        feature,
        predicted: predicted.to_vec(),
        true_levels: true_levels.to_vec(),
        pearson_r: pearson_dense(&p, &t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Append-only JSONL store of provider exchanges keyed by request hash.
pub struct FixtureStore {
    path: PathBuf,
    records: Mutex<HashMap<String, ChatResponse>>,
}

impl FixtureStore {
    /// Opens (or starts) the store at `path`; a missing file is an empty store.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: FixtureRecord = serde_json::from_str(line)
                    .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
                if r.request.key() != r.key {
                    return Err(Error::format(path, format!("line {}: key does not match request", i + 1)));
                }
                records.entry(r.key).or_insert(r.response);
            }
        }
        Ok(FixtureStore { path: path.to_path_buf(), records: Mutex::new(records) })
    }

    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        self.records.lock().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends a record unless its key is already stored. The lock is held
    /// across the file write, so there is a single writer at a time.
    pub fn insert(&self, request: &ChatRequest, response: &ChatResponse) -> Result<()> {
        let key = request.key();
        let mut records = self.records.lock().unwrap();
        if records.contains_key(&key) {
            return Ok(());
        }
        let rec = FixtureRecord { key: key.clone(), request: request.clone(), response: response.clone() };
        let mut line = serde_json::to_string(&rec).expect("records serialize");
        line.push('\n');
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        records.insert(key, response.clone());
        Ok(())
    }
}

/// Answers only from the fixture store; never touches the network.
pub struct ReplayClient {
    store: FixtureStore,
}

impl ReplayClient {
    pub fn new(store: FixtureStore) -> Self {
        ReplayClient { store }
    }
}

impl LlmClient for ReplayClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let key = request.key();
        self.store.get(&key).ok_or(Error::MissingFixture { key })
    }
}

/// Serves stored responses and forwards (then records) everything else.
pub struct RecordingClient<C> {
    inner: C,
    store: FixtureStore,
}

impl<C: LlmClient> RecordingClient<C> {
    pub fn new(inner: C, store: FixtureStore) -> Self {
        RecordingClient { inner, store }
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        if let Some(r) = self.store.get(&request.key()) {
            return Ok(r);
        }
        let r = self.inner.complete(request)?;
        self.store.insert(request, &r)?;
        Ok(r)
    }
}

/// Retries `f` on retriable errors with exponential backoff starting at `base`.
pub fn with_retries<R>(attempts: u32, base: Duration, mut f: impl FnMut() -> Result<R>) -> Result<R> {
    let mut delay = base;
    let mut tries = 0;
    loop {
        match f() {
            Err(e) if e.is_retriable() && tries + 1 < attempts => {
                log::warn!("provider call failed ({e}); retrying in {delay:?}");
                std::thread::sleep(delay);
                delay *= 2;
                tries += 1;
            }
            other => return other,
        }
    }
}

/// Enforces a minimum interval between calls to the wrapped client.
pub struct RateLimited<C> {
    inner: C,
    interval: Duration,
    next: Mutex<Instant>,
}

impl<C: LlmClient> RateLimited<C> {
    pub fn new(inner: C, interval: Duration) -> Self {
        RateLimited { inner, interval, next: Mutex::new(Instant::now()) }
    }
}

impl<C: LlmClient> LlmClient for RateLimited<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.interval;
            start - now
        };
        std::thread::sleep(wait);
        self.inner.complete(request)
    }
}

/// Parses an OpenAI-style chat-completions response body.
pub fn parse_chat_completion(raw: &str) -> Result<ChatResponse> {
    let protocol = |m: &str| Error::Protocol { message: m.into(), raw: raw.into() };
    let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| protocol(&format!("invalid JSON: {e}")))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| protocol("missing choices[0].message.content"))?;
    Ok(ChatResponse {
        text: text.to_string(),
        model: v.get("model").and_then(|m| m.as_str()).unwrap_or_default().to_string(),
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(|x| x.as_u64()).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(|x| x.as_u64()).unwrap_or(0),
    })
}

#[cfg(feature = "http")]
pub use http::HttpClient;

#[cfg(feature = "http")]
mod http {
    use super::*;

    /// Chat-completions endpoint with bearer authentication.
    pub struct HttpClient {
        client: reqwest::blocking::Client,
        url: String,
        api_key: String,
        attempts: u32,
    }

    impl HttpClient {
        /// `base_url` is the API root (the client posts to
        /// `{base_url}/chat/completions`); the key is read from `key_env`.
        pub fn new(base_url: &str, key_env: &str, timeout: Duration) -> Result<Self> {
            let api_key = std::env::var(key_env)
                .map_err(|_| Error::Config(format!("environment variable {key_env} is not set")))?;
            let client = reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map_err(|e| Error::Transport(e.to_string()))?;
            Ok(HttpClient {
                client,
                url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
                api_key,
                attempts: 4,
            })
        }

        fn post_once(&self, request: &ChatRequest) -> Result<ChatResponse> {
            let resp = self
                .client
                .post(&self.url)
                .bearer_auth(&self.api_key)
                .json(request)
                .send()
                .map_err(|e| Error::Transport(e.to_string()))?;
            let status = resp.status();
            let body = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
            if status.is_server_error() || status.as_u16() == 429 {
                return Err(Error::Transport(format!("HTTP {status}")));
            }
            if !status.is_success() {
                return Err(Error::Protocol { message: format!("HTTP {status}"), raw: body });
            }
            parse_chat_completion(&body)
        }
    }

    impl LlmClient for HttpClient {
        fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
            with_retries(self.attempts, Duration::from_millis(500), || self.post_once(request))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInterpretation {
    pub feature: usize,
    pub explanation: Explanation,
    pub simulation: Simulation,
    pub score: SimulationScore,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretConfig {
    pub model: String,
    pub k_explain: usize,
    pub k_score: usize,
    pub seed: u64,
    pub per_call_usd: f64,
    pub max_in_flight: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            model: "gpt-4-turbo".into(),
            k_explain: 40,
            k_score: 40,
            seed: 0,
            per_call_usd: 0.055,
            max_in_flight: 4,
        }
    }
}

/// Sample, explain, simulate and score one feature.
pub fn interpret_feature<T: Scalar>(
    client: &dyn LlmClient,
    feature: usize,
    row: &SparseRow<T>,
    tokens: &[TokenId],
    tokenizer: &Tokenizer,
    cfg: &InterpretConfig,
    ledger: &CostLedger,
) -> Result<FeatureInterpretation> {
    let (explain, held_out) = sample_evidence(feature, row, tokens, tokenizer, cfg.k_explain, cfg.k_score, cfg.seed)?;
    let explanation = generate_explanation(client, &explain, &cfg.model, ledger)?;
    let simulation = simulate(client, &explanation, &held_out, &cfg.model, ledger)?;
    let score = score(feature, &simulation.predicted, &held_out.levels())?;
    Ok(FeatureInterpretation { feature, explanation, simulation, score, template: TEMPLATE_VERSION.into() })
}

/// Interprets `features` with at most `cfg.max_in_flight` concurrent
/// provider calls. Results keep the order of `features`.
pub fn interpret_features<T: Scalar>(
    client: &dyn LlmClient,
    features: &[usize],
    rows: &[SparseRow<T>],
    tokens: &[TokenId],
    tokenizer: &Tokenizer,
    cfg: &InterpretConfig,
    ledger: &CostLedger,
) -> Result<Vec<FeatureInterpretation>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        features
            .par_iter()
            .map(|&f| {
                let row = rows.get(f).ok_or_else(|| Error::Contract(format!("feature {f} out of range")))?;
                interpret_feature(client, f, row, tokens, tokenizer, cfg, ledger)
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram of correlations over `[-1, 1]`; the last bin is closed.
pub fn correlation_histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Shuffled copy of `features`, for picking an unbiased subset to interpret.
pub fn shuffled(features: &[usize], seed: u64) -> Vec<usize> {
    let mut v = features.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
