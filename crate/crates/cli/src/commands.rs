//! Subcommand implementations. Each reads its inputs from the fixed layout,
//! writes its outputs atomically and records the digests of its inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use featflow::autointerp::{
    correlation_histogram, interpret_features, shuffled, CostLedger, FeatureInterpretation, FixtureStore,
    Histogram, InterpretConfig, LlmClient, ReplayClient,
};
use featflow::corpus::{
    synthetic, train_tokenizer, BlockMode, CorpusSource, DatasetMix, LoadedMix, MixPolicy, Split, TokenStream,
    Tokenizer,
};
use featflow::flow::{
    best_matches, build_flow_graph, classify, collect_activations, EvolutionClassification, FlowGraph, Matches,
    SharedTokens,
};
use featflow::lm::{LmConfig, LmParams};
use featflow::merge::{merge_models, select_equilibrium, sweep, uniform_grid, MergeSelection, SweepResult};
use featflow::persist::{self, file_digest, read_json, write_atomic, write_json, write_jsonl};
use featflow::proxy::{fit_unigram, rank_features, FeatureHypothesis, LlrReport};
use featflow::report::{
    max_window, render_feature_report, render_sankey_html, render_sweep_svg, sankey_export, validate_sankey,
    FeatureReport,
};
use featflow::sae::{explained_loss, train_sae, ExplainedLoss, LmActivationSource, SaeConfig, SaeDiagnostics, SaeEvent};
use featflow::train::{evaluate, train_lm, AdamConfig, EvalRecord, StreamMetrics, TrainConfig, TrainEvent};
use featflow::{ActivationMatrix32, LmParams32, SaeParams32};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainSection};
use crate::layout::Layout;
use crate::{CliError, Command, PairArgs};

type Result<T, E = CliError> = std::result::Result<T, E>;

/// A JSON artifact with the digests of the files it was computed from.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub inputs: BTreeMap<String, String>,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalBody {
    pub model: String,
    pub eval_tokens: usize,
    pub metrics: Vec<StreamMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepBody {
    pub model_a: String,
    pub model_b: String,
    pub eval_tokens: usize,
    pub sweep: SweepResult,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionBody {
    pub model_a: String,
    pub model_b: String,
    pub merged: String,
    pub t_percent: String,
    pub selection: MergeSelection,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SaeEvalBody {
    pub model: String,
    pub final_window: Option<SaeDiagnostics>,
    pub explained_loss: Option<ExplainedLoss>,
    /// Why the explained loss is missing, when it is.
    pub explained_loss_error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MatchesBody {
    pub matches: Matches,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassificationBody {
    /// Persisting share of the child's live features.
    pub persisting_fraction: Option<f64>,
    pub classification: EvolutionClassification,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GraphBody {
    pub graph: FlowGraph,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HypothesisRanking {
    pub hypothesis: FeatureHypothesis,
    pub reports: Vec<LlrReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LlrBody {
    pub model: String,
    pub unigram_tokens: usize,
    pub alpha: f64,
    pub rankings: Vec<HypothesisRanking>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpretSummary {
    pub model: String,
    pub features: Vec<usize>,
    pub scored: usize,
    pub mean_correlation: Option<f64>,
    pub histogram: Histogram,
    pub calls: u32,
    pub cost_usd: f64,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub live_llm: bool,
}

fn need<'a>(path: &'a Path, producer: &'static str) -> Result<&'a Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { path: path.to_path_buf(), producer })
    }
}

fn read_artifact<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<Artifact<T>> {
    Ok(read_json(need(path, producer)?)?)
}

impl Ctx {
    pub fn new(cfg: RunConfig, live_llm: bool) -> Self {
        let layout = Layout::new(cfg.out());
        Ctx { cfg, layout, live_llm }
    }

    pub fn dispatch(&self, cmd: &Command) -> Result<()> {
        match cmd {
            Command::SynthData => self.synth_data(),
            Command::TokenizerTrain => self.tokenizer_train(),
            Command::LmTrain => self.lm_train(),
            Command::LmFinetune(m) => self.lm_finetune(m.model.as_deref()),
            Command::LmEval(m) => self.lm_eval(m.model.as_deref()),
            Command::MergeSweep => self.merge_sweep(),
            Command::MergeSelect => self.merge_select(),
            Command::SaeTrain(m) => self.sae_train(m.model.as_deref()),
            Command::Collect(m) => self.collect(m.model.as_deref()),
            Command::Correlate(p) => self.correlate(p),
            Command::Classify { pair, threshold } => self.classify(pair, *threshold),
            Command::FlowGraph => self.flow_graph(),
            Command::Llr(m) => self.llr(m.model.as_deref()),
            Command::Explain(m) => self.explain(m.model.as_deref()),
            Command::Report { model, feature } => self.report(model.model.as_deref(), feature),
            Command::Pipeline => self.pipeline(),
        }
    }

    fn sub_seed(&self, k: u64) -> u64 {
        self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
    }

    fn inputs(&self, paths: &[&Path]) -> Result<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((self.layout.rel(p), file_digest(p)?))).collect()
    }

    fn producer(&self, model: &str) -> &'static str {
        if model == self.cfg.lineage.base.name {
            "lm-train"
        } else if model == self.cfg.lineage.merged {
            "merge-select"
        } else {
            "lm-finetune"
        }
    }

    /// `only`, checked against the lineage, or every lineage model.
    fn models(&self, only: Option<&str>) -> Result<Vec<String>> {
        let all = self.cfg.model_names();
        match only {
            Some(m) if all.iter().any(|n| n == m) => Ok(vec![m.to_string()]),
            Some(m) => Err(CliError::Config(format!("`{m}` is not a lineage model ({})", all.join(", ")))),
            None => Ok(all),
        }
    }

    fn sources(&self) -> Vec<CorpusSource> {
        self.cfg
            .corpora
            .iter()
            .map(|c| CorpusSource { format: c.format, ..CorpusSource::new(&c.name, self.cfg.corpus_path(c)) })
            .collect()
    }

    fn check_corpora(&self, names: impl IntoIterator<Item = String>) -> Result<()> {
        for n in names {
            let c = self.cfg.corpus(&n).expect("validated");
            need(&self.cfg.corpus_path(c), "synth-data")?;
        }
        Ok(())
    }

    fn tokenizer(&self) -> Result<Tokenizer> {
        Ok(Tokenizer::load(need(&self.layout.tokenizer(), "tokenizer-train")?)?)
    }

    fn mix(&self, tok: &Tokenizer) -> Result<LoadedMix> {
        self.check_corpora(self.cfg.corpora.iter().map(|c| c.name.clone()))?;
        let mix = DatasetMix {
            sources: self.sources(),
            policy: MixPolicy::TokenBalanced,
            seed: self.cfg.seed,
            validation_fraction: self.cfg.mix.validation_fraction,
        };
        Ok(mix.load(tok)?)
    }

    fn stream(&self, mix: &LoadedMix, names: &[String], split: Split, block: usize, mode: BlockMode, seed: u64) -> Result<TokenStream> {
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut sub = mix.select(&refs)?;
        if let Some(w) = &self.cfg.mix.weights {
            sub.weights = names.iter().map(|n| w.get(n).copied().unwrap_or(1.0)).collect();
        }
        Ok(sub.stream(split, block, mode, seed)?)
    }

    fn lm_block(&self) -> usize {
        self.cfg.model.ctx_len + 1
    }

    /// One padded validation stream per lineage corpus.
    fn validation_streams(&self, mix: &LoadedMix) -> Result<Vec<(String, TokenStream)>> {
        self.cfg
            .all_lineage_sources()
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                let s = self.stream(mix, std::slice::from_ref(&name), Split::Validation, self.lm_block(), BlockMode::Padded, self.sub_seed(100 + i as u64))?;
                Ok((name, s))
            })
            .collect()
    }

    fn lm_config(&self, tok: &Tokenizer) -> LmConfig {
        let m = &self.cfg.model;
        LmConfig {
            vocab_size: tok.vocab_size(),
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_mlp: m.d_mlp,
            ctx_len: m.ctx_len,
            rope_base: m.rope_base,
            seed: self.cfg.seed,
            pad_id: Some(tok.specials().pad),
        }
    }

    fn train_config(&self, t: &TrainSection, seed: u64, init_from: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            total_tokens: t.tokens,
            batch_blocks: t.batch_blocks,
            block_len: self.lm_block(),
            adam: AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, ..Default::default() },
            grad_clip: t.grad_clip,
            eval_every: t.eval_every.unwrap_or(t.tokens),
            eval_tokens: t.eval_tokens,
            seed,
            init_from,
        }
    }

    fn load_lm(&self, model: &str) -> Result<LmParams32> {
        Ok(persist::load_lm(need(&self.layout.lm(model), self.producer(model))?)?)
    }

    fn load_sae(&self, model: &str) -> Result<SaeParams32> {
        Ok(persist::load_sae(need(&self.layout.sae(model), "sae-train")?)?)
    }

    fn load_activations(&self, model: &str) -> Result<ActivationMatrix32> {
        Ok(persist::load_activations(need(&self.layout.activations(model), "collect")?)?)
    }

    fn synth_data(&self) -> Result<()> {
        for c in &self.cfg.corpora {
            if let Some(s) = &c.synthetic {
                let path = self.cfg.corpus_path(c);
                synthetic::write_documents(&path, &synthetic::documents(s.domain, s.documents, s.seed))?;
                info!("wrote {} {:?} documents to {}", s.documents, s.domain, path.display());
            }
        }
        Ok(())
    }

    fn tokenizer_train(&self) -> Result<()> {
        let names: Vec<String> = if self.cfg.tokenizer.sources.is_empty() {
            self.cfg.corpora.iter().map(|c| c.name.clone()).collect()
        } else {
            self.cfg.tokenizer.sources.clone()
        };
        self.check_corpora(names.clone())?;
        let sources: Vec<CorpusSource> = self.sources().into_iter().filter(|s| names.contains(&s.name)).collect();
        let tok = train_tokenizer(&sources, self.cfg.tokenizer.vocab_size, self.cfg.seed)?;
        tok.save(&self.layout.tokenizer())?;
        info!("tokenizer: {} ids ({} merges)", tok.vocab_size(), tok.merges().len());
        Ok(())
    }

    fn train(
        &self,
        model: &str,
        tc: &TrainConfig,
        init: LmParams32,
        sources: &[String],
        seed: u64,
        parent: Option<&str>,
    ) -> Result<()> {
        let tok = self.tokenizer()?;
        let mix = self.mix(&tok)?;
        let train = self.stream(&mix, sources, Split::Train, self.lm_block(), BlockMode::Padded, seed)?;
        let evals = self.validation_streams(&mix)?;
        let mut trace: Vec<EvalRecord> = Vec::new();
        let diverged = self.layout.lm_diverged(model);
        let result = train_lm(tc, init, train, &evals, |e| match e {
            TrainEvent::Eval(r, _) => {
                let accs: Vec<String> = r.streams.iter().map(|s| format!("{} {:.3}", s.name, s.accuracy)).collect();
                info!("{model}: {} tokens, accuracy {}", r.tokens_seen, accs.join(", "));
                trace.push(r.clone());
                Ok(())
            }
            TrainEvent::Diverged(p) => persist::save_lm(&diverged, p, parent).map(|_| ()),
        });
        write_jsonl(&self.layout.train_metrics(model), &trace)?;
        let out = result?;
        persist::save_lm(&self.layout.lm(model), &out.params, parent)?;
        info!("saved {}", self.layout.lm(model).display());
        Ok(())
    }

    fn lm_train(&self) -> Result<()> {
        let tok = self.tokenizer()?;
        let base = &self.cfg.lineage.base;
        let params = LmParams::init(&self.lm_config(&tok))?;
        let tc = self.train_config(&self.cfg.train, self.sub_seed(1), None);
        self.train(&base.name, &tc, params, &base.sources, self.sub_seed(1), None)
    }

    fn lm_finetune(&self, only: Option<&str>) -> Result<()> {
        let l = &self.cfg.lineage;
        if let Some(m) = only {
            if !l.finetunes.iter().any(|f| f.name == m) {
                return Err(CliError::Config(format!("`{m}` is not a fine-tune of the lineage")));
            }
        }
        let base_path = self.layout.lm(&l.base.name);
        let base = self.load_lm(&l.base.name)?;
        let digest = file_digest(&base_path)?;
        for (i, ft) in l.finetunes.iter().enumerate() {
            if only.is_some_and(|m| m != ft.name) {
                continue;
            }
            let seed = self.sub_seed(10 + i as u64);
            let tc = self.train_config(&self.cfg.finetune, seed, Some(base_path.clone()));
            self.train(&ft.name, &tc, base.clone(), &ft.sources, seed, Some(&digest))?;
        }
        Ok(())
    }

    fn lm_eval(&self, only: Option<&str>) -> Result<()> {
        let tok = self.tokenizer()?;
        let mix = self.mix(&tok)?;
        let evals = self.validation_streams(&mix)?;
        let n = self.cfg.merge.eval_tokens;
        for model in self.models(only)? {
            let path = self.layout.lm(&model);
            if only.is_none() && !path.exists() {
                continue;
            }
            let lm = self.load_lm(&model)?;
            let metrics = evaluate(&lm, &evals, n)?;
            for m in &metrics {
                println!("{model}\t{}\taccuracy {:.4}\tloss {:.4}", m.name, m.accuracy, m.loss);
            }
            let body = EvalBody { model: model.clone(), eval_tokens: n, metrics };
            write_json(&self.layout.eval(&model), &Artifact { inputs: self.inputs(&[&path])?, body })?;
        }
        Ok(())
    }

    fn merge_sweep(&self) -> Result<()> {
        let l = &self.cfg.lineage;
        let (fa, fb) = (&l.finetunes[0], &l.finetunes[1]);
        let a = self.load_lm(&fa.name)?;
        let b = self.load_lm(&fb.name)?;
        let base = self.load_lm(&l.base.name)?;
        let tok = self.tokenizer()?;
        let mix = self.mix(&tok)?;
        let block = self.lm_block();
        let eval_a = self.stream(&mix, &fa.sources, Split::Validation, block, BlockMode::Padded, self.sub_seed(200))?;
        let eval_b = self.stream(&mix, &fb.sources, Split::Validation, block, BlockMode::Padded, self.sub_seed(201))?;
        let m = &self.cfg.merge;
        let result = sweep(&a, &b, &uniform_grid(m.grid_points), &eval_a, &eval_b, m.eval_tokens, m.mode, Some(&base))?;
        let paths = [self.layout.lm(&fa.name), self.layout.lm(&fb.name), self.layout.lm(&l.base.name)];
        let inputs = self.inputs(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
        write_atomic(&self.layout.sweep_csv(), result.to_csv().as_bytes())?;
        let body = SweepBody { model_a: fa.name.clone(), model_b: fb.name.clone(), eval_tokens: m.eval_tokens, sweep: result };
        write_json(&self.layout.sweep(), &Artifact { inputs, body })?;
        info!("sweep over {} points written to {}", m.grid_points, self.layout.sweep_csv().display());
        Ok(())
    }

    fn merge_select(&self) -> Result<()> {
        let l = &self.cfg.lineage;
        let sw: Artifact<SweepBody> = read_artifact(&self.layout.sweep(), "merge-sweep")?;
        let sel = select_equilibrium(&sw.body.sweep)?;
        let (pa, pb) = (self.layout.lm(&sw.body.model_a), self.layout.lm(&sw.body.model_b));
        let a = self.load_lm(&sw.body.model_a)?;
        let b = self.load_lm(&sw.body.model_b)?;
        let merged = merge_models(&a, &b, sel.t_star, self.cfg.merge.mode)?;
        let parents = format!("{},{}", file_digest(&pa)?, file_digest(&pb)?);
        persist::save_lm(&self.layout.lm(&l.merged), &merged, Some(&parents))?;
        let svg = render_sweep_svg(&sw.body.sweep, Some(&sel), (&sw.body.model_a, &sw.body.model_b));
        write_atomic(&self.layout.sweep_svg(), svg.as_bytes())?;
        println!(
            "equilibrium t* = {}: {} {:.4}, {} {:.4} (gap {:.4})",
            sel.t_percent(),
            sw.body.model_a,
            sel.acc_a,
            sw.body.model_b,
            sel.acc_b,
            sel.gap
        );
        let inputs = self.inputs(&[&self.layout.sweep(), &pa, &pb])?;
        let body = SelectionBody {
            model_a: sw.body.model_a.clone(),
            model_b: sw.body.model_b.clone(),
            merged: l.merged.clone(),
            t_percent: sel.t_percent(),
            selection: sel,
        };
        write_json(&self.layout.selection(), &Artifact { inputs, body })?;
        Ok(())
    }

    fn sae_config(&self, n: usize) -> SaeConfig {
        let s = &self.cfg.sae;
        SaeConfig {
            n,
            expansion: s.expansion,
            l1_coeff: s.l1_coeff,
            adam: AdamConfig { lr: s.lr, beta1: s.beta1, beta2: s.beta2, ..Default::default() },
            block_len: s.block_len,
            batch_blocks: s.batch_blocks,
            train_tokens: s.train_tokens,
            seed: self.cfg.seed,
            centering: s.centering,
            dead_window_tokens: s.dead_window_tokens.unwrap_or(s.train_tokens / 2),
            eval_every_tokens: s.eval_every_tokens.unwrap_or((s.train_tokens / 4).max(1)),
        }
    }

    fn sae_train(&self, only: Option<&str>) -> Result<()> {
        let tok = self.tokenizer()?;
        let mix = self.mix(&tok)?;
        for (i, model) in self.models(only)?.into_iter().enumerate() {
            let lm_path = self.layout.lm(&model);
            let lm = self.load_lm(&model)?;
            let sources = self.cfg.lineage_sources(&model)?;
            let cfg = self.sae_config(lm.config.d_mlp);
            let block = cfg.block_len;
            let stream = self.stream(&mix, &sources, Split::Train, block, BlockMode::Contiguous, self.sub_seed(300 + i as u64))?;
            let mut source = LmActivationSource::new(&lm, stream, cfg.batch_blocks, self.cfg.sae.buffer_batches, self.sub_seed(350 + i as u64));
            let parent = file_digest(&lm_path)?;
            let diverged = self.layout.sae_diverged(&model);
            let mut trace: Vec<SaeDiagnostics> = Vec::new();
            let result = train_sae(&cfg, &mut source, |e| match e {
                SaeEvent::Step(..) => Ok(()),
                SaeEvent::Eval(d, _) => {
                    info!("{model} SAE: {} tokens, L0 {:.1}, mse {:.3e}, {} dead", d.tokens_seen, d.mean_l0, d.mean_mse, d.dead_features.len());
                    trace.push(d.clone());
                    Ok(())
                }
                SaeEvent::Diverged(p) => persist::save_sae(&diverged, p, Some(&parent)).map(|_| ()),
            });
            write_jsonl(&self.layout.sae_metrics(&model), &trace)?;
            let (sae, _) = result?;
            let sae_path = self.layout.sae(&model);
            persist::save_sae(&sae_path, &sae, Some(&parent))?;
            let val = self.stream(&mix, &sources, Split::Validation, block, BlockMode::Contiguous, self.sub_seed(360 + i as u64))?;
            let (explained, err) = match explained_loss(&lm, &sae, &val, self.cfg.sae.explained_loss_tokens) {
                Ok(e) => (Some(e), None),
                Err(e @ featflow::Error::UndefinedMetric(_)) => (None, Some(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            if let Some(e) = &explained {
                info!("{model} SAE explained loss {:.3}", e.raw);
            }
            let body = SaeEvalBody { model: model.clone(), final_window: trace.last().cloned(), explained_loss: explained, explained_loss_error: err };
            write_json(&self.layout.sae_eval(&model), &Artifact { inputs: self.inputs(&[&lm_path, &sae_path])?, body })?;
        }
        Ok(())
    }

    /// The token stream every model is evaluated on: validation text of
    /// every lineage corpus, token-balanced.
    fn shared_tokens(&self) -> Result<SharedTokens> {
        let tok = self.tokenizer()?;
        let mix = self.mix(&tok)?;
        let c = &self.cfg.collect;
        let stream = self.stream(&mix, &self.cfg.all_lineage_sources(), Split::Validation, c.block_len, BlockMode::Contiguous, self.sub_seed(400))?;
        Ok(SharedTokens::sample("shared-validation", &stream, c.n_tokens)?)
    }

    fn collect(&self, only: Option<&str>) -> Result<()> {
        let shared = self.shared_tokens()?;
        persist::save_tokens(&self.layout.shared_tokens(), &shared)?;
        for model in self.models(only)? {
            let lm = self.load_lm(&model)?;
            let sae = self.load_sae(&model)?;
            let sae_id = format!("{model}/{}", file_digest(&self.layout.sae(&model))?);
            let m = collect_activations(&lm, &sae, &shared, &model, &sae_id)?;
            let live = m.m() - m.dead().len();
            persist::save_activations(&self.layout.activations(&model), &m)?;
            info!("{model}: {} features over {} tokens, {live} live", m.m(), m.n_tokens);
        }
        Ok(())
    }

    fn pairs(&self, p: &PairArgs) -> Result<Vec<(String, String)>> {
        match (&p.parent, &p.child) {
            (Some(a), Some(b)) => {
                self.models(Some(a))?;
                self.models(Some(b))?;
                Ok(vec![(a.clone(), b.clone())])
            }
            _ => Ok(self.cfg.edges()),
        }
    }

    fn correlate(&self, p: &PairArgs) -> Result<()> {
        for (parent, child) in self.pairs(p)? {
            let a = self.load_activations(&parent)?;
            let b = if child == parent { a.clone() } else { self.load_activations(&child)? };
            let matches = best_matches(&a, &b)?;
            let inputs = self.inputs(&[&self.layout.activations(&parent), &self.layout.activations(&child)])?;
            write_json(&self.layout.matches(&parent, &child), &Artifact { inputs, body: MatchesBody { matches } })?;
            info!("correlated {parent} -> {child}");
        }
        Ok(())
    }

    fn classify(&self, p: &PairArgs, threshold: Option<f64>) -> Result<()> {
        let th = threshold.unwrap_or(self.cfg.classify.threshold);
        if !(-1.0..1.0).contains(&th) {
            return Err(CliError::Config(format!("threshold {th} outside [-1, 1)")));
        }
        for (parent, child) in self.pairs(p)? {
            let path = self.layout.matches(&parent, &child);
            let m: Artifact<MatchesBody> = read_artifact(&path, "correlate")?;
            let c = classify(&m.body.matches, th);
            c.check_partition(m.body.matches.m_parent, m.body.matches.m_child)?;
            let live = m.body.matches.m_child - c.dead_child.len();
            let frac = (live > 0).then(|| c.persisting_children().len() as f64 / live as f64);
            println!(
                "{parent} -> {child}: {} persisting pairs, {} emerging, {} disappearing, {} / {} dead; {} of live child features persist",
                c.persisting.len(),
                c.emerging.len(),
                c.disappearing.len(),
                c.dead_parent.len(),
                c.dead_child.len(),
                frac.map_or("n/a".into(), |f| format!("{:.1}%", 100.0 * f)),
            );
            let body = ClassificationBody { persisting_fraction: frac, classification: c };
            write_json(&self.layout.classification(&parent, &child), &Artifact { inputs: self.inputs(&[&path])?, body })?;
        }
        Ok(())
    }

    fn flow_graph(&self) -> Result<()> {
        let edges = self.cfg.edges();
        let paths: Vec<PathBuf> = edges.iter().map(|(p, c)| self.layout.classification(p, c)).collect();
        let cls: Vec<EvolutionClassification> = paths
            .iter()
            .map(|p| read_artifact::<ClassificationBody>(p, "classify").map(|a| a.body.classification))
            .collect::<Result<_>>()?;
        let graph = build_flow_graph(&cls[0], &cls[1], &cls[2], &cls[3])?;
        let export = sankey_export(&graph)?;
        validate_sankey(&serde_json::to_value(&export).expect("serializable"))?;
        let inputs = self.inputs(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
        write_json(&self.layout.sankey(), &Artifact { inputs: inputs.clone(), body: export.clone() })?;
        write_atomic(&self.layout.sankey_html(), render_sankey_html(&export).as_bytes())?;
        let c = &graph.chains;
        println!(
            "{} base features persist into a fine-tune; {} merged features trace to a fine-tune, {} of them from the base and {} emerged in fine-tuning",
            c.base_into_either_finetune, c.merged_from_either_finetune, c.merged_from_base, c.merged_emerged_in_finetune
        );
        write_json(&self.layout.flow_graph(), &Artifact { inputs, body: GraphBody { graph } })?;
        Ok(())
    }

    fn llr(&self, only: Option<&str>) -> Result<()> {
        if self.cfg.hypotheses.is_empty() {
            return Err(CliError::Config("no [[hypothesis]] entries in the run config".into()));
        }
        let tok = self.tokenizer()?;
        let mix = self.mix(&tok)?;
        let unigram_tokens = 4 * self.cfg.collect.n_tokens;
        let stream = self.stream(&mix, &self.cfg.all_lineage_sources(), Split::Train, self.cfg.collect.block_len, BlockMode::Contiguous, self.sub_seed(500))?;
        let u = fit_unigram(&stream, unigram_tokens, self.cfg.proxy.alpha)?;
        let hyps: Vec<FeatureHypothesis> = self
            .cfg
            .hypotheses
            .iter()
            .map(|h| FeatureHypothesis::from_strings(&h.name, &h.strings, &tok, h.epsilon))
            .collect::<featflow::Result<_>>()?;
        let shared_file = self.layout.shared_tokens();
        let shared_path = need(&shared_file, "collect")?;
        let shared = persist::load_tokens(shared_path)?;
        for model in self.models(only)? {
            let m = self.load_activations(&model)?;
            let mut rankings = Vec::new();
            for h in &hyps {
                let mut reports = rank_features(&m, &shared.tokens, h, &u, self.cfg.proxy.aggregation)?;
                reports.truncate(self.cfg.proxy.top);
                if let Some(top) = reports.first() {
                    println!("{model}\t{}\ttop feature {} LLR {:.3}", h.name, top.feature, top.llr);
                }
                rankings.push(HypothesisRanking { hypothesis: h.clone(), reports });
            }
            let inputs = self.inputs(&[&self.layout.activations(&model), shared_path, &self.layout.tokenizer()])?;
            let body = LlrBody { model: model.clone(), unigram_tokens, alpha: self.cfg.proxy.alpha, rankings };
            write_json(&self.layout.llr(&model), &Artifact { inputs, body })?;
        }
        Ok(())
    }

    fn fixtures_path(&self) -> PathBuf {
        self.cfg.resolve(&self.cfg.autointerp.fixtures)
    }

    fn client(&self) -> Result<Box<dyn LlmClient>> {
        let store = FixtureStore::open(&self.fixtures_path())?;
        if !self.live_llm {
            return Ok(Box::new(ReplayClient::new(store)));
        }
        self.live_client(store)
    }

    #[cfg(feature = "http")]
    fn live_client(&self, store: FixtureStore) -> Result<Box<dyn LlmClient>> {
        let a = &self.cfg.autointerp;
        let http = featflow::autointerp::HttpClient::new(&a.base_url, &a.api_key_env, Duration::from_secs(a.timeout_secs))?;
        Ok(Box::new(featflow::autointerp::RecordingClient::new(http, store)))
    }

    #[cfg(not(feature = "http"))]
    fn live_client(&self, _store: FixtureStore) -> Result<Box<dyn LlmClient>> {
        let _ = Duration::from_secs(self.cfg.autointerp.timeout_secs);
        Err(CliError::Config("--live-llm needs a build with the `http` feature".into()))
    }

    fn explain(&self, only: Option<&str>) -> Result<()> {
        let tok = self.tokenizer()?;
        let client = self.client()?;
        let a = &self.cfg.autointerp;
        let shared_file = self.layout.shared_tokens();
        let shared_path = need(&shared_file, "collect")?;
        let shared = persist::load_tokens(shared_path)?;
        let icfg = InterpretConfig {
            model: a.model.clone(),
            k_explain: a.k_explain,
            k_score: a.k_score,
            seed: self.cfg.seed,
            per_call_usd: a.per_call_usd,
            max_in_flight: a.max_in_flight,
        };
        for model in self.models(only)? {
            let m = self.load_activations(&model)?;
            let dead = m.dead();
            let live: Vec<usize> = (0..m.m()).filter(|j| !dead.contains(j)).collect();
            let mut features = shuffled(&live, self.cfg.seed);
            features.truncate(a.features_per_model);
            features.sort_unstable();
            let ledger = CostLedger::new(a.per_call_usd);
            let results: Vec<FeatureInterpretation> =
                interpret_features(client.as_ref(), &features, &m.rows, &shared.tokens, &tok, &icfg, &ledger)?;
            write_jsonl(&self.layout.interpretations(&model), &results)?;
            let rs: Vec<f64> = results.iter().filter_map(|r| r.score.pearson_r).collect();
            let mean = (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64);
            println!(
                "{model}: {} features explained, {} scored, mean correlation {}, estimated cost ${:.2}",
                results.len(),
                rs.len(),
                mean.map_or("n/a".into(), |v| format!("{v:.3}")),
                ledger.total()
            );
            let body = InterpretSummary {
                model: model.clone(),
                features,
                scored: rs.len(),
                mean_correlation: mean,
                histogram: correlation_histogram(&rs, 20),
                calls: ledger.calls(),
                cost_usd: ledger.total(),
            };
            let inputs = self.inputs(&[&self.layout.activations(&model), shared_path])?;
            write_json(&self.layout.interpret_summary(&model), &Artifact { inputs, body })?;
        }
        Ok(())
    }

    /// Best-match annotations for `feature` from every classified edge
    /// touching `model`.
    fn annotations(&self, model: &str, feature: usize) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (p, c) in self.cfg.edges() {
            let path = self.layout.matches(&p, &c);
            if !path.exists() || (p != model && c != model) {
                continue;
            }
            let m: Artifact<MatchesBody> = read_json(&path)?;
            let (best, other) = if c == model {
                (m.body.matches.best_parent.get(feature).copied().flatten().map(|b| (b.parent_feature, b.correlation)), &p)
            } else {
                (m.body.matches.best_child.get(feature).copied().flatten().map(|b| (b.child_feature, b.correlation)), &c)
            };
            if let Some((j, r)) = best {
                out.push((format!("best match in {other}"), format!("feature {j}, r = {r:.3}")));
            }
        }
        Ok(out)
    }

    fn report(&self, only: Option<&str>, features: &[usize]) -> Result<()> {
        let tok = self.tokenizer()?;
        let shared = persist::load_tokens(need(&self.layout.shared_tokens(), "collect")?)?;
        let r = &self.cfg.report;
        for model in self.models(only)? {
            let path = self.layout.activations(&model);
            if only.is_none() && !path.exists() {
                continue;
            }
            let m = self.load_activations(&model)?;
            let mut llr_notes: BTreeMap<usize, Vec<(String, String)>> = BTreeMap::new();
            let chosen: Vec<usize> = if !features.is_empty() {
                features.to_vec()
            } else {
                let mut picked = Vec::new();
                if self.layout.llr(&model).exists() {
                    let llr: Artifact<LlrBody> = read_json(&self.layout.llr(&model))?;
                    for h in &llr.body.rankings {
                        for rep in &h.reports {
                            llr_notes.entry(rep.feature).or_default().push((format!("LLR {}", h.hypothesis.name), format!("{:.3}", rep.llr)));
                            if !picked.contains(&rep.feature) {
                                picked.push(rep.feature);
                            }
                        }
                    }
                }
                let mut by_count: Vec<usize> = (0..m.m()).filter(|&j| !m.rows[j].is_constant(m.n_tokens)).collect();
                by_count.sort_by_key(|&j| (std::cmp::Reverse(m.rows[j].nnz()), j));
                picked.extend(by_count.into_iter().filter(|j| !picked.contains(j)).collect::<Vec<_>>());
                picked.truncate(r.features_per_model);
                picked
            };
            for j in chosen {
                let row = m.rows.get(j).ok_or_else(|| CliError::Config(format!("{model} has no feature {j} (m = {})", m.m())))?;
                if row.is_constant(m.n_tokens) {
                    warn!("{model} feature {j} is dead; skipped");
                    continue;
                }
                let (start, end) = max_window(row, m.n_tokens, r.window);
                let dense = row.to_dense(m.n_tokens);
                let mut annotations = llr_notes.remove(&j).unwrap_or_default();
                annotations.extend(self.annotations(&model, j)?);
                let report = FeatureReport {
                    model_id: model.clone(),
                    feature: j,
                    tokens: shared.tokens[start..end].iter().map(|&t| tok.token_str(t)).collect(),
                    activations: dense[start..end].iter().map(|&v| f64::from(v)).collect(),
                    feature_max: f64::from(row.max()),
                    annotations,
                };
                write_atomic(&self.layout.report(&model, j), render_feature_report(&report)?.as_bytes())?;
            }
            info!("reports for {model} in {}", self.layout.report(&model, 0).parent().unwrap().display());
        }
        Ok(())
    }

    fn pipeline(&self) -> Result<()> {
        let all = crate::ModelArg::default();
        let edges = PairArgs::default();
        let mut steps = vec![Command::SynthData];
        steps.extend([
            Command::TokenizerTrain,
            Command::LmTrain,
            Command::LmFinetune(all.clone()),
            Command::MergeSweep,
            Command::MergeSelect,
            Command::LmEval(all.clone()),
            Command::SaeTrain(all.clone()),
            Command::Collect(all.clone()),
            Command::Correlate(edges.clone()),
            Command::Classify { pair: edges, threshold: None },
            Command::FlowGraph,
        ]);
        if !self.cfg.hypotheses.is_empty() {
            steps.push(Command::Llr(all.clone()));
        }
        if self.live_llm || self.fixtures_path().exists() {
            steps.push(Command::Explain(all.clone()));
        } else {
            info!("no autointerp fixtures at {}; skipping explain", self.fixtures_path().display());
        }
        steps.push(Command::Report { model: all, feature: vec![] });
        for s in &steps {
            info!("== {s:?}");
            self.dispatch(s)?;
        }
        Ok(())
    }
}
