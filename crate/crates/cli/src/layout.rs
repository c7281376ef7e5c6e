//! Fixed artifact paths under the output directory.

use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.txt")
    }

    pub fn model_dir(&self, model: &str) -> PathBuf {
        self.root.join("models").join(model)
    }

    pub fn lm(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("lm.ckpt")
    }

    pub fn lm_diverged(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("lm.diverged.ckpt")
    }

    pub fn train_metrics(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("train_metrics.jsonl")
    }

    pub fn eval(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("eval.json")
    }

    pub fn sae(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("sae.ckpt")
    }

    pub fn sae_diverged(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("sae.diverged.ckpt")
    }

    pub fn sae_metrics(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("sae_metrics.jsonl")
    }

    pub fn sae_eval(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("sae_eval.json")
    }

    pub fn activations(&self, model: &str) -> PathBuf {
        self.model_dir(model).join("activations.bin")
    }

    pub fn shared_tokens(&self) -> PathBuf {
        self.root.join("collect").join("tokens.bin")
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("merge").join("sweep.json")
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("merge").join("sweep.csv")
    }

    pub fn sweep_svg(&self) -> PathBuf {
        self.root.join("merge").join("sweep.svg")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("merge").join("selection.json")
    }

    pub fn pair_dir(&self, parent: &str, child: &str) -> PathBuf {
        self.root.join("pairs").join(format!("{parent}__{child}"))
    }

    pub fn matches(&self, parent: &str, child: &str) -> PathBuf {
        self.pair_dir(parent, child).join("matches.json")
    }

    pub fn classification(&self, parent: &str, child: &str) -> PathBuf {
        self.pair_dir(parent, child).join("classification.json")
    }

    pub fn flow_graph(&self) -> PathBuf {
        self.root.join("flow").join("graph.json")
    }

    pub fn sankey(&self) -> PathBuf {
        self.root.join("flow").join("sankey.json")
    }

    pub fn sankey_html(&self) -> PathBuf {
        self.root.join("flow").join("sankey.html")
    }

    pub fn llr(&self, model: &str) -> PathBuf {
        self.root.join("llr").join(format!("{model}.json"))
    }

    pub fn interpretations(&self, model: &str) -> PathBuf {
        self.root.join("autointerp").join(format!("{model}.jsonl"))
    }

    pub fn interpret_summary(&self, model: &str) -> PathBuf {
        self.root.join("autointerp").join(format!("{model}.summary.json"))
    }

    pub fn report(&self, model: &str, feature: usize) -> PathBuf {
        self.root.join("reports").join(model).join(format!("feature_{feature}.html"))
    }

    /// `path` relative to the output root, for provenance records.
    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}
