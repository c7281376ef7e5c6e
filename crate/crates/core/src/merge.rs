//! Spherical linear interpolation between two models of one lineage,
//! interpolation sweeps, and equilibrium selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{contract, Error, Result};
use crate::lm::{next_token_accuracy, LmConfig, LmParams};
use crate::params::{ParamSet, TensorSpec};
use crate::Scalar;

/// Below this angle (radians) the two endpoints are treated as parallel
/// and interpolated linearly.
pub const PARALLEL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams<T: Scalar> {
    pub values: Vec<T>,
    pub manifest: Vec<TensorSpec>,
}

pub fn flatten<T: Scalar, P: ParamSet<T>>(params: &P) -> FlatParams<T> {
    FlatParams { values: params.to_flat(), manifest: params.manifest() }
}

/// Rebuilds LM parameters with configuration `cfg` from a flat vector.
pub fn unflatten<T: Scalar>(flat: &FlatParams<T>, cfg: &LmConfig) -> Result<LmParams<T>> {
    let mut params = LmParams::<T>::zeros(cfg)?;
    check_compatible(&params.manifest(), &flat.manifest)?;
    params.load_flat(&flat.values);
    Ok(params)
}

pub fn check_compatible(a: &[TensorSpec], b: &[TensorSpec]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::MergeCompat(format!("manifests have {} and {} tensors", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return Err(Error::MergeCompat(format!(
                "tensor `{}` {:?} @{} vs `{}` {:?} @{}",
                x.name, x.shape, x.offset, y.name, y.shape, y.offset
            )));
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Great-circle interpolation from `a` (t = 0) to `b` (t = 1):
/// `[sin((1-t)W) a + sin(tW) b] / sin W`, with `W` the angle between the
/// vectors. Endpoints are returned exactly; near-parallel inputs fall back to
/// `(1-t) a + t b`. Arithmetic is carried out in `f64`.
pub fn slerp<T: Scalar>(a: &[T], b: &[T], t: f64) -> Result<Vec<T>> {
    contract!(a.len() == b.len(), "slerp operands differ in length: {} vs {}", a.len(), b.len());
    contract!((0.0..=1.0).contains(&t), "slerp fraction {t} outside [0, 1]");
    let af: Vec<f64> = a.iter().map(|x| x.f64()).collect();
    let bf: Vec<f64> = b.iter().map(|x| x.f64()).collect();
    let (na, nb) = (norm(&af), norm(&bf));
    contract!(na > 0.0 && nb > 0.0, "slerp requires nonzero operands");
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    let cos = (af.iter().zip(&bf).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let (wa, wb) = if omega < PARALLEL_EPS {
        (1.0 - t, t)
    } else {
        let s = omega.sin();
        (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s)
    };
    Ok(af.iter().zip(&bf).map(|(x, y)| T::of(wa * x + wb * y)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SlerpMode {
    /// One great circle through the full flattened parameter vector.
    #[default]
    WholeVector,
    /// Each tensor interpolated on its own great circle.
    PerTensor,
}

pub fn slerp_params<T: Scalar>(a: &FlatParams<T>, b: &FlatParams<T>, t: f64, mode: SlerpMode) -> Result<FlatParams<T>> {
    check_compatible(&a.manifest, &b.manifest)?;
    let values = match mode {
        SlerpMode::WholeVector => slerp(&a.values, &b.values, t)?,
        SlerpMode::PerTensor => {
            let mut out = Vec::with_capacity(a.values.len());
            for spec in &a.manifest {
                let r = spec.offset..spec.offset + spec.len();
                out.extend(slerp(&a.values[r.clone()], &b.values[r], t)?);
            }
            out
        }
    };
    Ok(FlatParams { values, manifest: a.manifest.clone() })
}

/// Merged model at fraction `t` between `a` and `b`.
pub fn merge_models<T: Scalar>(a: &LmParams<T>, b: &LmParams<T>, t: f64, mode: SlerpMode) -> Result<LmParams<T>> {
    if a.config.vocab_size != b.config.vocab_size || a.config.d_model != b.config.d_model {
        return Err(Error::MergeCompat("model configurations differ".into()));
    }
    let flat = slerp_params(&flatten(a), &flatten(b), t, mode)?;
    unflatten(&flat, &a.config)
}

/// `n` uniform points from 0 to 1 inclusive.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "a grid needs both endpoints");
    (0..n).map(|i| if i == n - 1 { 1.0 } else { i as f64 / (n - 1) as f64 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub acc_a: Vec<f64>,
    pub acc_b: Vec<f64>,
    /// Base-model accuracy on the A and B validation streams.
    pub baselines: Option<(f64, f64)>,
}

impl SweepResult {
    pub fn validate(&self) -> Result<()> {
        contract!(!self.grid.is_empty(), "empty sweep");
        contract!(
            self.acc_a.len() == self.grid.len() && self.acc_b.len() == self.grid.len(),
            "accuracy lists do not match the grid"
        );
        contract!(self.grid.windows(2).all(|w| w[0] < w[1]), "grid must be strictly increasing");
        let all = self.acc_a.iter().chain(&self.acc_b);
        contract!(all.into_iter().all(|a| (0.0..=1.0).contains(a)), "accuracies must lie in [0, 1]");
        Ok(())
    }

    /// Tabular form: `t,acc_a,acc_b,base_a,base_b`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,acc_a,acc_b,base_a,base_b\n");
        let (ba, bb) = match self.baselines {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        };
        for i in 0..self.grid.len() {
            out.push_str(&format!("{},{},{},{ba},{bb}\n", self.grid[i], self.acc_a[i], self.acc_b[i]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("<sweep csv>", m);
        let mut lines = text.lines();
        if lines.next() != Some("t,acc_a,acc_b,base_a,base_b") {
            return Err(bad("missing header".into()));
        }
        let mut r = SweepResult { grid: vec![], acc_a: vec![], acc_b: vec![], baselines: None };
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("bad row `{line}`")));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            r.grid.push(p(f[0])?);
            r.acc_a.push(p(f[1])?);
            r.acc_b.push(p(f[2])?);
            if !f[3].is_empty() {
                r.baselines = Some((p(f[3])?, p(f[4])?));
            }
        }
        r.validate()?;
        Ok(r)
    }
}

/// Evaluates the merged model at every grid point on both validation streams.
#[allow(clippy::too_many_arguments)]
pub fn sweep<T: Scalar>(
    model_a: &LmParams<T>,
    model_b: &LmParams<T>,
    grid: &[f64],
    eval_a: &TokenStream,
    eval_b: &TokenStream,
    n_eval_tokens: usize,
    mode: SlerpMode,
    base: Option<&LmParams<T>>,
) -> Result<SweepResult> {
    let fa = flatten(model_a);
    let fb = flatten(model_b);
    check_compatible(&fa.manifest, &fb.manifest)?;
    let points: Result<Vec<(f64, f64)>> = grid
        .par_iter()
        .map(|&t| {
            let merged = unflatten(&slerp_params(&fa, &fb, t, mode)?, &model_a.config)?;
            Ok((
                next_token_accuracy(&merged, eval_a, n_eval_tokens)?,
                next_token_accuracy(&merged, eval_b, n_eval_tokens)?,
            ))
        })
        .collect();
    let points = points?;
    let baselines = match base {
        Some(b) => {
            check_compatible(&flatten(b).manifest, &fa.manifest)?;
            Some((next_token_accuracy(b, eval_a, n_eval_tokens)?, next_token_accuracy(b, eval_b, n_eval_tokens)?))
        }
        None => None,
    };
    let result = SweepResult {
        grid: grid.to_vec(),
        acc_a: points.iter().map(|p| p.0).collect(),
        acc_b: points.iter().map(|p| p.1).collect(),
        baselines,
    };
    result.validate()?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSelection {
    pub t_star: f64,
    pub acc_a: f64,
    pub acc_b: f64,
    pub gap: f64,
}

impl MergeSelection {
    /// `t_star` as a percentage, e.g. `58%`.
    pub fn t_percent(&self) -> String {
        format!("{}%", (self.t_star * 100.0).round() as i64)
    }
}

/// Grid point with the smallest `|acc_a - acc_b|`; ties go to the larger
/// mean accuracy, then to the smaller `t`.
pub fn select_equilibrium(sweep: &SweepResult) -> Result<MergeSelection> {
    sweep.validate()?;
    let mut best = 0;
    for i in 1..sweep.grid.len() {
        let gap_i = (sweep.acc_a[i] - sweep.acc_b[i]).abs();
        let gap_b = (sweep.acc_a[best] - sweep.acc_b[best]).abs();
        let mean_i = (sweep.acc_a[i] + sweep.acc_b[i]) / 2.0;
        let mean_b = (sweep.acc_a[best] + sweep.acc_b[best]) / 2.0;
        if gap_i < gap_b || (gap_i == gap_b && mean_i > mean_b) {
            best = i;
        }
    }
    Ok(MergeSelection {
        t_star: sweep.grid[best],
        acc_a: sweep.acc_a[best],
        acc_b: sweep.acc_b[best],
        gap: (sweep.acc_a[best] - sweep.acc_b[best]).abs(),
    })
}
