//! Static report artifacts: token-highlight HTML for single features, a
//! Sankey-style export of the lineage graph (JSON plus self-contained HTML),
//! and sweep curves.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{contract, Error, Result};
use crate::flow::{FlowGraph, SparseRow};
use crate::merge::{MergeSelection, SweepResult};
use crate::Scalar;

pub const SANKEY_SCHEMA: &str = "featflow-sankey/1";

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub model_id: String,
    pub feature: usize,
    /// Decoded token strings of the window.
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
    /// Maximum activation of the feature over the whole stream.
    pub feature_max: f64,
    /// Extra `(label, value)` lines, e.g. correlations with matched features.
    pub annotations: Vec<(String, String)>,
}

/// `[start, end)` of a window of `len` tokens centered on the feature's
/// strongest activation, clipped to the stream.
pub fn max_window<T: Scalar>(row: &SparseRow<T>, n_tokens: usize, len: usize) -> (usize, usize) {
    let len = len.min(n_tokens);
    let peak = row
        .indices
        .iter()
        .zip(&row.values)
        .fold(None::<(u32, T)>, |best, (&i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map_or(0, |(i, _)| i as usize);
    let start = peak.saturating_sub(len / 2).min(n_tokens - len);
    (start, start + len)
}

const TOKEN_RGB: &str = "255, 140, 0";

/// Self-contained HTML page; each token's background opacity is its
/// activation divided by the feature maximum.
pub fn render_feature_report(r: &FeatureReport) -> Result<String> {
    contract!(r.tokens.len() == r.activations.len(), "{} tokens but {} activations", r.tokens.len(), r.activations.len());
    contract!(r.feature_max >= 0.0, "feature maximum must be non-negative");
    let mut h = String::new();
    let title = format!("{} feature {}", r.model_id, r.feature);
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>\n\
         body {{ font-family: sans-serif; margin: 2em; }}\n\
         .text {{ font-family: monospace; white-space: pre-wrap; line-height: 1.8; }}\n\
         .tok {{ border-radius: 2px; }}\n\
         </style>\n</head>\n<body>\n<h1>{}</h1>\n<p>max activation: {:.4}</p>\n",
        escape_html(&title),
        escape_html(&title),
        r.feature_max
    );
    if !r.annotations.is_empty() {
        h.push_str("<ul>\n");
        for (k, v) in &r.annotations {
            let _ = writeln!(h, "<li>{}: {}</li>", escape_html(k), escape_html(v));
        }
        h.push_str("</ul>\n");
    }
    h.push_str("<div class=\"text\">");
    for (tok, &a) in r.tokens.iter().zip(&r.activations) {
        let alpha = if r.feature_max > 0.0 { (a / r.feature_max).clamp(0.0, 1.0) } else { 0.0 };
        if alpha > 0.0 {
            let _ = write!(
                h,
                "<span class=\"tok\" title=\"{a:.4}\" style=\"background: rgba({TOKEN_RGB}, {alpha:.3})\">{}</span>",
                escape_html(tok)
            );
        } else {
            let _ = write!(h, "<span class=\"tok\" title=\"{a:.4}\">{}</span>", escape_html(tok));
        }
    }
    h.push_str("</div>\n</body>\n</html>\n");
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SankeyNode {
    pub id: String,
    /// Distance from the lineage root.
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: String,
    pub target: String,
    /// Persisting features; link widths scale with this.
    pub value: usize,
    pub emerging: usize,
    pub disappearing: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SankeyExport {
    pub schema: String,
    pub nodes: Vec<SankeyNode>,
    pub links: Vec<SankeyLink>,
    pub chains: BTreeMap<String, usize>,
}

pub fn sankey_export(graph: &FlowGraph) -> Result<SankeyExport> {
    let mut column: HashMap<&str, usize> = graph.nodes.iter().map(|n| (n.as_str(), 0)).collect();
    for e in &graph.edges {
        contract!(column.contains_key(e.parent.as_str()), "edge from unknown node {}", e.parent);
        contract!(column.contains_key(e.child.as_str()), "edge to unknown node {}", e.child);
    }
    // Longest path from a root; a DAG needs at most |nodes| relaxation rounds.
    for _ in 0..graph.nodes.len() {
        for e in &graph.edges {
            let c = column[e.parent.as_str()] + 1;
            if c > column[e.child.as_str()] {
                column.insert(e.child.as_str(), c);
            }
        }
    }
    contract!(
        graph.edges.iter().all(|e| column[e.child.as_str()] > column[e.parent.as_str()]),
        "lineage graph has a cycle"
    );
    let c = &graph.chains;
    Ok(SankeyExport {
        schema: SANKEY_SCHEMA.into(),
        nodes: graph.nodes.iter().map(|n| SankeyNode { id: n.clone(), column: column[n.as_str()] }).collect(),
        links: graph
            .edges
            .iter()
            .map(|e| SankeyLink {
                source: e.parent.clone(),
                target: e.child.clone(),
                value: e.persisting,
                emerging: e.emerging,
                disappearing: e.disappearing,
            })
            .collect(),
        chains: BTreeMap::from([
            ("base_into_either_finetune".to_string(), c.base_into_either_finetune),
            ("merged_from_either_finetune".to_string(), c.merged_from_either_finetune),
            ("merged_from_base".to_string(), c.merged_from_base),
            ("merged_emerged_in_finetune".to_string(), c.merged_emerged_in_finetune),
        ]),
    })
}

/// Structural check of a Sankey export against the documented schema:
/// a `schema` tag, unique string node ids with integer columns, links whose
/// endpoints are known nodes with non-negative integer counts, and an
/// object of integer chain counts.
pub fn validate_sankey(v: &Value) -> Result<()> {
    let bad = |m: String| Err(Error::Contract(format!("sankey export: {m}")));
    let Some(obj) = v.as_object() else { return bad("top level is not an object".into()) };
    if obj.get("schema").and_then(Value::as_str) != Some(SANKEY_SCHEMA) {
        return bad(format!("schema tag is not {SANKEY_SCHEMA}"));
    }
    let Some(nodes) = obj.get("nodes").and_then(Value::as_array) else { return bad("missing nodes array".into()) };
    let mut ids = HashSet::new();
    for n in nodes {
        let Some(id) = n.get("id").and_then(Value::as_str) else { return bad("node without string id".into()) };
        if n.get("column").and_then(Value::as_u64).is_none() {
            return bad(format!("node {id} without integer column"));
        }
        if !ids.insert(id) {
            return bad(format!("duplicate node id {id}"));
        }
    }
    let Some(links) = obj.get("links").and_then(Value::as_array) else { return bad("missing links array".into()) };
    for (i, l) in links.iter().enumerate() {
        for end in ["source", "target"] {
            match l.get(end).and_then(Value::as_str) {
                Some(id) if ids.contains(id) => {}
                _ => return bad(format!("link {i}: {end} is not a known node")),
            }
        }
        for k in ["value", "emerging", "disappearing"] {
            if l.get(k).and_then(Value::as_u64).is_none() {
                return bad(format!("link {i}: {k} is not a non-negative integer"));
            }
        }
    }
    let Some(chains) = obj.get("chains").and_then(Value::as_object) else { return bad("missing chains object".into()) };
    if chains.values().any(|c| c.as_u64().is_none()) {
        return bad("chain counts must be non-negative integers".into());
    }
    Ok(())
}

/// Static SVG Sankey-style page: one column per lineage depth, links drawn
/// as curves with stroke width proportional to the persisting count.
pub fn render_sankey_html(export: &SankeyExport) -> String {
    const W: f64 = 900.0;
    const H: f64 = 420.0;
    const MAX_STROKE: f64 = 60.0;
    let n_cols = export.nodes.iter().map(|n| n.column).max().unwrap_or(0) + 1;
    let mut by_col: BTreeMap<usize, Vec<&SankeyNode>> = BTreeMap::new();
    for n in &export.nodes {
        by_col.entry(n.column).or_default().push(n);
    }
    let mut pos: HashMap<&str, (f64, f64)> = HashMap::new();
    for (c, nodes) in &by_col {
        let x = 80.0 + (W - 160.0) * (*c as f64) / ((n_cols.max(2) - 1) as f64);
        for (i, n) in nodes.iter().enumerate() {
            let y = H * (i as f64 + 1.0) / (nodes.len() as f64 + 1.0);
            pos.insert(n.id.as_str(), (x, y));
        }
    }
    let max_value = export.links.iter().map(|l| l.value).max().unwrap_or(0).max(1) as f64;
    let mut svg = String::new();
    for l in &export.links {
        let (x0, y0) = pos[l.source.as_str()];
        let (x1, y1) = pos[l.target.as_str()];
        let width = MAX_STROKE * l.value as f64 / max_value;
        let mx = (x0 + x1) / 2.0;
        let _ = writeln!(
            svg,
            "<path d=\"M{x0:.1},{y0:.1} C{mx:.1},{y0:.1} {mx:.1},{y1:.1} {x1:.1},{y1:.1}\" \
             stroke=\"#4a90d9\" stroke-opacity=\"0.5\" stroke-width=\"{width:.2}\" fill=\"none\">\
             <title>{} -> {}: {} persisting, {} emerging, {} disappearing</title></path>",
            escape_html(&l.source),
            escape_html(&l.target),
            l.value,
            l.emerging,
            l.disappearing
        );
        let _ = writeln!(
            svg,
            "<text x=\"{mx:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{} (+{} / -{})</text>",
            (y0 + y1) / 2.0 - 6.0,
            l.value,
            l.emerging,
            l.disappearing
        );
    }
    for n in &export.nodes {
        let (x, y) = pos[n.id.as_str()];
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"40\" fill=\"#333\"/>\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
            x - 6.0,
            y - 20.0,
            y - 26.0,
            escape_html(&n.id)
        );
    }
    let mut chains = String::new();
    for (k, v) in &export.chains {
        let _ = writeln!(chains, "<li>{}: {v}</li>", escape_html(k));
    }
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Feature flow</title>\n</head>\n<body>\n\
         <h1>Feature flow</h1>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n{svg}</svg>\n\
         <ul>\n{chains}</ul>\n</body>\n</html>\n"
    )
}

/// Accuracy-versus-fraction curves of a merge sweep as a standalone SVG.
pub fn render_sweep_svg(sweep: &SweepResult, selection: Option<&MergeSelection>, labels: (&str, &str)) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    let lo = sweep.acc_a.iter().chain(&sweep.acc_b).copied().fold(f64::INFINITY, f64::min).min(1.0);
    let hi = sweep.acc_a.iter().chain(&sweep.acc_b).copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    let px = |t: f64| PAD + t * (W - 2.0 * PAD);
    let py = |a: f64| H - PAD - (a - lo) / (hi - lo) * (H - 2.0 * PAD);
    let line = |acc: &[f64]| {
        sweep.grid.iter().zip(acc).map(|(&t, &a)| format!("{:.1},{:.1}", px(t), py(a))).collect::<Vec<_>>().join(" ")
    };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"#d9534f\" fill=\"none\" stroke-width=\"2\"/>", line(&sweep.acc_a));
    let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"#4a90d9\" fill=\"none\" stroke-width=\"2\"/>", line(&sweep.acc_b));
    if let Some(sel) = selection {
        let x = px(sel.t_star);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{PAD}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#888\" stroke-dasharray=\"4\"/>\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">t = {}</text>",
            H - PAD,
            PAD - 8.0,
            sel.t_percent()
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{:.1}\" font-size=\"12\" fill=\"#d9534f\">{}</text>\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#4a90d9\" text-anchor=\"end\">{}</text>",
        H - 10.0,
        escape_html(labels.0),
        W - PAD,
        H - 10.0,
        escape_html(labels.1)
    );
    s.push_str("</svg>\n");
    s
}
