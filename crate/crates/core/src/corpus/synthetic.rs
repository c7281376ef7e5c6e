//! Seeded toy corpora: an English-like grammar and a code-like grammar, each
//! with a second dialect.
//!
//! The two base grammars share a handful of surface words (`if`, `for`,
//! `return`, `while`) so that the domains overlap at the token level but
//! differ in structure. The dialects ([`Domain::Stories`], [`Domain::Lua`])
//! reuse most of their parent grammar's vocabulary with different sentence
//! templates and syntax, and serve as fine-tuning domains.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const NAMES: &[&str] = &["tom", "lily", "max", "sue", "ben", "mia"];
const ADJS: &[&str] = &["big", "small", "red", "happy", "old", "quiet"];
const NOUNS: &[&str] = &["dog", "cat", "ball", "tree", "house", "bird", "box"];
const VERBS: &[&str] = &["sees", "finds", "likes", "wants", "takes", "keeps"];
const PLACES: &[&str] = &["park", "garden", "river", "school"];

const VARS: &[&str] = &["x", "y", "n", "total", "count", "item"];
const FUNCS: &[&str] = &["add", "scale", "clamp", "reset"];

fn english_sentence(rng: &mut ChaCha8Rng) -> String {
    let name = NAMES.choose(rng).unwrap();
    let adj = ADJS.choose(rng).unwrap();
    let noun = NOUNS.choose(rng).unwrap();
    match rng.random_range(0..5) {
        0 => format!("{name} {} the {adj} {noun} .", VERBS.choose(rng).unwrap()),
        1 => format!("the {adj} {noun} is in the {} .", PLACES.choose(rng).unwrap()),
        2 => format!("if it rains , {name} stays in the house ."),
        3 => format!("{name} goes to the {} with the {noun} .", PLACES.choose(rng).unwrap()),
        _ => format!("one day , {name} {} a {adj} {noun} and is happy .", VERBS.choose(rng).unwrap()),
    }
}

/// One story: 3 to 6 sentences.
pub fn english_document(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..=6);
    (0..n).map(|_| english_sentence(rng)).collect::<Vec<_>>().join(" ")
}

fn code_statement(rng: &mut ChaCha8Rng, indent: &str) -> String {
    let a = VARS.choose(rng).unwrap();
    let b = VARS.choose(rng).unwrap();
    let k = rng.random_range(0..10);
    match rng.random_range(0..6) {
        0 => format!("{indent}{a} = {b} + {k}"),
        1 => format!("{indent}if {a} > {k} :\n{indent}    {b} = {a}"),
        2 => format!("{indent}for i in range ( {k} ) :\n{indent}    {a} = {a} + i"),
        3 => format!("{indent}while {a} < {k} :\n{indent}    {a} = {a} + 1"),
        4 => format!("{indent}{a} = {} ( {b} , {k} )", FUNCS.choose(rng).unwrap()),
        _ => format!("{indent}return {a}"),
    }
}

/// One function definition with 2 to 5 body statements.
pub fn code_document(rng: &mut ChaCha8Rng) -> String {
    let f = FUNCS.choose(rng).unwrap();
    let a = VARS.choose(rng).unwrap();
    let mut lines = vec![format!("def {f} ( {a} ) :")];
    for _ in 0..rng.random_range(2..=5) {
        lines.push(code_statement(rng, "    "));
    }
    lines.push(format!("    return {a}"));
    lines.join("\n")
}

fn story_sentence(rng: &mut ChaCha8Rng, name: &str) -> String {
    let adj = ADJS.choose(rng).unwrap();
    let noun = NOUNS.choose(rng).unwrap();
    let place = PLACES.choose(rng).unwrap();
    match rng.random_range(0..5) {
        0 => format!("{name} loved to play with the {adj} {noun} ."),
        1 => format!("one day , {name} went to the {place} and saw a {noun} ."),
        2 => format!("\"look at the {noun} !\" said {name} ."),
        3 => format!("{name} felt very {adj} because the {noun} was {adj} ."),
        _ => format!("then {name} and the {noun} played in the {place} all day ."),
    }
}

/// One short story in the second English-like dialect: an opening, 2 to 5
/// sentences about one character, and a closing line.
pub fn story_document(rng: &mut ChaCha8Rng) -> String {
    let name = *NAMES.choose(rng).unwrap();
    let mut parts = vec![format!(
        "once upon a time , there was a {} {} named {name} .",
        ADJS.choose(rng).unwrap(),
        NOUNS.choose(rng).unwrap()
    )];
    for _ in 0..rng.random_range(2..=5) {
        parts.push(story_sentence(rng, name));
    }
    parts.push(format!("the end . {name} was happy ."));
    parts.join(" ")
}

fn lua_statement(rng: &mut ChaCha8Rng, indent: &str) -> String {
    let a = VARS.choose(rng).unwrap();
    let b = VARS.choose(rng).unwrap();
    let k = rng.random_range(0..10);
    match rng.random_range(0..6) {
        0 => format!("{indent}local {a} = {b} + {k}"),
        1 => format!("{indent}if {a} ~= {k} then\n{indent}  {b} = {a}\n{indent}end"),
        2 => format!("{indent}for i = 1 , {k} do\n{indent}  {a} = {a} + i\n{indent}end"),
        3 => format!("{indent}while {a} < {k} do\n{indent}  {a} = {a} + 1\n{indent}end"),
        4 => format!("{indent}{a} = {} ( {b} , {k} )", FUNCS.choose(rng).unwrap()),
        _ => format!("{indent}print ( {a} )"),
    }
}

/// One function in the second code-like dialect (two-space indentation,
/// `then`/`do`/`end` blocks).
pub fn lua_document(rng: &mut ChaCha8Rng) -> String {
    let f = FUNCS.choose(rng).unwrap();
    let a = VARS.choose(rng).unwrap();
    let mut lines = vec![format!("local function {f} ( {a} )")];
    for _ in 0..rng.random_range(2..=5) {
        lines.push(lua_statement(rng, "  "));
    }
    lines.push(format!("  return {a}"));
    lines.push("end".into());
    lines.join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    English,
    Code,
    Stories,
    Lua,
}

pub fn documents(domain: Domain, n_docs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|_| match domain {
            Domain::English => english_document(&mut rng),
            Domain::Code => code_document(&mut rng),
            Domain::Stories => story_document(&mut rng),
            Domain::Lua => lua_document(&mut rng),
        })
        .collect()
}

/// Writes documents in one-document-per-line form (newlines escaped as `\n`).
pub fn write_documents(path: &Path, docs: &[String]) -> Result<()> {
    let mut body = String::new();
    for d in docs {
        body.push_str(&d.replace('\\', "\\\\").replace('\n', "\\n"));
        body.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    crate::persist::write_atomic(path, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        assert_eq!(documents(Domain::Code, 5, 3), documents(Domain::Code, 5, 3));
        assert_ne!(documents(Domain::English, 5, 3), documents(Domain::English, 5, 4));
    }

    #[test]
    fn dialects_differ_from_their_parents() {
        let lua = documents(Domain::Lua, 20, 1).join("\n");
        assert!(lua.contains("end") && !lua.contains("def "));
        assert!(documents(Domain::Stories, 3, 1).iter().all(|d| d.starts_with("once upon a time")));
    }
}
