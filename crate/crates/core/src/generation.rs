//! Knowledge generated from the model itself: three synthetic demonstration
//! pairs, or a small terminology, per source sentence.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BitextPair, Domain};
use crate::exemplars::{
    render_demo_gen_block, render_term_gen_block, DemoGenExemplar, DemoPair, ExemplarError, ExemplarSet,
    TermGenExemplar, TermRecord,
};
use crate::json_repair::parse_lenient;
use crate::llm::{LlmError, Stage, StagedLlm};
use crate::prompting::{LanguagePair, PromptError, PromptLibrary, RenderedPrompt, TemplateId};
use crate::text::contains_ci;

pub const DEMOS_PER_SOURCE: usize = 3;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("icl mode {mode} needs {expected}, got {got}")]
    BadExemplars { mode: IclMode, expected: &'static str, got: String },
    #[error("icl mode {0} is not available for terminology generation")]
    UnsupportedMode(IclMode),
    #[error("source text is empty")]
    EmptySource,
    #[error("no parseable demonstration pairs in output")]
    NoPairs,
    #[error("unknown icl mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Exemplars(#[from] ExemplarError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Which static exemplars accompany a generation prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IclMode {
    /// Two domain exemplar sources with three generated pairs each.
    #[serde(rename = "domain_2x3")]
    Domain2x3,
    /// Five general-domain exemplar sources with one pair each.
    #[serde(rename = "general_5x1")]
    General5x1,
    #[serde(rename = "none")]
    None,
}

impl IclMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IclMode::Domain2x3 => "domain_2x3",
            IclMode::General5x1 => "general_5x1",
            IclMode::None => "none",
        }
    }
}

impl fmt::Display for IclMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IclMode {
    type Err = GenError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "domain" | "domain_2x3" => Ok(IclMode::Domain2x3),
            "general" | "general_5x1" => Ok(IclMode::General5x1),
            "none" => Ok(IclMode::None),
            other => Err(GenError::UnknownMode(other.to_string())),
        }
    }
}

/// The demonstration-generation exemplars a mode calls for.
pub fn demo_exemplars_for<'a>(
    set: &'a ExemplarSet,
    domain: &Domain,
    mode: IclMode,
) -> Result<&'a [DemoGenExemplar], GenError> {
    Ok(match mode {
        IclMode::Domain2x3 => set.demo_gen(domain)?,
        IclMode::General5x1 => &set.general_demo_gen,
        IclMode::None => &[],
    })
}

fn check_shape(mode: IclMode, exemplars: &[DemoGenExemplar]) -> Result<(), GenError> {
    let (n, per, expected) = match mode {
        IclMode::Domain2x3 => (2, 3, "2 exemplars with 3 pairs each"),
        IclMode::General5x1 => (5, 1, "5 exemplars with 1 pair each"),
        IclMode::None => return Ok(()),
    };
    if exemplars.len() != n || exemplars.iter().any(|e| e.pairs.len() != per) {
        let got = exemplars
            .iter()
            .map(|e| e.pairs.len().to_string())
            .collect::<Vec<_>>()
            .join("+");
        return Err(GenError::BadExemplars {
            mode,
            expected,
            got: if got.is_empty() { "none".into() } else { format!("{} exemplars ({got} pairs)", exemplars.len()) },
        });
    }
    Ok(())
}

fn base_slots(langs: &LanguagePair, src: &str) -> Result<BTreeMap<String, String>, GenError> {
    if src.trim().is_empty() {
        return Err(GenError::EmptySource);
    }
    let mut slots = langs.slots();
    slots.insert("source_text".into(), src.to_string());
    Ok(slots)
}

pub fn build_demo_gen_prompt(
    lib: &PromptLibrary,
    src: &str,
    mode: IclMode,
    exemplars: &[DemoGenExemplar],
    langs: &LanguagePair,
) -> Result<RenderedPrompt, GenError> {
    check_shape(mode, exemplars)?;
    let mut slots = base_slots(langs, src)?;
    let block = match mode {
        IclMode::None => String::new(),
        _ => render_demo_gen_block(exemplars, langs),
    };
    slots.insert("demo_examples".into(), block);
    Ok(lib.render(TemplateId::DemoGen, &slots)?)
}

pub fn build_term_gen_prompt(
    lib: &PromptLibrary,
    src: &str,
    mode: IclMode,
    exemplars: &[TermGenExemplar],
    langs: &LanguagePair,
) -> Result<RenderedPrompt, GenError> {
    let block = match mode {
        IclMode::Domain2x3 if exemplars.is_empty() => {
            return Err(GenError::BadExemplars {
                mode,
                expected: "at least one terminology exemplar",
                got: "none".into(),
            })
        }
        IclMode::Domain2x3 => render_term_gen_block(exemplars, langs),
        IclMode::None => String::new(),
        IclMode::General5x1 => return Err(GenError::UnsupportedMode(mode)),
    };
    let mut slots = base_slots(langs, src)?;
    slots.insert("term_examples".into(), block);
    Ok(lib.render(TemplateId::TermGen, &slots)?)
}

enum Line<'a> {
    /// `Pair 2: {...}`, `Term 1: {...}` or a bare `{...}`.
    Item(&'a str),
    /// `German source: ...`
    Source,
    Separator,
    Other,
}

fn classify<'a>(line: &'a str, item_label: &str) -> Line<'a> {
    let t = line.trim();
    if t.starts_with("---") {
        return Line::Separator;
    }
    if t.starts_with('{') {
        return Line::Item(t);
    }
    if let Some((head, rest)) = t.split_once(':') {
        let head = head.trim();
        if head.to_lowercase().ends_with("source") {
            return Line::Source;
        }
        let mut words = head.split_whitespace();
        if words.next().is_some_and(|w| w.eq_ignore_ascii_case(item_label))
            && words.next().is_some_and(|n| n.chars().all(|c| c.is_ascii_digit()))
            && words.next().is_none()
        {
            return Line::Item(rest.trim());
        }
    }
    Line::Other
}

/// Walks item lines up to the end of the first block: a `---` separator,
/// or a new `... source:` line once items have been seen.
fn item_lines<'a>(raw: &'a str, label: &str, warnings: &mut Vec<String>) -> Vec<&'a str> {
    let mut items = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty() && !l.trim().starts_with("```")) {
        match classify(line, label) {
            Line::Item(body) => items.push(body),
            Line::Separator if !items.is_empty() => break,
            Line::Source if !items.is_empty() => break,
            Line::Separator | Line::Source => {}
            Line::Other => warnings.push(format!("unrecognized line skipped: {}", line.trim())),
        }
    }
    items
}

fn object(body: &str) -> Result<serde_json::Value, String> {
    let start = body.find('{').ok_or("no JSON object")?;
    let slice = match body.rfind('}') {
        Some(end) if end > start => &body[start..=end],
        _ => &body[start..],
    };
    parse_lenient(slice).map(|(v, _)| v).map_err(|e| e.message)
}

fn string_field(v: &serde_json::Value, key: &str) -> Option<String> {
    v.get(key)?.as_str().map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoParse {
    pub pairs: Vec<DemoPair>,
    pub warnings: Vec<String>,
}

/// Parses `Pair i: {"de": .., "en": ..}` lines. More than three pairs keeps
/// the first three; fewer is accepted with a warning; none is an error.
pub fn parse_demo_gen_output(raw: &str) -> Result<DemoParse, GenError> {
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    for body in item_lines(raw, "pair", &mut warnings) {
        match object(body) {
            Ok(v) => match (string_field(&v, "de"), string_field(&v, "en")) {
                (Some(src), Some(tgt)) => pairs.push(DemoPair { src, tgt }),
                _ => warnings.push(format!("pair without de/en strings: {body}")),
            },
            Err(e) => warnings.push(format!("malformed pair ({e}): {body}")),
        }
    }
    if pairs.is_empty() {
        return Err(GenError::NoPairs);
    }
    if pairs.len() > DEMOS_PER_SOURCE {
        warnings.push(format!("{} pairs generated, keeping the first {DEMOS_PER_SOURCE}", pairs.len()));
        pairs.truncate(DEMOS_PER_SOURCE);
    } else if pairs.len() < DEMOS_PER_SOURCE {
        warnings.push(format!("only {} of {DEMOS_PER_SOURCE} pairs generated", pairs.len()));
    }
    Ok(DemoParse { pairs, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermParse {
    pub terms: Vec<TermRecord>,
    pub warnings: Vec<String>,
}

/// Parses `Term i: {"de": .., "en": [..]}` lines; malformed lines are
/// skipped with a warning. No terms is a valid result.
pub fn parse_term_gen_output(raw: &str) -> TermParse {
    let mut warnings = Vec::new();
    let mut terms = Vec::new();
    for body in item_lines(raw, "term", &mut warnings) {
        let v = match object(body) {
            Ok(v) => v,
            Err(e) => {
                warnings.push(format!("malformed term ({e}): {body}"));
                continue;
            }
        };
        let tgts: Vec<String> = match v.get("en") {
            Some(serde_json::Value::String(s)) => vec![s.trim().to_string()],
            Some(serde_json::Value::Array(a)) => a
                .iter()
                .filter_map(|x| x.as_str())
                .map(|s| s.trim().to_string())
                .collect(),
            _ => Vec::new(),
        };
        let tgts: Vec<String> = tgts.into_iter().filter(|t| !t.is_empty()).collect();
        match string_field(&v, "de") {
            Some(src) if !tgts.is_empty() => terms.push(TermRecord { src, tgts }),
            _ => warnings.push(format!("term without de/en: {body}")),
        }
    }
    TermParse { terms, warnings }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedDemos {
    pub source_id: String,
    pub pairs: Vec<DemoPair>,
    pub icl_mode: IclMode,
    pub prompt_hash: String,
    pub raw: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedTerms {
    pub source_id: String,
    pub terms: Vec<TermRecord>,
    pub icl_mode: IclMode,
    pub prompt_hash: String,
    pub raw: String,
    pub warnings: Vec<String>,
}

pub fn generate_demos(
    lib: &PromptLibrary,
    llm: &StagedLlm,
    pair: &BitextPair,
    mode: IclMode,
    exemplars: &[DemoGenExemplar],
    langs: &LanguagePair,
) -> Result<GeneratedDemos, GenError> {
    let prompt = build_demo_gen_prompt(lib, &pair.src, mode, exemplars, langs)?;
    let resp = llm.complete(&prompt, Stage::Generation)?;
    let mut parsed = parse_demo_gen_output(&resp.text)?;
    let before = parsed.pairs.len();
    parsed.pairs.retain(|p| p.src.trim() != pair.src.trim());
    if parsed.pairs.len() < before {
        parsed.warnings.push(format!("{} pair(s) identical to the query dropped", before - parsed.pairs.len()));
    }
    if parsed.pairs.is_empty() {
        return Err(GenError::NoPairs);
    }
    Ok(GeneratedDemos {
        source_id: pair.id.clone(),
        pairs: parsed.pairs,
        icl_mode: mode,
        prompt_hash: prompt.content_hash().to_string(),
        raw: resp.text,
        warnings: parsed.warnings,
    })
}

pub fn generate_terms(
    lib: &PromptLibrary,
    llm: &StagedLlm,
    pair: &BitextPair,
    mode: IclMode,
    exemplars: &[TermGenExemplar],
    langs: &LanguagePair,
) -> Result<GeneratedTerms, GenError> {
    let prompt = build_term_gen_prompt(lib, &pair.src, mode, exemplars, langs)?;
    let resp = llm.complete(&prompt, Stage::Generation)?;
    let mut parsed = parse_term_gen_output(&resp.text);
    for t in &parsed.terms {
        if !contains_ci(&pair.src, &t.src) {
            log::debug!("{}: generated term {:?} not in source", pair.id, t.src);
            parsed.warnings.push(format!("term {:?} does not occur in the source", t.src));
        }
    }
    Ok(GeneratedTerms {
        source_id: pair.id.clone(),
        terms: parsed.terms,
        icl_mode: mode,
        prompt_hash: prompt.content_hash().to_string(),
        raw: resp.text,
        warnings: parsed.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn medical_block() -> String {
        let set = ExemplarSet::builtin();
        let ex = set.demo_gen(&Domain::Medical).unwrap();
        render_demo_gen_block(&ex[..1], &LanguagePair::default())
    }

    #[test]
    fn domain_prompt_embeds_exemplars() {
        let lib = PromptLibrary::builtin();
        let set = ExemplarSet::builtin();
        let ex = demo_exemplars_for(&set, &Domain::Medical, IclMode::Domain2x3).unwrap();
        let p = build_demo_gen_prompt(&lib, "Eine Tablette täglich.", IclMode::Domain2x3, ex, &LanguagePair::default())
            .unwrap();
        assert!(p.text().contains("German source: Die EDGE- und EDGE-II-Studien"));
        assert!(p.text().ends_with("German source: Eine Tablette täglich.\nPair 1:"));
    }

    #[test]
    fn none_mode_leaves_slot_empty() {
        let lib = PromptLibrary::builtin();
        let p = build_demo_gen_prompt(&lib, "Hallo", IclMode::None, &[], &LanguagePair::default()).unwrap();
        assert_eq!(p.bound()["demo_examples"], "");
        assert!(p.text().contains("separate line.\n\nGerman source: Hallo"));
        let t = build_term_gen_prompt(&lib, "Hallo", IclMode::None, &[], &LanguagePair::default()).unwrap();
        assert_eq!(t.bound()["term_examples"], "");
    }

    #[test]
    fn general_mode_needs_five() {
        let lib = PromptLibrary::builtin();
        let set = ExemplarSet::builtin();
        let four = &set.general_demo_gen[..4];
        assert!(matches!(
            build_demo_gen_prompt(&lib, "Hallo", IclMode::General5x1, four, &LanguagePair::default()),
            Err(GenError::BadExemplars { .. })
        ));
        assert!(build_demo_gen_prompt(&lib, "Hallo", IclMode::General5x1, &set.general_demo_gen, &LanguagePair::default())
            .is_ok());
    }

    #[test]
    fn term_prompt_embeds_law_exemplars() {
        let lib = PromptLibrary::builtin();
        let set = ExemplarSet::builtin();
        let ex = set.term_gen(&Domain::Law).unwrap();
        let p = build_term_gen_prompt(&lib, "Die Kommission", IclMode::Domain2x3, ex, &LanguagePair::default()).unwrap();
        assert!(p.text().contains(r#"Term 1: {"de": "einleitung des verfahrens""#));
        assert!(matches!(
            build_term_gen_prompt(&lib, "  ", IclMode::Domain2x3, ex, &LanguagePair::default()),
            Err(GenError::EmptySource)
        ));
    }

    #[test]
    fn parses_exemplar_block() {
        let out = parse_demo_gen_output(&medical_block()).unwrap();
        assert_eq!(out.pairs.len(), 3);
        assert!(out.pairs[0].src.starts_with("Die kardiorenalen Ergebnisse"));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn continuation_after_pair_prefix() {
        // The prompt ends with "Pair 1:", so the model starts mid-line.
        let raw = " {\"de\": \"a\", \"en\": \"b\"}\nPair 2: {\"de\": \"c\", \"en\": \"d\"}\nPair 3: {\"de\": \"e\", \"en\": \"f\"}\n---\nGerman source: x\nPair 1: {\"de\": \"g\", \"en\": \"h\"}";
        let out = parse_demo_gen_output(raw).unwrap();
        assert_eq!(out.pairs.iter().map(|p| p.src.as_str()).collect::<Vec<_>>(), ["a", "c", "e"]);
    }

    #[test]
    fn extra_pairs_are_truncated() {
        let raw = (1..=4)
            .map(|i| format!("Pair {i}: {{\"de\": \"s{i}\", \"en\": \"t{i}\"}}"))
            .collect::<Vec<_>>()
            .join("\n");
        let out = parse_demo_gen_output(&raw).unwrap();
        assert_eq!(out.pairs.len(), 3);
        assert_eq!(out.warnings.len(), 1);
        assert!(matches!(parse_demo_gen_output(""), Err(GenError::NoPairs)));
    }

    #[test]
    fn law_term_lines_parse() {
        let set = ExemplarSet::builtin();
        let ex = set.term_gen(&Domain::Law).unwrap();
        let block = render_term_gen_block(&ex[..1], &LanguagePair::default());
        let out = parse_term_gen_output(&block);
        assert_eq!(out.terms.len(), 10);
        assert_eq!(out.terms, ex[0].terms);
        assert!(parse_term_gen_output("").terms.is_empty());
    }

    #[test]
    fn malformed_term_line_is_skipped() {
        let raw = "Term 1: {\"de\": \"a\", \"en\": [\"x\"]}\nTerm 2: {\"de\": 5}\nTerm 3: {\"de\": \"b\", \"en\": [\"y\"]}";
        let out = parse_term_gen_output(raw);
        assert_eq!(out.terms.len(), 2);
        assert_eq!(out.warnings.len(), 1);
    }
}
