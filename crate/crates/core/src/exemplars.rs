//! Static few-shot exemplars bound into the generation, extraction and
//! translate-with-terms prompts, one set per domain.
//!
//! The built-in sets ship under `prompts/exemplars/`. Files carry a
//! `provenance` field: `"published"` for exemplars transcribed from published
//! prompts, `"authored"` for ones written for this project.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Domain;
use crate::prompting::format::{pair_object, term_object};
use crate::prompting::{AssetManifest, LanguagePair};

#[derive(Debug, Error)]
pub enum ExemplarError {
    #[error("no {kind} exemplars for domain {domain}")]
    Missing { kind: &'static str, domain: String },
    #[error("exemplar file {path}: {reason}")]
    File { path: String, reason: String },
}

/// A source/target sentence pair as it appears in prompt JSON (`de`/`en` keys).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoPair {
    #[serde(rename = "de")]
    pub src: String,
    #[serde(rename = "en")]
    pub tgt: String,
}

/// A source term with its candidate translations (`{"de": .., "en": [..]}`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermRecord {
    #[serde(rename = "de")]
    pub src: String,
    #[serde(rename = "en")]
    pub tgts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoGenExemplar {
    pub source: String,
    pub pairs: Vec<DemoPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermGenExemplar {
    pub source: String,
    pub terms: Vec<TermRecord>,
}

/// Five numbered source lines, five target lines and one raw terminology
/// line per pair. Terminology lines are kept as written, not re-serialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionExemplars {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub terminology: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermTranslationExample {
    pub terminology: Vec<TermRecord>,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DemoGenFile {
    provenance: String,
    exemplars: Vec<DemoGenExemplar>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TermGenFile {
    provenance: String,
    exemplars: Vec<TermGenExemplar>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ExtractionFile {
    provenance: String,
    #[serde(flatten)]
    exemplars: ExtractionExemplars,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TermTranslationFile {
    provenance: String,
    examples: Vec<TermTranslationExample>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainExemplars {
    pub demo_gen: Vec<DemoGenExemplar>,
    pub term_gen: Vec<TermGenExemplar>,
    pub term_extract: Option<ExtractionExemplars>,
    pub term_translation: Vec<TermTranslationExample>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExemplarSet {
    pub domains: BTreeMap<Domain, DomainExemplars>,
    /// Five single-output general-domain demonstration-generation exemplars.
    pub general_demo_gen: Vec<DemoGenExemplar>,
}

macro_rules! builtin {
    ($path:literal) => {
        ($path, include_str!(concat!("../prompts/exemplars/", $path)))
    };
}

const BUILTIN_FILES: [(&str, &str); 13] = [
    builtin!("demo_gen/law.json"),
    builtin!("demo_gen/medical.json"),
    builtin!("demo_gen/koran.json"),
    builtin!("demo_gen/general_5x1.json"),
    builtin!("term_gen/law.json"),
    builtin!("term_gen/medical.json"),
    builtin!("term_gen/koran.json"),
    builtin!("term_extract/law.json"),
    builtin!("term_extract/medical.json"),
    builtin!("term_extract/koran.json"),
    builtin!("mt_with_terms/law.json"),
    builtin!("mt_with_terms/medical.json"),
    builtin!("mt_with_terms/koran.json"),
];

fn parse<T: for<'de> Deserialize<'de>>(path: &str, content: &str) -> Result<T, ExemplarError> {
    serde_json::from_str(content).map_err(|e| ExemplarError::File {
        path: path.to_string(),
        reason: e.to_string(),
    })
}

impl ExemplarSet {
    pub fn builtin() -> Self {
        let manifest = AssetManifest::builtin();
        let mut set = ExemplarSet::default();
        for (path, content) in BUILTIN_FILES {
            manifest
                .check(&format!("exemplars/{path}"), content.as_bytes())
                .expect("built-in exemplar matches manifest");
            set.insert(path, content).expect("built-in exemplars parse");
        }
        set
    }

    /// Loads every `<kind>/<domain>.json` file under `dir`, using the same
    /// layout as the built-in `prompts/exemplars/`.
    pub fn load_dir(dir: &Path) -> Result<Self, ExemplarError> {
        let mut set = ExemplarSet::default();
        for kind in ["demo_gen", "term_gen", "term_extract", "mt_with_terms"] {
            let Ok(entries) = fs::read_dir(dir.join(kind)) else {
                continue;
            };
            let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                if p.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let rel = format!("{kind}/{}", p.file_name().unwrap().to_string_lossy());
                let content = fs::read_to_string(&p).map_err(|e| ExemplarError::File {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                set.insert(&rel, &content)?;
            }
        }
        Ok(set)
    }

    /// Reads a replacement general-domain exemplar file.
    pub fn load_general(path: &Path) -> Result<Vec<DemoGenExemplar>, ExemplarError> {
        let content = fs::read_to_string(path).map_err(|e| ExemplarError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let f: DemoGenFile = parse(&path.display().to_string(), &content)?;
        Ok(f.exemplars)
    }

    fn insert(&mut self, rel: &str, content: &str) -> Result<(), ExemplarError> {
        let (kind, file) = rel.split_once('/').unwrap_or(("", rel));
        let stem = file.trim_end_matches(".json");
        if kind == "demo_gen" && stem == "general_5x1" {
            let f: DemoGenFile = parse(rel, content)?;
            self.general_demo_gen = f.exemplars;
            return Ok(());
        }
        let entry = self.domains.entry(Domain::from(stem)).or_default();
        match kind {
            "demo_gen" => entry.demo_gen = parse::<DemoGenFile>(rel, content)?.exemplars,
            "term_gen" => entry.term_gen = parse::<TermGenFile>(rel, content)?.exemplars,
            "term_extract" => entry.term_extract = Some(parse::<ExtractionFile>(rel, content)?.exemplars),
            "mt_with_terms" => {
                entry.term_translation = parse::<TermTranslationFile>(rel, content)?.examples
            }
            _ => {}
        }
        Ok(())
    }

    pub fn domain(&self, domain: &Domain) -> Option<&DomainExemplars> {
        self.domains.get(domain)
    }

    pub fn demo_gen(&self, domain: &Domain) -> Result<&[DemoGenExemplar], ExemplarError> {
        self.domain(domain)
            .map(|d| d.demo_gen.as_slice())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| missing("demonstration-generation", domain))
    }

    pub fn term_gen(&self, domain: &Domain) -> Result<&[TermGenExemplar], ExemplarError> {
        self.domain(domain)
            .map(|d| d.term_gen.as_slice())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| missing("terminology-generation", domain))
    }

    pub fn term_extract(&self, domain: &Domain) -> Result<&ExtractionExemplars, ExemplarError> {
        self.domain(domain)
            .and_then(|d| d.term_extract.as_ref())
            .ok_or_else(|| missing("terminology-extraction", domain))
    }

    pub fn term_translation(&self, domain: &Domain) -> Result<&[TermTranslationExample], ExemplarError> {
        self.domain(domain)
            .map(|d| d.term_translation.as_slice())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| missing("translate-with-terms", domain))
    }
}

fn missing(kind: &'static str, domain: &Domain) -> ExemplarError {
    ExemplarError::Missing {
        kind,
        domain: domain.to_string(),
    }
}

/// `German source: ...` followed by `Pair i: {...}` lines, each exemplar
/// closed by a `---` line.
pub fn render_demo_gen_block(exemplars: &[DemoGenExemplar], langs: &LanguagePair) -> String {
    let mut lines = Vec::new();
    for ex in exemplars {
        lines.push(format!("{} source: {}", langs.source_name, ex.source));
        for (i, p) in ex.pairs.iter().enumerate() {
            lines.push(format!("Pair {}: {}", i + 1, pair_object(&p.src, &p.tgt)));
        }
        lines.push("---".to_string());
    }
    lines.join("\n")
}

/// `German source: ...` followed by `Term i: {...}` lines, each exemplar
/// closed by a `---` line.
pub fn render_term_gen_block(exemplars: &[TermGenExemplar], langs: &LanguagePair) -> String {
    let mut lines = Vec::new();
    for ex in exemplars {
        lines.push(format!("{} source: {}", langs.source_name, ex.source));
        for (i, t) in ex.terms.iter().enumerate() {
            lines.push(format!("Term {}: {}", i + 1, term_object(&t.src, &t.tgts)));
        }
        lines.push("---".to_string());
    }
    lines.join("\n")
}

pub fn numbered_lines<'a>(label: &str, items: impl IntoIterator<Item = &'a str>) -> String {
    items
        .into_iter()
        .enumerate()
        .map(|(i, s)| format!("{label} {}: {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Worked translate-with-terms examples bound into the `{examples}` slot.
pub fn render_term_translation_examples(
    examples: &[TermTranslationExample],
    langs: &LanguagePair,
) -> String {
    examples
        .iter()
        .map(|ex| {
            let terms = crate::prompting::format::terminology_list(
                ex.terminology.iter().map(|t| (t.src.as_str(), t.tgts.as_slice())),
            );
            format!(
                "Terminology: {terms}\n{}: {}\n{}: {}",
                langs.source_name, ex.source, langs.target_name, ex.target
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Flattens demonstration-generation exemplars into static translation
/// demonstrations (every generated pair of every exemplar, in order).
pub fn static_demos(exemplars: &[DemoGenExemplar]) -> Vec<DemoPair> {
    exemplars.iter().flat_map(|e| e.pairs.iter().cloned()).collect()
}
