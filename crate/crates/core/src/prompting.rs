//! Prompt templates: loading, byte-exact rendering and translation-output
//! parsing.
//!
//! Templates live as text assets under `prompts/` with a digest manifest.
//! A template body holds two kinds of slot markers, both bound by name:
//! `{name}` for per-prompt variables and `[name]` for static exemplar blocks.
//! Slot values are inserted verbatim and never rescanned.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::json_repair::{parse_lenient, strip_code_fence};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} is missing slot {slot:?}")]
    MissingSlot { template: TemplateId, slot: String },
    #[error("prompt asset {path}: {reason}")]
    Asset { path: String, reason: String },
    #[error("empty model output")]
    EmptyOutput,
    #[error("template {0} does not produce translations")]
    NotATranslationTemplate(TemplateId),
    #[error("unknown setting {0:?}")]
    UnknownSetting(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ZeroShot,
    MtWithDemos,
    MtWithTerms,
    MtWithStyle,
    DemoGen,
    TermGen,
    TermExtract,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::ZeroShot,
        TemplateId::MtWithDemos,
        TemplateId::MtWithTerms,
        TemplateId::MtWithStyle,
        TemplateId::DemoGen,
        TemplateId::TermGen,
        TemplateId::TermExtract,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ZeroShot => "zero_shot",
            TemplateId::MtWithDemos => "mt_with_demos",
            TemplateId::MtWithTerms => "mt_with_terms",
            TemplateId::MtWithStyle => "mt_with_style",
            TemplateId::DemoGen => "demo_gen",
            TemplateId::TermGen => "term_gen",
            TemplateId::TermExtract => "term_extract",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    /// Templates whose answer is expected as `{"translation": ...}`.
    pub fn expects_json_translation(self) -> bool {
        matches!(self, TemplateId::ZeroShot | TemplateId::MtWithTerms)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

/// The experimental settings. Retrieved and generated knowledge of the same
/// kind share one template; only the bound knowledge differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ZeroShot,
    RetrievedTerms,
    RetrievedDemos,
    GeneratedTerms,
    GeneratedDemos,
    LocalTerms,
    StyleDemos,
}

impl Setting {
    pub const ALL: [Setting; 7] = [
        Setting::ZeroShot,
        Setting::RetrievedTerms,
        Setting::RetrievedDemos,
        Setting::GeneratedTerms,
        Setting::GeneratedDemos,
        Setting::LocalTerms,
        Setting::StyleDemos,
    ];

    pub fn template(self) -> TemplateId {
        match self {
            Setting::ZeroShot => TemplateId::ZeroShot,
            Setting::RetrievedTerms | Setting::GeneratedTerms | Setting::LocalTerms => {
                TemplateId::MtWithTerms
            }
            Setting::RetrievedDemos | Setting::GeneratedDemos => TemplateId::MtWithDemos,
            Setting::StyleDemos => TemplateId::MtWithStyle,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::ZeroShot => "zero_shot",
            Setting::RetrievedTerms => "retrieved_terms",
            Setting::RetrievedDemos => "retrieved_demos",
            Setting::GeneratedTerms => "generated_terms",
            Setting::GeneratedDemos => "generated_demos",
            Setting::LocalTerms => "local_terms",
            Setting::StyleDemos => "style_demos",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownSetting(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pub required_slots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(std::ops::Range<usize>),
    Slot(String),
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

/// Splits a template body into literal text and slot markers.
fn scan(body: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    let bytes = body.as_bytes();
    while i < bytes.len() {
        let close = match bytes[i] {
            b'{' => Some('}'),
            b'[' => Some(']'),
            _ => None,
        };
        if let Some(close) = close {
            if let Some(rel) = body[i + 1..].find(close) {
                let name = &body[i + 1..i + 1 + rel];
                if is_slot_name(name) {
                    if lit_start < i {
                        pieces.push(Piece::Text(lit_start..i));
                    }
                    pieces.push(Piece::Slot(name.to_string()));
                    i += rel + 2;
                    lit_start = i;
                    continue;
                }
            }
        }
        i += 1;
    }
    if lit_start < body.len() {
        pieces.push(Piece::Text(lit_start..body.len()));
    }
    pieces
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Self {
        let body = body.into();
        let mut required_slots: Vec<String> = Vec::new();
        for p in scan(&body) {
            if let Piece::Slot(name) = p {
                if !required_slots.contains(&name) {
                    required_slots.push(name);
                }
            }
        }
        Self {
            id,
            body,
            required_slots,
        }
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        let mut text = String::with_capacity(self.body.len() + 256);
        let mut bound = BTreeMap::new();
        for piece in scan(&self.body) {
            match piece {
                Piece::Text(r) => text.push_str(&self.body[r]),
                Piece::Slot(name) => {
                    let value = slots.get(&name).ok_or_else(|| PromptError::MissingSlot {
                        template: self.id,
                        slot: name.clone(),
                    })?;
                    text.push_str(value);
                    bound.insert(name, value.clone());
                }
            }
        }
        Ok(RenderedPrompt::new(self.id, bound, text))
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    template_id: TemplateId,
    bound: BTreeMap<String, String>,
    text: String,
    content_hash: String,
}

impl RenderedPrompt {
    fn new(template_id: TemplateId, bound: BTreeMap<String, String>, text: String) -> Self {
        let content_hash = sha256_hex(text.as_bytes());
        Self {
            template_id,
            bound,
            text,
            content_hash,
        }
    }

    pub fn template_id(&self) -> TemplateId {
        self.template_id
    }

    pub fn bound(&self) -> &BTreeMap<String, String> {
        &self.bound
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    /// Recomputes the digest of the text and compares it with the stored one.
    pub fn verify(&self) -> bool {
        sha256_hex(self.text.as_bytes()) == self.content_hash
    }
}

const BUILTIN_MANIFEST: &str = include_str!("../prompts/manifest.json");

const BUILTIN_TEMPLATES: [(TemplateId, &str); 7] = [
    (TemplateId::ZeroShot, include_str!("../prompts/zero_shot.txt")),
    (TemplateId::MtWithDemos, include_str!("../prompts/mt_with_demos.txt")),
    (TemplateId::MtWithTerms, include_str!("../prompts/mt_with_terms.txt")),
    (TemplateId::MtWithStyle, include_str!("../prompts/mt_with_style.txt")),
    (TemplateId::DemoGen, include_str!("../prompts/demo_gen.txt")),
    (TemplateId::TermGen, include_str!("../prompts/term_gen.txt")),
    (TemplateId::TermExtract, include_str!("../prompts/term_extract.txt")),
];

/// `prompts/manifest.json`: asset path (relative to the prompt directory) to
/// SHA-256 hex digest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssetManifest {
    pub version: u32,
    pub files: BTreeMap<String, String>,
}

impl AssetManifest {
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_MANIFEST).expect("built-in manifest parses")
    }

    pub fn check(&self, rel_path: &str, content: &[u8]) -> Result<(), PromptError> {
        let expected = self.files.get(rel_path).ok_or_else(|| PromptError::Asset {
            path: rel_path.to_string(),
            reason: "not listed in manifest".into(),
        })?;
        let actual = sha256_hex(content);
        if *expected != actual {
            return Err(PromptError::Asset {
                path: rel_path.to_string(),
                reason: format!("digest mismatch: manifest {expected}, file {actual}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: HashMap<TemplateId, PromptTemplate>,
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let manifest = AssetManifest::builtin();
        let templates = BUILTIN_TEMPLATES
            .iter()
            .map(|(id, body)| {
                manifest
                    .check(&id.file_name(), body.as_bytes())
                    .expect("built-in prompt matches manifest");
                (*id, PromptTemplate::new(*id, *body))
            })
            .collect();
        Self { templates }
    }

    /// Loads templates from a directory laid out like the built-in `prompts/`,
    /// verifying each file against the directory's `manifest.json`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |rel: &str| {
            fs::read_to_string(dir.join(rel)).map_err(|e| PromptError::Asset {
                path: dir.join(rel).display().to_string(),
                reason: e.to_string(),
            })
        };
        let manifest: AssetManifest =
            serde_json::from_str(&read("manifest.json")?).map_err(|e| PromptError::Asset {
                path: "manifest.json".into(),
                reason: e.to_string(),
            })?;
        let mut templates = HashMap::new();
        for id in TemplateId::ALL {
            let body = read(&id.file_name())?;
            manifest.check(&id.file_name(), body.as_bytes())?;
            templates.insert(id, PromptTemplate::new(id, body));
        }
        Ok(Self { templates })
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(
        &self,
        id: TemplateId,
        slots: &BTreeMap<String, String>,
    ) -> Result<RenderedPrompt, PromptError> {
        self.get(id).render(slots)
    }
}

/// Language names bound into the `{source_language_name}`-style slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub source_name: String,
    pub target_name: String,
}

impl Default for LanguagePair {
    fn default() -> Self {
        Self {
            source_name: "German".into(),
            target_name: "English".into(),
        }
    }
}

impl LanguagePair {
    pub fn slots(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("source_language_name".into(), self.source_name.clone()),
            ("target_language_name".into(), self.target_name.clone()),
            ("src_full".into(), self.source_name.clone()),
            ("tgt_full".into(), self.target_name.clone()),
        ])
    }
}

/// Text formats shared by prompts and their parsers.
pub mod format {
    use super::LanguagePair;

    pub fn json_str(s: &str) -> String {
        serde_json::to_string(s).expect("strings serialize")
    }

    /// `{"de": "...", "en": "..."}`
    pub fn pair_object(src: &str, tgt: &str) -> String {
        format!("{{\"de\": {}, \"en\": {}}}", json_str(src), json_str(tgt))
    }

    /// `{"de": "...", "en": ["...", "..."]}`
    pub fn term_object(src: &str, tgts: &[String]) -> String {
        let list: Vec<String> = tgts.iter().map(|t| json_str(t)).collect();
        format!("{{\"de\": {}, \"en\": [{}]}}", json_str(src), list.join(", "))
    }

    /// The one-to-many terminology list bound into the `{terminology}` slot.
    pub fn terminology_list<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [String])>) -> String {
        let items: Vec<String> = entries
            .into_iter()
            .map(|(src, tgts)| term_object(src, tgts))
            .collect();
        format!("[{}]", items.join(", "))
    }

    /// Translation demonstrations, one `German: ...` / `English: ...` line
    /// pair per demonstration.
    pub fn demo_examples<'a>(
        demos: impl IntoIterator<Item = (&'a str, &'a str)>,
        langs: &LanguagePair,
    ) -> String {
        demos
            .into_iter()
            .map(|(s, t)| format!("{}: {}\n{}: {}", langs.source_name, s, langs.target_name, t))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    /// For bare-text outputs, append following lines that begin with a
    /// lowercase letter to the first line.
    pub merge_lowercase_continuation: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            merge_lowercase_continuation: true,
        }
    }
}

/// Extracts the translation from raw model output.
pub fn parse_translation(
    raw: &str,
    template: TemplateId,
    langs: &LanguagePair,
    opts: ParseOptions,
) -> Result<String, PromptError> {
    let out = match template {
        TemplateId::ZeroShot | TemplateId::MtWithTerms => json_translation(raw)
            .unwrap_or_else(|| strip_target_label(strip_code_fence(raw), langs).trim().to_string()),
        TemplateId::MtWithDemos | TemplateId::MtWithStyle => {
            match json_translation(raw) {
                Some(t) if raw.trim_start().starts_with(['{', '`']) => t,
                _ => first_line_translation(raw, langs, opts),
            }
        }
        other => return Err(PromptError::NotATranslationTemplate(other)),
    };
    if out.is_empty() {
        Err(PromptError::EmptyOutput)
    } else {
        Ok(out)
    }
}

fn json_translation(raw: &str) -> Option<String> {
    let body = strip_code_fence(raw);
    let candidate = match (body.find('{'), body.rfind('}')) {
        (Some(s), Some(e)) if s < e => &body[s..=e],
        (Some(s), _) => &body[s..],
        _ => return None,
    };
    let (value, _) = parse_lenient(candidate).ok()?;
    let t = value.get("translation")?.as_str()?.trim().to_string();
    (!t.is_empty()).then_some(t)
}

fn strip_target_label<'a>(line: &'a str, langs: &LanguagePair) -> &'a str {
    let t = line.trim_start();
    t.strip_prefix(&format!("{}:", langs.target_name))
        .map(str::trim_start)
        .unwrap_or(t)
}

fn first_line_translation(raw: &str, langs: &LanguagePair, opts: ParseOptions) -> String {
    let mut lines = raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"));
    let Some(first) = lines.next() else {
        return String::new();
    };
    let mut out = strip_target_label(first, langs).to_string();
    if opts.merge_lowercase_continuation {
        for next in lines {
            if next.chars().next().is_some_and(char::is_lowercase) {
                out.push(' ');
                out.push_str(next);
            } else {
                break;
            }
        }
    }
    out.trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(extra: &[(&str, &str)]) -> BTreeMap<String, String> {
        let mut s = LanguagePair::default().slots();
        for (k, v) in extra {
            s.insert(k.to_string(), v.to_string());
        }
        s
    }

    #[test]
    fn required_slots_are_discovered() {
        let lib = PromptLibrary::builtin();
        assert_eq!(
            lib.get(TemplateId::ZeroShot).required_slots,
            ["src_full", "tgt_full", "source_language_name", "source_text", "target_language_name"]
        );
        assert!(lib
            .get(TemplateId::TermExtract)
            .required_slots
            .contains(&"term_examples".to_string()));
    }

    #[test]
    fn zero_shot_render() {
        let lib = PromptLibrary::builtin();
        let p = lib
            .render(TemplateId::ZeroShot, &slots(&[("source_text", "Hallo")]))
            .unwrap();
        assert!(p.text().contains(r#"output the result
in JSON format using "translation" as the key"#));
        assert!(p.text().ends_with("German: Hallo\nEnglish:"));
        assert!(p.verify());
    }

    #[test]
    fn missing_slot_is_reported() {
        let lib = PromptLibrary::builtin();
        let err = lib.render(TemplateId::ZeroShot, &LanguagePair::default().slots()).unwrap_err();
        assert!(matches!(err, PromptError::MissingSlot { ref slot, .. } if slot == "source_text"));
    }

    #[test]
    fn unknown_template_id() {
        assert!(matches!(
            "few_shot".parse::<TemplateId>(),
            Err(PromptError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate::new(TemplateId::ZeroShot, "a {x} b");
        let mut s = BTreeMap::new();
        s.insert("x".to_string(), "{x} [y]".to_string());
        assert_eq!(t.render(&s).unwrap().text(), "a {x} [y] b");
    }

    #[test]
    fn empty_terminology_still_renders() {
        let lib = PromptLibrary::builtin();
        let p = lib
            .render(
                TemplateId::MtWithTerms,
                &slots(&[("source_text", "Hallo"), ("examples", ""), ("terminology", "[]")]),
            )
            .unwrap();
        assert!(p.text().contains("\nTerminology: []\nGerman: Hallo\n"));
        assert!(p.text().contains("pick the most appropriate translated\nterm"));
    }

    #[test]
    fn style_prompt_keeps_mask_instruction() {
        let lib = PromptLibrary::builtin();
        let demos = format::demo_examples([("Die <MASK> tagt.", "The <MASK> meets.")], &LanguagePair::default());
        let p = lib
            .render(
                TemplateId::MtWithStyle,
                &slots(&[("source_text", "Hallo"), ("few_shot_examples", &demos)]),
            )
            .unwrap();
        assert!(p.text().contains("special mask tokens <MASK>"));
        assert!(p.text().contains("please do not use any such tokens"));
        assert!(p.text().contains("German: Die <MASK> tagt.\nEnglish: The <MASK> meets.\n"));
    }

    #[test]
    fn setting_template_mapping() {
        assert_eq!(Setting::RetrievedTerms.template(), Setting::GeneratedTerms.template());
        assert_eq!(Setting::RetrievedDemos.template(), Setting::GeneratedDemos.template());
        assert_eq!(Setting::LocalTerms.template(), TemplateId::MtWithTerms);
        assert_eq!(Setting::StyleDemos.template(), TemplateId::MtWithStyle);
        assert_eq!(Setting::ZeroShot.template(), TemplateId::ZeroShot);
    }

    #[test]
    fn translation_json() {
        let l = LanguagePair::default();
        let o = ParseOptions::default();
        let raw = r#"{"translation": "The commission informed the complainant."}"#;
        assert_eq!(
            parse_translation(raw, TemplateId::ZeroShot, &l, o).unwrap(),
            "The commission informed the complainant."
        );
        let fenced = "```json\n{\"translation\": \"Hello there.\"}\n```";
        assert_eq!(parse_translation(fenced, TemplateId::MtWithTerms, &l, o).unwrap(), "Hello there.");
    }

    #[test]
    fn translation_bare_line() {
        let l = LanguagePair::default();
        let o = ParseOptions::default();
        assert_eq!(
            parse_translation(" The Book.\nGerman: next", TemplateId::MtWithDemos, &l, o).unwrap(),
            "The Book."
        );
        assert_eq!(
            parse_translation("The decision\nshall apply.", TemplateId::MtWithDemos, &l, o).unwrap(),
            "The decision shall apply."
        );
        let no_merge = ParseOptions { merge_lowercase_continuation: false };
        assert_eq!(
            parse_translation("The decision\nshall apply.", TemplateId::MtWithDemos, &l, no_merge).unwrap(),
            "The decision"
        );
    }

    #[test]
    fn empty_output_is_an_error() {
        let l = LanguagePair::default();
        for t in [TemplateId::ZeroShot, TemplateId::MtWithStyle] {
            assert!(matches!(
                parse_translation("  \n", t, &l, ParseOptions::default()),
                Err(PromptError::EmptyOutput)
            ));
        }
        assert!(matches!(
            parse_translation("x", TemplateId::DemoGen, &l, ParseOptions::default()),
            Err(PromptError::NotATranslationTemplate(_))
        ));
    }
}
