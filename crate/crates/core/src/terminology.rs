//! Bilingual terminology: batched extraction from bitext, aggregation into a
//! one-to-many dictionary with a usage filter, and lookup against source text.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use aho_corasick::{AhoCorasick, MatchKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{iter_batches, BitextPair, Domain};
use crate::exemplars::{numbered_lines, ExtractionExemplars, TermRecord};
use crate::json_repair::parse_lenient;
use crate::llm::{LlmError, Stage, StagedLlm};
use crate::prompting::{PromptError, PromptLibrary, RenderedPrompt, TemplateId};
use crate::text::{aligned_to_tokens, contains_ci, Folded};

pub const MAX_EXTRACTION_BATCH: usize = 5;
/// Candidates need strictly more than this share of their source term's
/// occurrences to survive aggregation.
pub const USAGE_THRESHOLD: f64 = 0.10;

const DICT_FORMAT: &str = "domt-terminology";
const DICT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TermError {
    #[error("extraction batch has {0} pairs; at most {MAX_EXTRACTION_BATCH} allowed")]
    OversizeBatch(usize),
    #[error("extraction batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format { path: String, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TermPair {
    /// Lowercased.
    pub src_term: String,
    pub tgt_term: String,
    pub origin_pair_id: String,
}

impl TermPair {
    /// Lowercases and trims the source term; `None` if either side is empty.
    pub fn new(src: &str, tgt: &str, origin: impl Into<String>) -> Option<Self> {
        let src_term = src.trim().to_lowercase();
        let tgt_term = tgt.trim().to_string();
        (!src_term.is_empty() && !tgt_term.is_empty()).then(|| Self {
            src_term,
            tgt_term,
            origin_pair_id: origin.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tgt_term: String,
    pub count: u64,
    /// Share of the source term's occurrences, computed before filtering.
    pub usage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEntry {
    pub src_term: String,
    /// Most frequent first; ties by target string.
    pub candidates: Vec<Candidate>,
}

impl TermEntry {
    pub fn targets(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.tgt_term.clone()).collect()
    }

    pub fn to_record(&self) -> TermRecord {
        TermRecord {
            src: self.src_term.clone(),
            tgts: self.targets(),
        }
    }

    pub fn total_count(&self) -> u64 {
        self.candidates.iter().map(|c| c.count).sum()
    }
}

/// Occurrence counts per (source term, target term), before any filtering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TermCounts(pub BTreeMap<String, BTreeMap<String, u64>>);

impl TermCounts {
    pub fn add(&mut self, pair: &TermPair) {
        *self
            .0
            .entry(pair.src_term.clone())
            .or_default()
            .entry(pair.tgt_term.clone())
            .or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: TermCounts) {
        for (src, tgts) in other.0 {
            let e = self.0.entry(src).or_default();
            for (t, n) in tgts {
                *e.entry(t).or_insert(0) += n;
            }
        }
    }

    /// Entries with usages over all candidates (no filter applied).
    pub fn entries(&self) -> impl Iterator<Item = TermEntry> + '_ {
        self.0.iter().map(|(src, tgts)| {
            let total: u64 = tgts.values().sum();
            let mut candidates: Vec<Candidate> = tgts
                .iter()
                .map(|(t, &n)| Candidate {
                    tgt_term: t.clone(),
                    count: n,
                    usage: n as f64 / total as f64,
                })
                .collect();
            candidates.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.tgt_term.cmp(&b.tgt_term)));
            TermEntry {
                src_term: src.clone(),
                candidates,
            }
        })
    }

    /// Drops candidates at or below `threshold` usage (when given) and
    /// entries left empty.
    pub fn into_dictionary(&self, domain: Domain, threshold: Option<f64>) -> GlobalDictionary {
        let entries = self
            .entries()
            .filter_map(|mut e| {
                if let Some(th) = threshold {
                    e.candidates.retain(|c| c.usage > th);
                }
                (!e.candidates.is_empty()).then(|| (e.src_term.clone(), e))
            })
            .collect();
        GlobalDictionary::from_entries(domain, entries)
    }
}

pub fn aggregate_counts<'a>(pairs: impl IntoIterator<Item = &'a TermPair>) -> TermCounts {
    let mut c = TermCounts::default();
    for p in pairs {
        c.add(p);
    }
    c
}

/// Counts, computes usages and applies the strict usage filter.
pub fn aggregate<'a>(domain: Domain, pairs: impl IntoIterator<Item = &'a TermPair>) -> GlobalDictionary {
    aggregate_counts(pairs).into_dictionary(domain, Some(USAGE_THRESHOLD))
}

/// One occurrence-ordered lookup hit; `start`/`end` are byte offsets of the
/// first occurrence in the looked-up text.
#[derive(Debug, Clone, PartialEq)]
pub struct TermMatch<'a> {
    pub entry: &'a TermEntry,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupOptions {
    /// Only count occurrences that start and end on token boundaries.
    pub token_boundaries: bool,
}

#[derive(Debug, Clone)]
pub struct GlobalDictionary {
    pub domain: Domain,
    entries: BTreeMap<String, TermEntry>,
    matcher: OnceLock<(AhoCorasick, Vec<String>)>,
}

impl PartialEq for GlobalDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain && self.entries == other.entries
    }
}

#[derive(Serialize, Deserialize)]
struct DictHeader {
    format: String,
    version: u32,
    domain: Domain,
    entries: usize,
}

#[derive(Serialize, Deserialize)]
struct DictLine {
    de: String,
    en: Vec<String>,
    counts: Vec<u64>,
    /// Occurrences of `de` before filtering; usage = count / total.
    total: u64,
}

impl GlobalDictionary {
    pub fn empty(domain: Domain) -> Self {
        Self::from_entries(domain, BTreeMap::new())
    }

    pub fn from_entries(domain: Domain, entries: BTreeMap<String, TermEntry>) -> Self {
        Self {
            domain,
            entries,
            matcher: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, src_term: &str) -> Option<&TermEntry> {
        self.entries.get(src_term)
    }

    pub fn entries(&self) -> impl Iterator<Item = &TermEntry> {
        self.entries.values()
    }

    fn matcher(&self) -> &(AhoCorasick, Vec<String>) {
        self.matcher.get_or_init(|| {
            let keys: Vec<String> = self.entries.keys().cloned().collect();
            let ac = AhoCorasick::builder()
                .match_kind(MatchKind::Standard)
                .build(&keys)
                .expect("dictionary automaton builds");
            (ac, keys)
        })
    }

    /// Entries whose source term occurs case-insensitively in `text`, ordered
    /// by first occurrence, then longer terms first. Overlapping and nested
    /// matches are all reported.
    pub fn lookup(&self, text: &str, opts: LookupOptions) -> Vec<TermMatch<'_>> {
        if self.entries.is_empty() || text.is_empty() {
            return Vec::new();
        }
        let folded = Folded::new(text);
        let (ac, keys) = self.matcher();
        let mut first: HashMap<usize, (usize, usize)> = HashMap::new();
        for m in ac.find_overlapping_iter(&folded.folded) {
            if !folded.folded.is_char_boundary(m.start()) || !folded.folded.is_char_boundary(m.end()) {
                continue;
            }
            let (s, e) = folded.original_span(m.start(), m.end());
            if opts.token_boundaries && !aligned_to_tokens(text, s, e) {
                continue;
            }
            let slot = first.entry(m.pattern().as_usize()).or_insert((s, e));
            if s < slot.0 {
                *slot = (s, e);
            }
        }
        let mut hits: Vec<TermMatch<'_>> = first
            .into_iter()
            .map(|(pid, (start, end))| TermMatch {
                entry: &self.entries[&keys[pid]],
                start,
                end,
            })
            .collect();
        hits.sort_by(|a, b| {
            a.start
                .cmp(&b.start)
                .then_with(|| b.entry.src_term.len().cmp(&a.entry.src_term.len()))
                .then_with(|| a.entry.src_term.cmp(&b.entry.src_term))
        });
        hits
    }

    pub fn save(&self, path: &Path) -> Result<(), TermError> {
        let mut out = String::new();
        let header = DictHeader {
            format: DICT_FORMAT.into(),
            version: DICT_VERSION,
            domain: self.domain.clone(),
            entries: self.entries.len(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for e in self.entries.values() {
            let total = e.candidates.first().map_or(0, |c| (c.count as f64 / c.usage).round() as u64);
            let line = DictLine {
                de: e.src_term.clone(),
                en: e.targets(),
                counts: e.candidates.iter().map(|c| c.count).collect(),
                total,
            };
            out.push_str(&serde_json::to_string(&line).expect("entry serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| TermError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TermError> {
        let p = path.display().to_string();
        let f = fs::File::open(path).map_err(|source| TermError::Io { path: p.clone(), source })?;
        let fmt_err = |line: usize, reason: String| TermError::Format {
            path: p.clone(),
            line,
            reason,
        };
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| fmt_err(1, "missing header".into()))?
            .map_err(|source| TermError::Io { path: p.clone(), source })?;
        let header: DictHeader = serde_json::from_str(&header_line).map_err(|e| fmt_err(1, e.to_string()))?;
        if header.format != DICT_FORMAT || header.version != DICT_VERSION {
            return Err(fmt_err(1, format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut entries = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|source| TermError::Io { path: p.clone(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let d: DictLine = serde_json::from_str(&line).map_err(|e| fmt_err(i + 2, e.to_string()))?;
            if d.en.len() != d.counts.len() || d.en.is_empty() {
                return Err(fmt_err(i + 2, "en and counts differ in length".into()));
            }
            let total = d.total.max(d.counts.iter().sum());
            let candidates = d
                .en
                .into_iter()
                .zip(d.counts)
                .map(|(t, n)| Candidate {
                    tgt_term: t,
                    count: n,
                    usage: n as f64 / total as f64,
                })
                .collect();
            entries.insert(
                d.de.clone(),
                TermEntry {
                    src_term: d.de,
                    candidates,
                },
            );
        }
        if entries.len() != header.entries {
            return Err(fmt_err(1, format!("header lists {} entries, found {}", header.entries, entries.len())));
        }
        Ok(Self::from_entries(header.domain, entries))
    }
}

/// True iff the source term occurs case-insensitively in `source_text` and
/// the target term in `target_text`.
pub fn filter_pair(pair: &TermPair, source_text: &str, target_text: &str) -> bool {
    contains_ci(source_text, &pair.src_term) && contains_ci(target_text, &pair.tgt_term)
}

pub fn build_extraction_prompt(
    lib: &PromptLibrary,
    batch: &[BitextPair],
    exemplars: &ExtractionExemplars,
) -> Result<RenderedPrompt, TermError> {
    if batch.is_empty() {
        return Err(TermError::EmptyBatch);
    }
    if batch.len() > MAX_EXTRACTION_BATCH {
        return Err(TermError::OversizeBatch(batch.len()));
    }
    let slots = BTreeMap::from([
        (
            "source_examples".to_string(),
            numbered_lines("source", exemplars.sources.iter().map(String::as_str)),
        ),
        (
            "target_examples".to_string(),
            numbered_lines("target", exemplars.targets.iter().map(String::as_str)),
        ),
        (
            "term_examples".to_string(),
            numbered_lines("terminology", exemplars.terminology.iter().map(String::as_str)),
        ),
        (
            "source_texts".to_string(),
            numbered_lines("source", batch.iter().map(|p| p.src.as_str())),
        ),
        (
            "target_texts".to_string(),
            numbered_lines("target", batch.iter().map(|p| p.tgt.as_str())),
        ),
    ]);
    Ok(lib.render(TemplateId::TermExtract, &slots)?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionParse {
    /// One list per batch position; `origin_pair_id` is left empty.
    pub slots: Vec<Vec<TermPair>>,
    pub warnings: Vec<String>,
}

/// `label N: rest`, with the label matched case-insensitively.
fn labelled_line(line: &str) -> Option<(String, usize, &str)> {
    let t = line.trim_start();
    let word_end = t.find(|c: char| !c.is_alphabetic())?;
    let label = t[..word_end].to_lowercase();
    let rest = t[word_end..].trim_start();
    let digits_end = rest.find(|c: char| !c.is_ascii_digit())?;
    let n: usize = rest[..digits_end].parse().ok()?;
    let rest = rest[digits_end..].trim_start().strip_prefix(':')?;
    Some((label, n, rest.trim()))
}

fn terms_from_json(text: &str) -> Result<(Vec<TermPair>, usize), String> {
    let (value, _) = parse_lenient(text).map_err(|e| e.message)?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        obj @ serde_json::Value::Object(_) => vec![obj],
        other => return Err(format!("expected a JSON array, got {other}")),
    };
    let mut out = Vec::new();
    let mut skipped = 0;
    for item in items {
        let src = item.get("de").and_then(|v| v.as_str());
        let tgts: Vec<&str> = match item.get("en") {
            Some(serde_json::Value::String(s)) => vec![s.as_str()],
            Some(serde_json::Value::Array(a)) => a.iter().filter_map(|v| v.as_str()).collect(),
            _ => Vec::new(),
        };
        match src {
            Some(src) if !tgts.is_empty() => {
                let before = out.len();
                out.extend(tgts.iter().filter_map(|t| TermPair::new(src, t, "")));
                if out.len() == before {
                    skipped += 1;
                }
            }
            _ => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Parses `terminology i: [...]` lines into `batch_size` slots. Missing or
/// unparseable slots come back empty with a warning; nothing aborts.
pub fn parse_extraction_output(raw: &str, batch_size: usize) -> ExtractionParse {
    let mut bodies: BTreeMap<usize, String> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with("```") || trimmed.starts_with("---") {
            current = None;
            continue;
        }
        match labelled_line(trimmed) {
            Some((label, n, rest)) if label == "terminology" => {
                if let std::collections::btree_map::Entry::Vacant(e) = bodies.entry(n) {
                    e.insert(rest.to_string());
                    current = Some(n);
                } else {
                    warnings.push(format!("terminology {n}: repeated line ignored"));
                    current = None;
                }
            }
            Some(_) => current = None,
            None => {
                if let Some(n) = current {
                    let b = bodies.get_mut(&n).expect("current slot exists");
                    b.push(' ');
                    b.push_str(trimmed);
                }
            }
        }
    }
    let mut slots = vec![Vec::new(); batch_size];
    for n in bodies.keys() {
        if *n == 0 || *n > batch_size {
            warnings.push(format!("terminology {n}: outside batch of {batch_size}, ignored"));
        }
    }
    for (i, slot) in slots.iter_mut().enumerate() {
        let n = i + 1;
        let Some(body) = bodies.get(&n) else {
            warnings.push(format!("terminology {n}: missing"));
            continue;
        };
        match terms_from_json(body) {
            Ok((terms, skipped)) => {
                if skipped > 0 {
                    warnings.push(format!("terminology {n}: {skipped} malformed item(s) skipped"));
                }
                *slot = terms;
            }
            Err(e) => warnings.push(format!("terminology {n}: {e}")),
        }
    }
    ExtractionParse { slots, warnings }
}

/// Extraction result for one batch, after `filter_pair`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchExtraction {
    pub kept: Vec<TermPair>,
    pub extracted: usize,
    pub warnings: Vec<String>,
    pub raw: String,
}

pub fn extract_batch(
    lib: &PromptLibrary,
    llm: &StagedLlm,
    batch: &[BitextPair],
    exemplars: &ExtractionExemplars,
) -> Result<BatchExtraction, TermError> {
    let prompt = build_extraction_prompt(lib, batch, exemplars)?;
    let resp = llm.complete(&prompt, Stage::Extraction)?;
    let parsed = parse_extraction_output(&resp.text, batch.len());
    let mut kept = Vec::new();
    let mut extracted = 0;
    for (pair, slot) in batch.iter().zip(parsed.slots) {
        extracted += slot.len();
        for mut t in slot {
            if filter_pair(&t, &pair.src, &pair.tgt) {
                t.origin_pair_id = pair.id.clone();
                kept.push(t);
            }
        }
    }
    Ok(BatchExtraction {
        kept,
        extracted,
        warnings: parsed.warnings,
        raw: resp.text,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedBatch {
    pub batch_index: usize,
    pub pair_ids: Vec<String>,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct InductionOutcome {
    pub dictionary: GlobalDictionary,
    pub counts: TermCounts,
    pub failed: Vec<FailedBatch>,
    pub warnings: Vec<String>,
    pub extracted: usize,
    pub kept: usize,
}

impl InductionOutcome {
    /// JSON list of failed batches, for persisting next to the dictionary.
    pub fn failure_manifest(&self) -> String {
        serde_json::to_string_pretty(&self.failed).expect("manifest serializes")
    }
}

/// Extracts batches of five concurrently and aggregates the filtered term
/// pairs. Batch failures are collected, not propagated.
pub fn induce_dictionary(
    lib: &PromptLibrary,
    llm: &StagedLlm,
    domain: Domain,
    pairs: &[BitextPair],
    exemplars: &ExtractionExemplars,
) -> InductionOutcome {
    let batches: Vec<&[BitextPair]> = iter_batches(pairs, MAX_EXTRACTION_BATCH)
        .expect("batch size is positive")
        .collect();
    let results: Vec<Result<BatchExtraction, TermError>> = batches
        .par_iter()
        .map(|b| extract_batch(lib, llm, b, exemplars))
        .collect();
    let mut counts = TermCounts::default();
    let mut failed = Vec::new();
    let mut warnings = Vec::new();
    let (mut extracted, mut kept) = (0, 0);
    for (i, (batch, r)) in batches.iter().zip(results).enumerate() {
        match r {
            Ok(b) => {
                extracted += b.extracted;
                kept += b.kept.len();
                counts.merge(aggregate_counts(&b.kept));
                warnings.extend(b.warnings.into_iter().map(|w| format!("batch {i}: {w}")));
            }
            Err(e) => {
                log::warn!("extraction batch {i} failed: {e}");
                failed.push(FailedBatch {
                    batch_index: i,
                    pair_ids: batch.iter().map(|p| p.id.clone()).collect(),
                    error: e.to_string(),
                });
            }
        }
    }
    InductionOutcome {
        dictionary: counts.into_dictionary(domain, Some(USAGE_THRESHOLD)),
        counts,
        failed,
        warnings,
        extracted,
        kept,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exemplars::ExemplarSet;

    fn tp(s: &str, t: &str) -> TermPair {
        TermPair::new(s, t, "p").unwrap()
    }

    fn koran_batch(n: usize) -> Vec<BitextPair> {
        let ex = ExemplarSet::builtin();
        let ex = ex.term_extract(&Domain::Koran).unwrap();
        (0..n)
            .map(|i| {
                BitextPair::new(
                    format!("k{i}"),
                    ex.sources[i % 5].clone(),
                    ex.targets[i % 5].clone(),
                    Domain::Koran,
                )
            })
            .collect()
    }

    #[test]
    fn extraction_prompt_batch_bounds() {
        let lib = PromptLibrary::builtin();
        let set = ExemplarSet::builtin();
        let ex = set.term_extract(&Domain::Koran).unwrap();
        let p = build_extraction_prompt(&lib, &koran_batch(5), ex).unwrap();
        // five exemplar lines plus five batch lines per block
        assert_eq!(p.text().lines().filter(|l| l.starts_with("source ")).count(), 10);
        assert_eq!(p.text().lines().filter(|l| l.starts_with("target ")).count(), 10);
        let one = build_extraction_prompt(&lib, &koran_batch(1), ex).unwrap();
        assert_eq!(one.text().lines().filter(|l| l.starts_with("source ")).count(), 6);
        assert!(matches!(
            build_extraction_prompt(&lib, &koran_batch(6), ex),
            Err(TermError::OversizeBatch(6))
        ));
    }

    #[test]
    fn parses_exemplar_line() {
        let out = parse_extraction_output(
            r#"terminology 1: [{"en": "Book", "de": "Schrift"}, {"en": "guidance", "de": "Rechtleitung"}, {"en": "Moses", "de": "Musa"}]"#,
            1,
        );
        assert!(out.warnings.is_empty());
        assert_eq!(out.slots[0].len(), 3);
        assert_eq!(out.slots[0][0].src_term, "schrift");
        assert_eq!(out.slots[0][0].tgt_term, "Book");
    }

    #[test]
    fn empty_output_warns_per_slot() {
        let out = parse_extraction_output("", 5);
        assert_eq!(out.slots.len(), 5);
        assert!(out.slots.iter().all(Vec::is_empty));
        assert_eq!(out.warnings.len(), 5);
    }

    #[test]
    fn missing_slot_is_isolated() {
        let raw = (1..=5)
            .filter(|i| *i != 3)
            .map(|i| format!("terminology {i}: [{{\"en\": \"x{i}\", \"de\": \"y{i}\"}}]"))
            .collect::<Vec<_>>()
            .join("\n");
        let out = parse_extraction_output(&raw, 5);
        assert!(out.slots[2].is_empty());
        assert_eq!(out.slots.iter().filter(|s| s.len() == 1).count(), 4);
        assert_eq!(out.warnings, vec!["terminology 3: missing".to_string()]);
    }

    #[test]
    fn missing_comma_and_wrapped_lines_are_repaired() {
        let raw = "terminology 1: [{\"en\": \"His apostles\", \"de\": \"Seine Gesandten\"} {\"en\": \"their light\",\n\"de\": \"ihr Licht\"}]\nterminology 2: not json";
        let out = parse_extraction_output(raw, 2);
        assert_eq!(out.slots[0].len(), 2);
        assert_eq!(out.slots[0][1].src_term, "ihr licht");
        assert!(out.slots[1].is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn filter_pair_cases() {
        let src = "Die Kommission unterrichtete den Antragsteller.";
        let tgt = "The Commission informed the complainant.";
        assert!(filter_pair(&tp("kommission", "commission"), src, tgt));
        assert!(!filter_pair(&tp("richtlinie", "commission"), src, tgt));
        assert!(filter_pair(&tp("antragsteller", "COMPLAINANT"), src, tgt));
    }

    #[test]
    fn aggregate_threshold_is_strict() {
        let mut pairs = Vec::new();
        pairs.extend(std::iter::repeat_n(tp("richtlinie", "directive"), 90));
        pairs.extend(std::iter::repeat_n(tp("richtlinie", "guideline"), 9));
        pairs.push(tp("richtlinie", "policy"));
        let d = aggregate(Domain::Law, &pairs);
        assert_eq!(d.get("richtlinie").unwrap().targets(), vec!["directive"]);

        let mut pairs = Vec::new();
        pairs.extend(std::iter::repeat_n(tp("richtlinie", "directive"), 8));
        pairs.extend(std::iter::repeat_n(tp("richtlinie", "guideline"), 2));
        let d = aggregate(Domain::Law, &pairs);
        let e = d.get("richtlinie").unwrap();
        assert_eq!(e.targets(), vec!["directive", "guideline"]);
        assert!((e.candidates[1].usage - 0.2).abs() < 1e-12);

        // exactly 10% is dropped
        let mut pairs = vec![tp("a", "y")];
        pairs.extend(std::iter::repeat_n(tp("a", "x"), 9));
        assert_eq!(aggregate(Domain::Law, &pairs).get("a").unwrap().targets(), vec!["x"]);

        let d = aggregate(Domain::Law, &[tp("a", "x")]);
        assert_eq!(d.get("a").unwrap().candidates[0].usage, 1.0);
    }

    fn law_dict() -> GlobalDictionary {
        aggregate(
            Domain::Law,
            &[
                tp("richtlinie", "directive"),
                tp("richtlinie", "guideline"),
                tp("einführer", "importers"),
                tp("verwender", "users"),
                tp("einleitung des verfahrens", "initiation of the proceeding"),
                tp("verfahrens", "procedure"),
            ],
        )
    }

    #[test]
    fn lookup_orders_by_position() {
        let d = law_dict();
        let hits = d.lookup("Die Richtlinie gilt.", LookupOptions::default());
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry.to_record().tgts, vec!["directive", "guideline"]);
        let text = "Verwender und Einführer";
        let hits = d.lookup(text, LookupOptions::default());
        let names: Vec<_> = hits.iter().map(|h| h.entry.src_term.as_str()).collect();
        assert_eq!(names, ["verwender", "einführer"]);
        assert_eq!(&text[hits[1].start..hits[1].end], "Einführer");
        assert!(GlobalDictionary::empty(Domain::Law).lookup(text, LookupOptions::default()).is_empty());
    }

    #[test]
    fn lookup_reports_nested_matches_longest_first() {
        let d = law_dict();
        let text = "nach Einleitung des Verfahrens";
        let names: Vec<_> = d
            .lookup(text, LookupOptions::default())
            .iter()
            .map(|h| h.entry.src_term.clone())
            .collect();
        assert_eq!(names, ["einleitung des verfahrens", "verfahrens"]);
    }

    #[test]
    fn token_boundary_mode() {
        let d = aggregate(Domain::Law, &[tp("richtlinie", "directive")]);
        let text = "die Richtlinienvorschläge";
        assert_eq!(d.lookup(text, LookupOptions::default()).len(), 1);
        assert!(d.lookup(text, LookupOptions { token_boundaries: true }).is_empty());
    }

    #[test]
    fn dictionary_round_trip() {
        let mut pairs = vec![tp("a", "y")];
        pairs.extend(std::iter::repeat_n(tp("a", "x"), 3));
        pairs.push(tp("b", "z"));
        let d = aggregate(Domain::Law, &pairs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        d.save(&path).unwrap();
        let back = GlobalDictionary::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        let a = back.get("a").unwrap();
        assert_eq!(a.targets(), vec!["x", "y"]);
        assert!((a.candidates[0].usage - 0.75).abs() < 1e-12);
        let first = fs::read_to_string(&path).unwrap();
        assert!(first.starts_with(r#"{"format":"domt-terminology","version":1,"domain":"law""#));
    }
}
