//! Bitext corpora: loading, validation, deduplication and batching.
//!
//! The canonical on-disk format is line-delimited JSON with one
//! `{"id", "src", "tgt", "domain"}` object per line. TSV and paired
//! plain-text files are converted on load. All text is NFC-normalized.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::nfc;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("empty corpus")]
    Empty,
    #[error("duplicate pair id {0:?}")]
    DuplicateId(String),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("unknown corpus format {0:?}")]
    UnknownFormat(String),
}

/// Domain tag. The three named domains are the ones the built-in exemplars
/// cover; anything else is carried as a free-form tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Law,
    Medical,
    Koran,
    Other(String),
}

impl Domain {
    pub fn as_str(&self) -> &str {
        match self {
            Domain::Law => "law",
            Domain::Medical => "medical",
            Domain::Koran => "koran",
            Domain::Other(s) => s,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&str> for Domain {
    fn from(s: &str) -> Self {
        match s.trim().to_lowercase().as_str() {
            "law" => Domain::Law,
            "medical" | "med" => Domain::Medical,
            "koran" => Domain::Koran,
            other => Domain::Other(other.to_string()),
        }
    }
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Domain::from(s.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One source/target sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitextPair {
    pub id: String,
    pub src: String,
    pub tgt: String,
    pub domain: Domain,
}

impl BitextPair {
    pub fn new(
        id: impl Into<String>,
        src: impl Into<String>,
        tgt: impl Into<String>,
        domain: Domain,
    ) -> Self {
        Self {
            id: id.into(),
            src: src.into(),
            tgt: tgt.into(),
            domain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
    /// Two line-aligned files, `<stem>.de` / `<stem>.en` style. The path given
    /// to [`load_corpus`] is the source file; the target file is found by
    /// swapping the source extension for the target one.
    ParallelText,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            "parallel-text" | "parallel" | "text" => Ok(CorpusFormat::ParallelText),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl CorpusFormat {
    pub fn guess(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => CorpusFormat::Tsv,
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::ParallelText,
        }
    }
}

/// Lines skipped or collapsed while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub read: usize,
    pub kept: usize,
    pub duplicates: usize,
    /// Line numbers (1-based) of records with an empty side after trimming.
    pub invalid_lines: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCorpus {
    pub domain: Domain,
    pub split: Split,
    pairs: Vec<BitextPair>,
}

impl DomainCorpus {
    /// Builds a corpus from in-memory pairs, applying the same validation,
    /// normalization and deduplication as [`load_corpus`].
    pub fn from_pairs(
        domain: Domain,
        split: Split,
        pairs: impl IntoIterator<Item = BitextPair>,
    ) -> Result<(Self, LoadReport), CorpusError> {
        let mut report = LoadReport::default();
        let mut seen_ids = HashSet::new();
        let mut seen_text = HashSet::new();
        let mut kept = Vec::new();
        for (i, mut pair) in pairs.into_iter().enumerate() {
            report.read += 1;
            pair.src = nfc(pair.src.trim());
            pair.tgt = nfc(pair.tgt.trim());
            if pair.src.is_empty() || pair.tgt.is_empty() {
                report.invalid_lines.push(i + 1);
                continue;
            }
            if !seen_text.insert((pair.src.clone(), pair.tgt.clone())) {
                report.duplicates += 1;
                continue;
            }
            if !seen_ids.insert(pair.id.clone()) {
                return Err(CorpusError::DuplicateId(pair.id));
            }
            pair.domain = domain.clone();
            kept.push(pair);
        }
        if kept.is_empty() {
            return Err(CorpusError::Empty);
        }
        report.kept = kept.len();
        Ok((
            Self {
                domain,
                split,
                pairs: kept,
            },
            report,
        ))
    }

    pub fn pairs(&self) -> &[BitextPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BitextPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// Keeps only the first `n` pairs.
    pub fn truncate(&mut self, n: usize) {
        self.pairs.truncate(n.max(1));
    }

    /// Restricts the corpus to the pairs whose id is in `ids`, preserving order.
    pub fn retain_ids(&self, ids: &HashSet<String>) -> Vec<BitextPair> {
        self.pairs
            .iter()
            .filter(|p| ids.contains(&p.id))
            .cloned()
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::create(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        for pair in &self.pairs {
            let line = serde_json::to_string(pair).expect("pair serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: Option<String>,
    src: String,
    tgt: String,
    domain: Option<String>,
}

/// Loads and validates a corpus. The domain is taken from the records when
/// present (JSONL) and otherwise from `default_domain`.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    split: Split,
    default_domain: Option<Domain>,
) -> Result<(DomainCorpus, LoadReport), CorpusError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| CorpusError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let malformed = |line: usize, reason: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let content = read(path)?;
    let mut pairs = Vec::new();
    let mut domain = default_domain;

    match format {
        CorpusFormat::Jsonl => {
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord =
                    serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
                let rec_domain = rec.domain.as_deref().map(Domain::from);
                match (&domain, rec_domain) {
                    (None, Some(d)) => domain = Some(d),
                    (Some(have), Some(d)) if *have != d => {
                        return Err(malformed(
                            i + 1,
                            format!("domain {d} differs from corpus domain {have}"),
                        ))
                    }
                    _ => {}
                }
                let id = rec.id.unwrap_or_else(|| format!("{}", i + 1));
                pairs.push(BitextPair::new(id, rec.src, rec.tgt, Domain::Law));
            }
        }
        CorpusFormat::Tsv => {
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                let (id, src, tgt) = match fields.as_slice() {
                    [src, tgt] => (format!("{}", i + 1), *src, *tgt),
                    [id, src, tgt] => (id.to_string(), *src, *tgt),
                    _ => {
                        return Err(malformed(
                            i + 1,
                            format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
                        ))
                    }
                };
                pairs.push(BitextPair::new(id, src, tgt, Domain::Law));
            }
        }
        CorpusFormat::ParallelText => {
            let tgt_path = parallel_target_path(path);
            let tgt_content = read(&tgt_path)?;
            let src_lines: Vec<&str> = content.lines().collect();
            let tgt_lines: Vec<&str> = tgt_content.lines().collect();
            if src_lines.len() != tgt_lines.len() {
                return Err(malformed(
                    src_lines.len().min(tgt_lines.len()) + 1,
                    format!(
                        "line count mismatch: {} source vs {} target lines in {}",
                        src_lines.len(),
                        tgt_lines.len(),
                        tgt_path.display()
                    ),
                ));
            }
            for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
                pairs.push(BitextPair::new(format!("{}", i + 1), *s, *t, Domain::Law));
            }
        }
    }

    let domain = domain.unwrap_or_else(|| domain_from_path(path));
    DomainCorpus::from_pairs(domain, split, pairs)
}

fn parallel_target_path(src: &Path) -> PathBuf {
    match src.extension().and_then(|e| e.to_str()) {
        Some("de") => src.with_extension("en"),
        Some("src") => src.with_extension("tgt"),
        _ => {
            let mut p = src.as_os_str().to_owned();
            p.push(".tgt");
            PathBuf::from(p)
        }
    }
}

/// Guesses a domain from a path component (`.../law/train.jsonl`).
pub fn domain_from_path(path: &Path) -> Domain {
    for comp in path.iter().rev() {
        let s = comp.to_string_lossy().to_lowercase();
        for (needle, d) in [
            ("koran", Domain::Koran),
            ("medical", Domain::Medical),
            ("law", Domain::Law),
        ] {
            if s.contains(needle) {
                return d;
            }
        }
    }
    Domain::Other("unknown".to_string())
}

/// Splits `pairs` into consecutive chunks of `n`; the last chunk may be shorter.
pub fn iter_batches(
    pairs: &[BitextPair],
    n: usize,
) -> Result<std::slice::Chunks<'_, BitextPair>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::ZeroBatch);
    }
    Ok(pairs.chunks(n))
}
