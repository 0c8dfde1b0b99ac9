//! Okapi BM25 retrieval over the source side of a bitext datastore.
//!
//! Scoring for a query `q` against document `d`:
//!
//! ```text
//! score(d, q) = Σ_{t ∈ distinct(q)} idf(t) · tf(t,d)·(k1+1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = max(0, ln((N − df(t) + 0.5) / (df(t) + 0.5)))
//! ```
//!
//! Query terms are deduplicated, keeping first-occurrence order, and the
//! per-term contributions are summed in that order. Results are ranked by
//! descending score, ties by ascending document number (corpus order).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{BitextPair, DomainCorpus, Split};

pub const DEFAULT_K1: f64 = 1.5;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_K: usize = 3;

const INDEX_FORMAT: &str = "domt-bm25";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index file {path}:{line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Lowercased tokens of a text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    pub tokens: Vec<String>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// NFC-normalizes and lowercases `text`, then splits it into maximal runs of
/// alphanumeric characters. Whitespace, punctuation and symbols all act as
/// separators and never appear in tokens.
pub fn tokenize(text: &str) -> TokenStream {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    let tokens = normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    TokenStream { tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub pair: BitextPair,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<BitextPair>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: HashMap<String, Vec<Posting>>,
}

pub fn bm25_idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

pub fn bm25_term_weight(idf: f64, tf: f64, doc_len: f64, avg_len: f64, p: Bm25Params) -> f64 {
    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * doc_len / avg_len))
}

/// Deduplicates query tokens, keeping first-occurrence order.
pub fn distinct_terms(tokens: &TokenStream) -> Vec<&str> {
    let mut seen = std::collections::HashSet::new();
    tokens
        .tokens
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

impl Bm25Index {
    pub fn build(corpus: &DomainCorpus, params: Bm25Params) -> Result<Self, RetrievalError> {
        Self::from_pairs(corpus.pairs().to_vec(), params)
    }

    pub fn from_pairs(docs: Vec<BitextPair>, params: Bm25Params) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let token_streams: Vec<TokenStream> = docs.par_iter().map(|d| tokenize(&d.src)).collect();
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (doc, stream) in token_streams.iter().enumerate() {
            doc_lengths.push(stream.len() as u32);
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in &stream.tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push(Posting {
                    doc: doc as u32,
                    tf: n,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(Self {
            params,
            docs,
            doc_lengths,
            avg_doc_length,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc: usize) -> u32 {
        self.doc_lengths[doc]
    }

    pub fn doc(&self, doc: usize) -> &BitextPair {
        &self.docs[doc]
    }

    pub fn docs(&self) -> &[BitextPair] {
        &self.docs
    }

    pub fn postings(&self, token: &str) -> &[Posting] {
        self.postings.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    /// Scores every document touched by the query. Untouched documents
    /// score zero and are absent from the returned list.
    pub fn score_all(&self, text: &str) -> Vec<(u32, f64)> {
        let tokens = tokenize(text);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        let n = self.docs.len();
        for term in distinct_terms(&tokens) {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = bm25_idf(n, list.len());
            if idf == 0.0 {
                continue;
            }
            for p in list {
                let w = bm25_term_weight(
                    idf,
                    f64::from(p.tf),
                    f64::from(self.doc_lengths[p.doc as usize]),
                    self.avg_doc_length,
                    self.params,
                );
                *acc.entry(p.doc).or_insert(0.0) += w;
            }
        }
        acc.into_iter().filter(|(_, s)| *s > 0.0).collect()
    }

    pub fn query(&self, text: &str, k: usize) -> Result<Vec<RetrievalResult>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        Ok(self
            .top_k(text, k)
            .into_iter()
            .enumerate()
            .map(|(i, (doc, score))| RetrievalResult {
                pair: self.docs[doc as usize].clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    fn top_k(&self, text: &str, k: usize) -> Vec<(u32, f64)> {
        let mut scored = self.score_all(text);
        let by_rank = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        scored
    }

    /// Union of the top-`k` pair ids over all queries.
    pub fn relevant_subset<S: AsRef<str> + Sync>(
        &self,
        queries: &[S],
        k: usize,
    ) -> Result<BTreeSet<String>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let docs: Vec<Vec<u32>> = queries
            .par_iter()
            .map(|q| self.top_k(q.as_ref(), k).into_iter().map(|(d, _)| d).collect())
            .collect();
        Ok(docs
            .into_iter()
            .flatten()
            .map(|d| self.docs[d as usize].id.clone())
            .collect())
    }

    /// Rebuilds the datastore corpus held by the index.
    pub fn to_corpus(&self) -> DomainCorpus {
        let domain = self.docs[0].domain.clone();
        DomainCorpus::from_pairs(domain, Split::Train, self.docs.clone())
            .expect("indexed docs form a valid corpus")
            .0
    }

    /// Writes the index as a JSONL posting dump:
    ///
    /// 1. header `{"format":"domt-bm25","version":1,"k1":..,"b":..,"doc_count":..,"avg_doc_length":..,"terms":..}`
    /// 2. one `{"doc":n,"len":l,"pair":{..}}` line per document, in doc order
    /// 3. one `{"term":t,"postings":[[doc,tf],..]}` line per term, sorted by term
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
        let header = IndexHeader {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            k1: self.params.k1,
            b: self.params.b,
            doc_count: self.docs.len(),
            avg_doc_length: self.avg_doc_length,
            terms: self.postings.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
        for (doc, pair) in self.docs.iter().enumerate() {
            let line = DocLine {
                doc: doc as u32,
                len: self.doc_lengths[doc],
                pair: pair.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&line).unwrap()).map_err(io)?;
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        for term in terms {
            let list: Vec<(u32, u32)> = self.postings[term].iter().map(|p| (p.doc, p.tf)).collect();
            let line = serde_json::json!({ "term": term, "postings": list });
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file = fs::File::open(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |line: usize, reason: String| RetrievalError::Format {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let next_line = |lines: &mut std::iter::Enumerate<std::io::Lines<BufReader<fs::File>>>| {
            lines.next().map(|(i, l)| {
                l.map(|l| (i + 1, l)).map_err(|source| RetrievalError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            })
        };

        let (n, header_line) = next_line(&mut lines).ok_or_else(|| bad(1, "missing header".into()))??;
        let header: IndexHeader =
            serde_json::from_str(&header_line).map_err(|e| bad(n, e.to_string()))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(bad(
                n,
                format!("unsupported index format {} v{}", header.format, header.version),
            ));
        }
        let mut docs = Vec::with_capacity(header.doc_count);
        let mut doc_lengths = Vec::with_capacity(header.doc_count);
        for expected in 0..header.doc_count {
            let (n, line) = next_line(&mut lines).ok_or_else(|| bad(0, "truncated document table".into()))??;
            let d: DocLine = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
            if d.doc as usize != expected {
                return Err(bad(n, format!("expected doc {expected}, found {}", d.doc)));
            }
            docs.push(d.pair);
            doc_lengths.push(d.len);
        }
        let mut postings = HashMap::with_capacity(header.terms);
        while let Some(item) = next_line(&mut lines) {
            let (n, line) = item?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TermLine = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
            let list = t
                .postings
                .into_iter()
                .map(|(doc, tf)| {
                    if doc as usize >= docs.len() {
                        Err(bad(n, format!("posting for unknown doc {doc}")))
                    } else {
                        Ok(Posting { doc, tf })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            postings.insert(t.term, list);
        }
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        Ok(Self {
            params: Bm25Params {
                k1: header.k1,
                b: header.b,
            },
            docs,
            doc_lengths,
            avg_doc_length: header.avg_doc_length,
            postings,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    k1: f64,
    b: f64,
    doc_count: usize,
    avg_doc_length: f64,
    terms: usize,
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    doc: u32,
    len: u32,
    pair: BitextPair,
}

#[derive(Deserialize)]
struct TermLine {
    term: String,
    postings: Vec<(u32, u32)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s).tokens
    }

    fn corpus(srcs: &[&str]) -> DomainCorpus {
        let pairs = srcs
            .iter()
            .enumerate()
            .map(|(i, s)| BitextPair::new(format!("d{i}"), *s, format!("t{i}"), Domain::Law));
        DomainCorpus::from_pairs(Domain::Law, Split::Train, pairs).unwrap().0
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(toks("Die Kommission, bitte!"), ["die", "kommission", "bitte"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("EDGE-II-Studien"), ["edge", "ii", "studien"]);
        assert_eq!(toks("Richtlinie 94/67/EG"), ["richtlinie", "94", "67", "eg"]);
        assert_eq!(toks("  ... !! "), Vec::<String>::new());
        assert_eq!(toks("GEFÄHRLICHER Abfälle"), ["gefährlicher", "abfälle"]);
    }

    #[test]
    fn single_doc_stats() {
        let idx = Bm25Index::build(&corpus(&["eins zwei drei"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.doc_count(), 1);
        assert_eq!(idx.avg_doc_length(), 3.0);
    }

    #[test]
    fn common_word_posts_every_doc() {
        let idx = Bm25Index::build(&corpus(&["der hund", "der baum", "der see"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.postings("der").len(), idx.doc_count());
    }

    #[test]
    fn no_shared_token_gives_no_results() {
        let idx = Bm25Index::build(&corpus(&["a b", "c d", "e f"]), Bm25Params::default()).unwrap();
        assert!(idx.query("x y z", 3).unwrap().is_empty());
    }

    #[test]
    fn k_larger_than_corpus_returns_nonzero_docs() {
        let idx = Bm25Index::build(
            &corpus(&["apfel birne", "kirsche", "pflaume", "traube", "banane"]),
            Bm25Params::default(),
        )
        .unwrap();
        let res = idx.query("apfel kirsche", 50).unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].rank, 1);
        assert!(res[0].score >= res[1].score);
    }

    #[test]
    fn zero_k_rejected() {
        let idx = Bm25Index::build(&corpus(&["a"]), Bm25Params::default()).unwrap();
        assert!(matches!(idx.query("a", 0), Err(RetrievalError::ZeroK)));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            Bm25Index::from_pairs(Vec::new(), Bm25Params::default()),
            Err(RetrievalError::EmptyCorpus)
        ));
    }

    #[test]
    fn equal_scores_break_ties_by_doc_order() {
        let idx = Bm25Index::build(
            &corpus(&["x q", "y q", "x q", "z", "w", "v"]),
            Bm25Params::default(),
        )
        .unwrap();
        let res = idx.query("x", 3).unwrap();
        let ids: Vec<_> = res.iter().map(|r| r.pair.id.as_str()).collect();
        assert_eq!(ids, ["d0", "d2"]);
    }

    #[test]
    fn relevant_subset_basics() {
        let idx = Bm25Index::build(
            &corpus(&["apfel", "birne", "kirsche", "pflaume", "traube"]),
            Bm25Params::default(),
        )
        .unwrap();
        let empty: [&str; 0] = [];
        assert!(idx.relevant_subset(&empty, 3).unwrap().is_empty());
        let single = idx.relevant_subset(&["apfel birne"], 3).unwrap();
        let direct: BTreeSet<String> = idx
            .query("apfel birne", 3)
            .unwrap()
            .into_iter()
            .map(|r| r.pair.id)
            .collect();
        assert_eq!(single, direct);
    }

    #[test]
    fn save_load_round_trip() {
        let idx = Bm25Index::build(
            &corpus(&["Die Kommission", "der Antragsteller", "die Einleitung des Verfahrens"]),
            Bm25Params { k1: 1.2, b: 0.5 },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        idx.save(&path).unwrap();
        let back = Bm25Index::load(&path).unwrap();
        assert_eq!(back.params(), idx.params());
        assert_eq!(back.docs(), idx.docs());
        assert_eq!(back.avg_doc_length(), idx.avg_doc_length());
        let mut a = back.postings.clone().into_iter().collect::<Vec<_>>();
        let mut b = idx.postings.clone().into_iter().collect::<Vec<_>>();
        a.sort_by(|x, y| x.0.cmp(&y.0));
        b.sort_by(|x, y| x.0.cmp(&y.0));
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.jsonl");
        fs::write(&path, "{\"format\":\"x\",\"version\":1,\"k1\":1,\"b\":1,\"doc_count\":0,\"avg_doc_length\":0,\"terms\":0}\n").unwrap();
        assert!(matches!(Bm25Index::load(&path), Err(RetrievalError::Format { .. })));
    }
}
