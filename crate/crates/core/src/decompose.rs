//! Splits retrieved demonstrations into terminology and style: a local
//! terminology extracted from the k demonstrations, and the demonstrations
//! themselves with those terms masked out.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BitextPair;
use crate::exemplars::{ExtractionExemplars, TermRecord};
use crate::llm::StagedLlm;
use crate::prompting::PromptLibrary;
use crate::retrieval::{tokenize, Bm25Index, RetrievalError};
use crate::terminology::{aggregate_counts, extract_batch, TermError, MAX_EXTRACTION_BATCH};
use crate::text::{aligned_to_tokens, char_offset, Folded};

pub const MASK_TOKEN: &str = "<MASK>";

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("no demonstrations to decompose")]
    NoDemos,
    #[error("{0} demonstrations exceed one extraction batch of {MAX_EXTRACTION_BATCH}")]
    TooManyDemos(usize),
    #[error(transparent)]
    Terms(#[from] TermError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("mask token expected at char {0} of the masked {1} side")]
    Unmask(usize, Side),
}

/// Terms licensed by one instance's demonstrations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalTerminology {
    pub source_id: String,
    /// Lowercased source term to candidate targets, most frequent first.
    pub entries: BTreeMap<String, Vec<String>>,
}

impl LocalTerminology {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> Vec<TermRecord> {
        self.entries
            .iter()
            .map(|(s, t)| TermRecord {
                src: s.clone(),
                tgts: t.clone(),
            })
            .collect()
    }

    pub fn target_terms(&self) -> impl Iterator<Item = &str> {
        self.entries.values().flatten().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Src,
    Tgt,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Src => "source",
            Side::Tgt => "target",
        })
    }
}

/// A masked span in char offsets of the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSpan {
    pub side: Side,
    pub start: usize,
    pub end: usize,
    pub original: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTemplate {
    pub pair_id: String,
    pub src_masked: String,
    pub tgt_masked: String,
    pub mask_token: String,
    /// Source spans first, each side in text order.
    pub masked_spans: Vec<MaskedSpan>,
}

impl StyleTemplate {
    pub fn spans(&self, side: Side) -> impl Iterator<Item = &MaskedSpan> {
        self.masked_spans.iter().filter(move |s| s.side == side)
    }

    pub fn masked(&self, side: Side) -> &str {
        match side {
            Side::Src => &self.src_masked,
            Side::Tgt => &self.tgt_masked,
        }
    }
}

/// Chooses non-overlapping, token-aligned occurrences of `terms`, longest
/// first. Returns byte spans of `text` in text order.
fn choose_spans<'a>(text: &str, terms: impl IntoIterator<Item = &'a str>) -> Vec<(usize, usize)> {
    let folded = Folded::new(text);
    let mut found: Vec<(usize, usize)> = terms
        .into_iter()
        .flat_map(|t| folded.find_all(t.trim()))
        .filter(|&(s, e)| aligned_to_tokens(text, s, e))
        .collect();
    found.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    found.dedup();
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for (s, e) in found {
        if chosen.iter().all(|&(cs, ce)| e <= cs || s >= ce) {
            chosen.push((s, e));
        }
    }
    chosen.sort();
    chosen
}

fn apply_masks(text: &str, spans: &[(usize, usize)], side: Side, out_spans: &mut Vec<MaskedSpan>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for &(s, e) in spans {
        out.push_str(&text[last..s]);
        out.push_str(MASK_TOKEN);
        out_spans.push(MaskedSpan {
            side,
            start: char_offset(text, s),
            end: char_offset(text, e),
            original: text[s..e].to_string(),
        });
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

/// Masks every token-aligned, case-insensitive occurrence of the local
/// source terms in the source and of their licensed targets in the target.
pub fn mask_terms(pair: &BitextPair, terms: &LocalTerminology) -> StyleTemplate {
    let mut spans = Vec::new();
    let src_spans = choose_spans(&pair.src, terms.entries.keys().map(String::as_str));
    let tgt_spans = choose_spans(&pair.tgt, terms.target_terms());
    let src_masked = apply_masks(&pair.src, &src_spans, Side::Src, &mut spans);
    let tgt_masked = apply_masks(&pair.tgt, &tgt_spans, Side::Tgt, &mut spans);
    StyleTemplate {
        pair_id: pair.id.clone(),
        src_masked,
        tgt_masked,
        mask_token: MASK_TOKEN.to_string(),
        masked_spans: spans,
    }
}

fn unmask_side(t: &StyleTemplate, side: Side) -> Result<String, DecomposeError> {
    let masked: Vec<char> = t.masked(side).chars().collect();
    let mask: Vec<char> = t.mask_token.chars().collect();
    let mut out = String::new();
    let mut pos = 0; // in masked chars
    let mut orig_pos = 0; // in original chars
    for span in t.spans(side) {
        let gap = span.start - orig_pos;
        let at = pos + gap;
        if masked.get(at..at + mask.len()) != Some(&mask[..]) {
            return Err(DecomposeError::Unmask(at, side));
        }
        out.extend(&masked[pos..at]);
        out.push_str(&span.original);
        pos = at + mask.len();
        orig_pos = span.end;
    }
    out.extend(&masked[pos..]);
    Ok(out)
}

/// Rebuilds the original pair from the recorded spans.
pub fn unmask(t: &StyleTemplate) -> Result<(String, String), DecomposeError> {
    Ok((unmask_side(t, Side::Src)?, unmask_side(t, Side::Tgt)?))
}

/// Tokens outside masked spans and tokens inside them, for one side.
pub fn token_partition(original: &str, t: &StyleTemplate, side: Side) -> (Vec<String>, Vec<String>) {
    let chars: Vec<char> = original.chars().collect();
    let mut kept = Vec::new();
    let mut masked = Vec::new();
    let mut last = 0;
    for span in t.spans(side) {
        let before: String = chars[last..span.start].iter().collect();
        kept.extend(tokenize(&before).tokens);
        masked.extend(tokenize(&span.original).tokens);
        last = span.end;
    }
    let rest: String = chars[last..].iter().collect();
    kept.extend(tokenize(&rest).tokens);
    (kept, masked)
}

/// Local terminology from a single extraction batch over the demos, with
/// every licensed candidate kept (no usage threshold).
pub fn extract_local_terms(
    lib: &PromptLibrary,
    llm: &StagedLlm,
    source_id: &str,
    demos: &[BitextPair],
    exemplars: &ExtractionExemplars,
) -> Result<(LocalTerminology, Vec<String>), DecomposeError> {
    if demos.is_empty() {
        return Err(DecomposeError::NoDemos);
    }
    if demos.len() > MAX_EXTRACTION_BATCH {
        return Err(DecomposeError::TooManyDemos(demos.len()));
    }
    let batch = extract_batch(lib, llm, demos, exemplars)?;
    Ok((local_from_pairs(source_id, &batch.kept), batch.warnings))
}

pub fn local_from_pairs(source_id: &str, kept: &[crate::terminology::TermPair]) -> LocalTerminology {
    let counts = aggregate_counts(kept);
    LocalTerminology {
        source_id: source_id.to_string(),
        entries: counts.entries().map(|e| (e.src_term.clone(), e.targets())).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDecomposition {
    pub source_id: String,
    pub demo_ids: Vec<String>,
    pub local_terms: LocalTerminology,
    pub style_templates: Vec<StyleTemplate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default)]
pub struct DecompositionOutcome {
    pub instances: Vec<InstanceDecomposition>,
    /// (source id, error) for instances that could not be decomposed.
    pub failed: Vec<(String, String)>,
}

pub fn decompose_instance(
    lib: &PromptLibrary,
    llm: &StagedLlm,
    test: &BitextPair,
    demos: &[BitextPair],
    exemplars: &ExtractionExemplars,
) -> Result<InstanceDecomposition, DecomposeError> {
    let (local_terms, warnings) = extract_local_terms(lib, llm, &test.id, demos, exemplars)?;
    let style_templates = demos.iter().map(|d| mask_terms(d, &local_terms)).collect();
    Ok(InstanceDecomposition {
        source_id: test.id.clone(),
        demo_ids: demos.iter().map(|d| d.id.clone()).collect(),
        local_terms,
        style_templates,
        warnings,
    })
}

/// Retrieve k demos, extract local terms, mask each demo; per test
/// instance, in parallel. Failures are isolated per instance.
pub fn run_decomposition(
    lib: &PromptLibrary,
    llm: &StagedLlm,
    test: &[BitextPair],
    index: &Bm25Index,
    k: usize,
    exemplars: &ExtractionExemplars,
) -> DecompositionOutcome {
    let results: Vec<Result<InstanceDecomposition, DecomposeError>> = test
        .par_iter()
        .map(|t| {
            let demos: Vec<BitextPair> = index.query(&t.src, k)?.into_iter().map(|r| r.pair).collect();
            if demos.is_empty() {
                return Ok(InstanceDecomposition {
                    source_id: t.id.clone(),
                    demo_ids: Vec::new(),
                    local_terms: LocalTerminology {
                        source_id: t.id.clone(),
                        ..Default::default()
                    },
                    style_templates: Vec::new(),
                    warnings: vec!["no demonstrations retrieved".into()],
                });
            }
            decompose_instance(lib, llm, t, &demos, exemplars)
        })
        .collect();
    let mut out = DecompositionOutcome::default();
    for (t, r) in test.iter().zip(results) {
        match r {
            Ok(d) => out.instances.push(d),
            Err(e) => out.failed.push((t.id.clone(), e.to_string())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;

    fn pair(src: &str, tgt: &str) -> BitextPair {
        BitextPair::new("d1", src, tgt, Domain::Law)
    }

    fn local(entries: &[(&str, &[&str])]) -> LocalTerminology {
        LocalTerminology {
            source_id: "t".into(),
            entries: entries
                .iter()
                .map(|(s, t)| (s.to_string(), t.iter().map(|x| x.to_string()).collect()))
                .collect(),
        }
    }

    #[test]
    fn masks_both_sides() {
        let p = pair(
            "Die Kommission unterrichtete den Antragsteller",
            "The Commission informed the complainant",
        );
        let t = mask_terms(
            &p,
            &local(&[("kommission", &["commission"]), ("antragsteller", &["complainant"])]),
        );
        assert_eq!(t.src_masked, "Die <MASK> unterrichtete den <MASK>");
        assert_eq!(t.tgt_masked, "The <MASK> informed the <MASK>");
        assert_eq!(t.spans(Side::Src).count(), 2);
        assert_eq!(unmask(&t).unwrap(), (p.src.clone(), p.tgt.clone()));
    }

    #[test]
    fn empty_terminology_is_identity() {
        let p = pair("Ein Satz.", "A sentence.");
        let t = mask_terms(&p, &LocalTerminology::default());
        assert_eq!((t.src_masked.as_str(), t.tgt_masked.as_str()), ("Ein Satz.", "A sentence."));
        assert!(t.masked_spans.is_empty());
    }

    #[test]
    fn longest_term_wins() {
        let p = pair("nach Einleitung des Verfahrens", "after initiation of the proceeding");
        let t = mask_terms(
            &p,
            &local(&[
                ("einleitung des verfahrens", &["initiation of the proceeding"]),
                ("verfahrens", &["proceeding"]),
            ]),
        );
        assert_eq!(t.src_masked, "nach <MASK>");
        assert_eq!(t.tgt_masked, "after <MASK>");
        assert_eq!(t.masked_spans.len(), 2);
    }

    #[test]
    fn repeated_occurrences_are_all_masked() {
        let p = pair("Musa und Musa", "Moses and Moses");
        let t = mask_terms(&p, &local(&[("musa", &["Moses"])]));
        assert_eq!(t.src_masked, "<MASK> und <MASK>");
        assert_eq!(t.tgt_masked, "<MASK> and <MASK>");
    }

    #[test]
    fn partial_tokens_are_not_masked() {
        let p = pair("Die Kommissionsentscheidung", "The Commission decision");
        let t = mask_terms(&p, &local(&[("kommission", &["commission"])]));
        assert_eq!(t.src_masked, "Die Kommissionsentscheidung");
        assert_eq!(t.tgt_masked, "The <MASK> decision");
        let (kept, masked) = token_partition(&p.tgt, &t, Side::Tgt);
        assert_eq!(kept, ["the", "decision"]);
        assert_eq!(masked, ["commission"]);
    }

    #[test]
    fn char_offsets_survive_umlauts() {
        let p = pair("Größe der Einführer", "size of the importers");
        let t = mask_terms(&p, &local(&[("einführer", &["importers"])]));
        let s = t.spans(Side::Src).next().unwrap();
        assert_eq!((s.start, s.end), (10, 19));
        assert_eq!(unmask(&t).unwrap().0, p.src);
    }
}
