//! Acceptance checks, one status line per criterion.
//!
//! Criteria 2 and 3 need the multi-domain German-English release; point
//! `DOMT_MULTIDOMAIN_DIR` at a directory holding `<domain>/train.de`,
//! `<domain>/train.en`, `<domain>/test.de`, `<domain>/test.en`.
//! Criterion 10 needs a live experiment config in `DOMT_LIVE_CONFIG` and is
//! reported, never gating.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use domt_core::corpus::{load_corpus, BitextPair, CorpusFormat, Domain, Split};
use domt_core::decompose::{mask_terms, token_partition, unmask, LocalTerminology, Side, MASK_TOKEN};
use domt_core::evaluate::{bleu, chrf, external_score, paired_bootstrap, BleuConfig, BootstrapConfig, EvalError};
use domt_core::exemplars::{numbered_lines, ExemplarSet};
use domt_core::experiment::{run_experiment, ExperimentConfig};
use domt_core::prompting::{PromptLibrary, Setting, TemplateId};
use domt_core::retrieval::{tokenize, Bm25Index, Bm25Params};
use domt_core::terminology::{aggregate_counts, filter_pair, parse_extraction_output, TermPair, USAGE_THRESHOLD};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Status {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<String, String>;

fn within(limit: Duration, start: Instant, detail: String) -> Check {
    let took = start.elapsed();
    if took > limit {
        Err(format!("{detail}; took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(format!("{detail}; {took:.2?}"))
    }
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay")
}

// 1 ------------------------------------------------------------------------

fn oracle_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Scores every document from scratch; same summation order as the query
/// term order so scores can be compared bit for bit. Tokens are interned
/// per corpus to keep the debug build fast.
struct Oracle {
    vocab: HashMap<String, u32>,
    docs: Vec<Vec<u32>>,
}

impl Oracle {
    fn new(texts: &[&str]) -> Self {
        let mut vocab = HashMap::new();
        let docs = texts
            .iter()
            .map(|t| {
                oracle_tokens(t)
                    .into_iter()
                    .map(|w| {
                        let next = vocab.len() as u32;
                        *vocab.entry(w).or_insert(next)
                    })
                    .collect()
            })
            .collect();
        Self { vocab, docs }
    }

    fn top_k(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let (k1, b) = (1.5, 0.75);
        let n = self.docs.len() as f64;
        let avg = self.docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let mut terms: Vec<u32> = Vec::new();
        for t in oracle_tokens(query) {
            // Unknown words match nothing.
            let Some(&id) = self.vocab.get(&t) else { continue };
            if !terms.contains(&id) {
                terms.push(id);
            }
        }
        let dfs: Vec<f64> = terms
            .iter()
            .map(|t| self.docs.iter().filter(|x| x.contains(t)).count() as f64)
            .collect();
        let mut scored = Vec::new();
        for (d, doc) in self.docs.iter().enumerate() {
            let mut score = 0.0;
            for (t, &df) in terms.iter().zip(&dfs) {
                let tf = doc.iter().filter(|w| *w == t).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = ((n - df + 0.5) / (df + 0.5)).ln().max(0.0);
                if idf == 0.0 {
                    continue;
                }
                score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg));
            }
            if score > 0.0 {
                scored.push((d, score));
            }
        }
        scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        scored.truncate(k);
        scored
    }
}

fn random_text(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> String {
    let seps = [" ", " ", " ", ", ", " - ", ". "];
    let mut s = String::new();
    for i in 0..len {
        if i > 0 {
            s.push_str(seps[rng.random_range(0..seps.len())]);
        }
        // Skewed towards frequent words so idf varies.
        let u: f64 = rng.random();
        let w = ((vocab as f64) * u * u) as usize;
        if rng.random_range(0..10) == 0 {
            s.push_str(&format!("W{w}"));
        } else {
            s.push_str(&format!("w{w}"));
        }
    }
    s
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut queries_checked = 0;
    let mut system = Duration::ZERO;
    for c in 0..50 {
        let n_docs = rng.random_range(1..=1000);
        let n_queries = rng.random_range(1..=200);
        let vocab = rng.random_range(3..400);
        let docs: Vec<BitextPair> = (0..n_docs)
            .map(|i| {
                let len = rng.random_range(1..30);
                BitextPair::new(format!("d{i}"), random_text(&mut rng, vocab, len), "t", Domain::Law)
            })
            .collect();
        let oracle = Oracle::new(&docs.iter().map(|d| d.src.as_str()).collect::<Vec<_>>());
        let t0 = Instant::now();
        let index = Bm25Index::from_pairs(docs, Bm25Params::default()).map_err(|e| e.to_string())?;
        system += t0.elapsed();
        for q in 0..n_queries {
            let len = rng.random_range(1..10);
            let query = random_text(&mut rng, vocab + 20, len);
            let k = rng.random_range(1..=10);
            let t0 = Instant::now();
            let got = index.query(&query, k).map_err(|e| e.to_string())?;
            system += t0.elapsed();
            let want = oracle.top_k(&query, k);
            if got.len() != want.len() {
                return Err(format!("corpus {c} query {q}: {} results, oracle {}", got.len(), want.len()));
            }
            for (r, (d, s)) in got.iter().zip(&want) {
                if r.pair.id != format!("d{d}") {
                    return Err(format!("corpus {c} query {q} rank {}: {} vs oracle d{d}", r.rank, r.pair.id));
                }
                if (r.score - s).abs() > 1e-9 {
                    return Err(format!("corpus {c} query {q}: score {} vs oracle {s}", r.score));
                }
            }
            queries_checked += 1;
        }
    }
    let detail = format!(
        "50 corpora, {queries_checked} queries match the brute-force scorer; index build + query {system:.2?} (with oracle {:.2?})",
        start.elapsed()
    );
    if system > Duration::from_secs(10) {
        Err(detail)
    } else {
        Ok(detail)
    }
}

// 2, 3 ---------------------------------------------------------------------

const RELEASE_COUNTS: [(&str, usize); 3] = [("koran", 16_775), ("medical", 234_352), ("law", 464_295)];

fn release_dir() -> Option<PathBuf> {
    std::env::var_os("DOMT_MULTIDOMAIN_DIR").map(PathBuf::from)
}

fn load_split(dir: &Path, domain: &str, split: Split) -> Result<Vec<BitextPair>, String> {
    let name = if split == Split::Train { "train" } else { "test" };
    let path = dir.join(domain).join(format!("{name}.de"));
    let (c, _) = load_corpus(&path, CorpusFormat::ParallelText, split, Some(Domain::from(domain)))
        .map_err(|e| e.to_string())?;
    Ok(c.pairs().to_vec())
}

fn criterion_2(dir: &Path) -> Check {
    let mut detail = Vec::new();
    let mut bad = Vec::new();
    for (domain, want) in RELEASE_COUNTS {
        let got = load_split(dir, domain, Split::Train)?.len();
        detail.push(format!("{domain} {got}"));
        if got != want {
            bad.push(format!("{domain}: {got} != {want}"));
        }
    }
    if bad.is_empty() {
        Ok(detail.join(", "))
    } else {
        Err(bad.join("; "))
    }
}

fn criterion_3(dir: &Path) -> Check {
    let start = Instant::now();
    let (mut kept, mut total) = (0usize, 0usize);
    for (domain, _) in RELEASE_COUNTS {
        let train = load_split(dir, domain, Split::Train)?;
        let test = load_split(dir, domain, Split::Test)?;
        total += train.len();
        let index = Bm25Index::from_pairs(train, Bm25Params::default()).map_err(|e| e.to_string())?;
        let queries: Vec<&str> = test.iter().map(|p| p.src.as_str()).collect();
        kept += index.relevant_subset(&queries, 3).map_err(|e| e.to_string())?.len();
    }
    let frac = kept as f64 / total as f64;
    let detail = format!("{kept} of {total} train entries ({:.2}%)", 100.0 * frac);
    if !(0.05..=0.15).contains(&frac) {
        return Err(detail);
    }
    within(Duration::from_secs(600), start, detail)
}

// 4 ------------------------------------------------------------------------

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(PtConfig {
        cases,
        failure_persistence: None,
        ..PtConfig::default()
    })
}

fn flip_case(s: &str, mask: u64) -> String {
    s.chars()
        .enumerate()
        .map(|(i, c)| {
            if mask >> (i % 64) & 1 == 1 {
                c.to_uppercase().collect::<String>()
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn criterion_4() -> Check {
    let start = Instant::now();
    // An extraction stream: (source term, target term) draws with repeats.
    let stream = prop::collection::vec((0..6usize, 0..12usize, 1..4usize), 1..60);
    let word = "[a-zäöü]{1,6}";
    let texts = (word, word, "[a-zA-ZäöüÄÖÜ ]{0,30}", "[a-zA-ZäöüÄÖÜ ]{0,30}", any::<u64>(), any::<bool>());
    let mut r = runner(1000);
    r.run(&(stream, texts), |(draws, (s, t, src_text, tgt_text, mask, plant))| {
        let mut pairs = Vec::new();
        for (si, ti, reps) in &draws {
            for _ in 0..*reps {
                pairs.push(TermPair::new(&format!("Term{si}"), &format!("cand{ti}"), "x").unwrap());
            }
        }
        let counts = aggregate_counts(&pairs);
        // Independent tally.
        let mut tally: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for (si, ti, reps) in &draws {
            *tally.entry(format!("term{si}")).or_default().entry(format!("cand{ti}")).or_default() += *reps as u64;
        }
        for e in counts.entries() {
            let sum: f64 = e.candidates.iter().map(|c| c.usage).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "usages of {} sum to {sum}", e.src_term);
        }
        let dict = counts.into_dictionary(Domain::Law, Some(USAGE_THRESHOLD));
        for (src, cands) in &tally {
            let total: u64 = cands.values().sum();
            let expected: Vec<&String> = cands
                .iter()
                .filter(|(_, &n)| n as f64 / total as f64 > USAGE_THRESHOLD)
                .map(|(t, _)| t)
                .collect();
            let got: Vec<String> = dict.get(src).map(|e| e.targets()).unwrap_or_default();
            let mut got_sorted = got.clone();
            got_sorted.sort();
            prop_assert_eq!(got_sorted.iter().collect::<Vec<_>>(), expected);
            if let Some(e) = dict.get(src) {
                for c in &e.candidates {
                    prop_assert!(c.usage > USAGE_THRESHOLD);
                }
            }
        }
        // filter_pair implies containment; planted occurrences always pass.
        let (src_text, tgt_text) = if plant {
            (
                format!("{src_text} {} {src_text}", flip_case(&s, mask)),
                format!("{tgt_text}{}", flip_case(&t, !mask)),
            )
        } else {
            (src_text, tgt_text)
        };
        let pair = TermPair::new(&s, &t, "x").unwrap();
        let contains = |hay: &str, needle: &str| {
            let h: Vec<char> = hay.chars().flat_map(char::to_lowercase).collect();
            let n: Vec<char> = needle.chars().flat_map(char::to_lowercase).collect();
            n.is_empty() || h.windows(n.len()).any(|w| w == n.as_slice())
        };
        let kept = filter_pair(&pair, &src_text, &tgt_text);
        if kept {
            prop_assert!(contains(&src_text, &s) && contains(&tgt_text, &t));
        }
        if plant {
            prop_assert!(kept, "planted {s:?}/{t:?} rejected");
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    within(
        Duration::from_secs(5),
        start,
        "1000 streams: usage filter, usage sums, substring filter".into(),
    )
}

// 5 ------------------------------------------------------------------------

fn criterion_5() -> Check {
    let lib = PromptLibrary::builtin();
    let mut matched = 0;
    for id in TemplateId::ALL {
        let rendered = lib.render(id, &common::reference_bindings(id)).map_err(|e| format!("{}: {e}", id.as_str()))?;
        if rendered.text() != common::golden(id) {
            return Err(format!("{} differs from its golden file", id.file_name()));
        }
        matched += 1;
    }
    Ok(format!("{matched}/7 templates byte-identical"))
}

// 6 ------------------------------------------------------------------------

fn check_decomposition(pair: &BitextPair, local: &LocalTerminology) -> Result<usize, TestCaseError> {
    let t = mask_terms(pair, local);
    let (src, tgt) = unmask(&t).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&src, &pair.src);
    prop_assert_eq!(&tgt, &pair.tgt);
    for (side, original) in [(Side::Src, &pair.src), (Side::Tgt, &pair.tgt)] {
        let masks = t.masked(side).matches(MASK_TOKEN).count();
        let spans: Vec<_> = t.spans(side).collect();
        prop_assert_eq!(masks, spans.len());
        let chars: Vec<char> = original.chars().collect();
        for s in &spans {
            let text: String = chars[s.start..s.end].iter().collect();
            prop_assert_eq!(&text, &s.original);
        }
        let (kept, masked) = token_partition(original, &t, side);
        let mut joined: Vec<String> = kept.into_iter().chain(masked).collect();
        let mut all = tokenize(original).tokens;
        joined.sort();
        all.sort();
        prop_assert_eq!(joined, all, "token partition on {:?}", side);
    }
    Ok(t.masked_spans.len())
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let words = prop::sample::select(vec![
        "die", "Kommission", "kommission", "Größe", "Einführer", "des", "Verfahrens", "Einleitung", "und", "Musa",
        "über", "the", "commission", "size", "importers", "of", "proceeding", "Moses", "and", "de", "x",
    ]);
    let sentence = || prop::collection::vec((words.clone(), prop::sample::select(vec![" ", " ", ", ", ". ", " ("])), 1..14);
    let join = |ws: Vec<(&str, &str)>| -> String {
        ws.iter().enumerate().map(|(i, (w, s))| if i == 0 { w.to_string() } else { format!("{s}{w}") }).collect()
    };
    let terms = prop::collection::vec((0..14usize, 1..4usize, 0..14usize, 1..4usize, any::<u64>()), 0..5);
    let mut r = runner(500);
    let spans = std::cell::Cell::new(0usize);
    r.run(&(sentence(), sentence(), terms), |(s, t, picks)| {
        let src = join(s);
        let tgt = join(t);
        let toks = |x: &str| -> Vec<String> { x.split_whitespace().map(str::to_string).collect() };
        let (st, tt) = (toks(&src), toks(&tgt));
        let mut local = LocalTerminology::default();
        for (a, la, b, lb, mask) in picks {
            // Mostly real sub-sequences, sometimes absent or cut mid-token.
            let pick = |ts: &[String], i: usize, l: usize| -> String {
                let i = i % ts.len();
                ts[i..(i + l).min(ts.len())].join(" ")
            };
            let mut s_term = pick(&st, a, la).to_lowercase();
            if mask % 7 == 0 {
                s_term.pop();
            }
            let t_term = flip_case(&pick(&tt, b, lb), mask);
            if s_term.trim().is_empty() || t_term.trim().is_empty() {
                continue;
            }
            local.entries.entry(s_term).or_default().push(t_term);
        }
        let pair = BitextPair::new("p", src, tgt, Domain::Law);
        spans.set(spans.get() + check_decomposition(&pair, &local)?);
        Ok(())
    })
    .map_err(|e| e.to_string())?;

    let ex = ExemplarSet::builtin();
    let koran = ex.term_extract(&Domain::Koran).map_err(|e| e.to_string())?;
    let raw = numbered_lines("terminology", koran.terminology.iter().map(String::as_str));
    let parsed = parse_extraction_output(&raw, koran.sources.len());
    let mut koran_spans = 0;
    for (i, slot) in parsed.slots.iter().enumerate() {
        let mut local = LocalTerminology::default();
        for p in slot {
            local.entries.entry(p.src_term.clone()).or_default().push(p.tgt_term.clone());
        }
        let pair = BitextPair::new(format!("koran-{i}"), &koran.sources[i], &koran.targets[i], Domain::Koran);
        koran_spans += check_decomposition(&pair, &local).map_err(|e| format!("koran exemplar {}: {e}", i + 1))?;
    }
    if koran_spans == 0 {
        return Err("no spans masked in the koran exemplars".into());
    }
    within(
        Duration::from_secs(5),
        start,
        format!("500 random cases ({} spans) and 5 koran exemplars ({koran_spans} spans) round-trip", spans.get()),
    )
}

// 7 ------------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(&fixture_dir().join("config.json")).map_err(|e| e.to_string())?;
    cfg.out_dir = tmp.path().join("runs");
    let first = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let snap1 = snapshot(&first.run_dir);
    std::fs::remove_dir_all(&cfg.out_dir).map_err(|e| e.to_string())?;
    let second = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let snap2 = snapshot(&second.run_dir);
    if !first.failures.is_empty() {
        return Err(format!("{} instance failures: {:?}", first.failures.len(), first.failures[0]));
    }
    if first.records.len() != 20 * Setting::ALL.len() {
        return Err(format!("{} records, expected {}", first.records.len(), 20 * Setting::ALL.len()));
    }
    if snap1 != snap2 {
        let diff: Vec<_> = snap1.iter().filter(|(k, v)| snap2.get(*k) != Some(v)).map(|(k, _)| k).collect();
        return Err(format!("runs differ in {diff:?}"));
    }
    let report = &first.reports[0];
    let rows: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    let want: Vec<&str> = Setting::ALL.iter().map(|s| s.as_str()).collect();
    if rows != want || report.domains.len() != 3 {
        return Err(format!("report shape {rows:?} x {:?}", report.domains));
    }
    if report.rows.iter().any(|r| r.cells.len() != report.domains.len()) {
        return Err("report has empty cells".into());
    }
    within(
        Duration::from_secs(30),
        start,
        format!("{} records, {} files byte-identical across two runs", first.records.len(), snap1.len()),
    )
}

// 8 ------------------------------------------------------------------------

/// Straightforward chrF: character n-gram F-beta (beta 2, n 1..6, spaces
/// removed), averaged over orders both sides have, on pooled statistics.
fn chrf_oracle(pairs: &[(&str, &str)]) -> f64 {
    let grams = |s: &str, n: usize| -> HashMap<Vec<char>, usize> {
        let c: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut m = HashMap::new();
        if c.len() >= n {
            for w in c.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    };
    let mut sum = 0.0;
    let mut orders = 0;
    for n in 1..=6 {
        let (mut hit, mut hl, mut rl) = (0usize, 0usize, 0usize);
        for (h, r) in pairs {
            let (gh, gr) = (grams(h, n), grams(r, n));
            hl += gh.values().sum::<usize>();
            rl += gr.values().sum::<usize>();
            hit += gh.iter().map(|(g, c)| (*c).min(*gr.get(g).unwrap_or(&0))).sum::<usize>();
        }
        if hl == 0 || rl == 0 {
            continue;
        }
        orders += 1;
        let (p, r) = (hit as f64 / hl as f64, hit as f64 / rl as f64);
        if p + r > 0.0 {
            sum += 5.0 * p * r / (4.0 * p + r);
        }
    }
    if orders == 0 {
        0.0
    } else {
        100.0 * sum / orders as f64
    }
}

fn criterion_8() -> Check {
    let close = |a: f64, b: f64, what: &str| -> Result<(), String> {
        if (a - b).abs() < 1e-6 {
            Ok(())
        } else {
            Err(format!("{what}: {a} vs {b}"))
        }
    };
    let ident = [
        ("Die Kommission hat die Beihilfe genehmigt .", "Die Kommission hat die Beihilfe genehmigt ."),
        ("a b c d", "a b c d"),
    ];
    let c = chrf(&ident).map_err(|e| e.to_string())?.corpus_score;
    let b = bleu(&ident, BleuConfig::default()).map_err(|e| e.to_string())?.corpus_score;
    if c != 100.0 || b != 100.0 {
        return Err(format!("identity chrF {c}, BLEU {b}"));
    }
    // Hand-computed.
    close(
        chrf(&[("abcd", "abce")]).unwrap().corpus_score,
        100.0 * (0.75 + 2.0 / 3.0 + 0.5) / 4.0,
        "chrF abcd/abce",
    )?;
    let ps: [f64; 4] = [8.0 / 9.0, 5.0 / 7.0, 2.0 / 5.0, 1.0 / 6.0];
    let want = 100.0 * (1.0f64 - 10.0 / 9.0).exp() * (ps.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
    let toy = [("the cat sat on the mat", "the cat is on the mat"), ("a dog runs", "a dog runs fast")];
    close(bleu(&toy, BleuConfig::default()).unwrap().corpus_score, want, "BLEU toy corpus")?;
    // Random toy corpora against the reference chrF.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..200 {
        let n = rng.random_range(1..5);
        let owned: Vec<(String, String)> = (0..n)
            .map(|_| {
                let h = rng.random_range(1..5);
                let r = rng.random_range(1..5);
                (random_text(&mut rng, 6, h), random_text(&mut rng, 6, r))
            })
            .collect();
        let pairs: Vec<(&str, &str)> = owned.iter().map(|(h, r)| (h.as_str(), r.as_str())).collect();
        close(chrf(&pairs).unwrap().corpus_score, chrf_oracle(&pairs), &format!("random chrF corpus {i}"))?;
    }
    // External scorer protocol.
    let segs = [("q", "h1", "r1"), ("q", "h2", "r2"), ("q", "h3", "r3")];
    let ok = external_score(&segs, r#"while IFS= read -r l; do echo '{"score": 0.25}'; done"#)
        .map_err(|e| format!("stub scorer: {e}"))?;
    if ok.segment_scores != vec![0.25; 3] || ok.corpus_score != 0.25 {
        return Err(format!("stub scorer returned {:?}", ok.segment_scores));
    }
    match external_score(&segs, r#"head -n 2 | while IFS= read -r l; do echo '{"score": 1}'; done"#) {
        Err(EvalError::CountMismatch { expected: 3, got: 2 }) => {}
        other => return Err(format!("count mismatch not detected: {other:?}")),
    }
    Ok("identities exact, toy values within 1e-6, 200 random chrF corpora, stub scorer round-trip".into())
}

// 9 ------------------------------------------------------------------------

fn criterion_9() -> Check {
    let cfg = BootstrapConfig::default();
    let a: Vec<f64> = (0..100).map(|i| ((i * 53) % 97) as f64).collect();
    let same = paired_bootstrap(&a, &a, cfg).map_err(|e| e.to_string())?;
    if same.p_value < 0.45 || same.significant {
        return Err(format!("identical vectors: p = {}", same.p_value));
    }
    let b: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
    let better = paired_bootstrap(&a, &b, cfg).map_err(|e| e.to_string())?;
    if better.p_value >= 0.002 || !better.significant {
        return Err(format!("+10 vectors: p = {}", better.p_value));
    }
    let noisy: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { 3.0 } else { -2.5 }).collect();
    let r1 = paired_bootstrap(&a, &noisy, cfg).unwrap();
    let r2 = paired_bootstrap(&a, &noisy, cfg).unwrap();
    if r1.p_value.to_bits() != r2.p_value.to_bits() {
        return Err(format!("seeded p not reproducible: {} vs {}", r1.p_value, r2.p_value));
    }
    Ok(format!(
        "identical p = {}, +10 p = {}, seeded p = {} reproduced",
        same.p_value, better.p_value, r1.p_value
    ))
}

// 10 -----------------------------------------------------------------------

fn criterion_10(path: &Path) -> Check {
    let cfg = ExperimentConfig::load(path).map_err(|e| e.to_string())?;
    let s = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let report = s.reports.last().ok_or("no report")?;
    let mut lines = Vec::new();
    let mut holds = true;
    for domain in &report.domains {
        let score = |label: &str| {
            report
                .rows
                .iter()
                .find(|r| r.label == label)
                .and_then(|r| r.cells.get(domain))
                .map(|c| c.score)
        };
        let (zs, rd, gd) = (score("zero_shot"), score("retrieved_demos"), score("generated_demos"));
        if let (Some(zs), Some(rd)) = (zs, rd) {
            holds &= rd >= zs;
        }
        if let (Some(rd), Some(gd)) = (rd, gd) {
            holds &= rd >= gd;
        }
        lines.push(format!("{domain}: zero_shot {zs:?}, retrieved_demos {rd:?}, generated_demos {gd:?}"));
    }
    let detail = format!("{} ({})", lines.join("; "), report.metric);
    if holds {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(f: impl FnOnce() -> Check) -> Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => Status::Pass(s),
        Ok(Err(e)) => Status::Fail(e),
        Err(p) => Status::Fail(
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    }
}

fn main() {
    // `cargo test -- <filter>` passes arguments through; only honour a
    // plain list of criterion numbers.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    let data = release_dir();
    let live = std::env::var_os("DOMT_LIVE_CONFIG").map(PathBuf::from);
    let no_data = || Status::NotRun("DOMT_MULTIDOMAIN_DIR not set; the multi-domain release is not bundled".into());

    let mut gating_failures = 0;
    for n in 1..=10u32 {
        if !wanted(n) {
            continue;
        }
        let status = match n {
            1 => run(criterion_1),
            2 => data.as_deref().map_or_else(no_data, |d| run(|| criterion_2(d))),
            3 => data.as_deref().map_or_else(no_data, |d| run(|| criterion_3(d))),
            4 => run(criterion_4),
            5 => run(criterion_5),
            6 => run(criterion_6),
            7 => run(criterion_7),
            8 => run(criterion_8),
            9 => run(criterion_9),
            _ => live.as_deref().map_or_else(
                || Status::NotRun("DOMT_LIVE_CONFIG not set; needs credentials and a live model".into()),
                |p| run(|| criterion_10(p)),
            ),
        };
        let (tag, detail) = match status {
            Status::Pass(d) => ("PASS", d),
            Status::Fail(d) => {
                if n != 10 {
                    gating_failures += 1;
                }
                ("FAIL", d)
            }
            Status::NotRun(d) => ("NOT RUN", d),
        };
        let note = if n == 10 { " (reported, not gating)" } else { "" };
        println!("criterion {n:>2}: {tag}{note}: {detail}");
    }
    if gating_failures > 0 {
        eprintln!("{gating_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
