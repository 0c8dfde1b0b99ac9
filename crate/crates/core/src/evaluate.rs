//! Scoring: chrF and BLEU computed natively, any other metric through an
//! external scorer process; paired bootstrap significance; result tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Domain;
use crate::prompting::Setting;

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
pub const BLEU_ORDER: usize = 4;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SEED: u64 = 17;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to score")]
    Empty,
    #[error("score vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("scorer returned {got} scores for {expected} segments")]
    CountMismatch { expected: usize, got: usize },
    #[error("scorer exited with {status}: {stderr}")]
    ScorerFailed { status: String, stderr: String },
    #[error("scorer output line {line}: {reason}")]
    ScorerOutput { line: usize, reason: String },
    #[error("scorer io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

/// One translated test instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub source_id: String,
    pub domain: Domain,
    pub setting: Setting,
    /// Table row; the setting name unless a run variant overrides it.
    pub label: String,
    pub src: String,
    pub hyp: String,
    #[serde(rename = "ref")]
    pub reference: String,
    /// Model output as returned, before parsing.
    pub raw: String,
    pub prompt_hash: String,
    /// Ids of the demos/terms artifacts the prompt was built from.
    pub knowledge: Vec<String>,
}

/// Anything with a hypothesis and a reference.
pub trait Segment {
    fn hyp(&self) -> &str;
    fn reference(&self) -> &str;
    fn src(&self) -> &str {
        ""
    }
}

impl Segment for TranslationRecord {
    fn hyp(&self) -> &str {
        &self.hyp
    }
    fn reference(&self) -> &str {
        &self.reference
    }
    fn src(&self) -> &str {
        &self.src
    }
}

impl Segment for (&str, &str) {
    fn hyp(&self) -> &str {
        self.0
    }
    fn reference(&self) -> &str {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub corpus_score: f64,
    pub segment_scores: Vec<f64>,
}

fn ngram_counts<T: Ord + Clone>(items: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (hyp n-grams, ref n-grams, clipped matches) for one order.
fn match_stats<T: Ord + Clone>(hyp: &[T], reference: &[T], n: usize) -> [f64; 3] {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches: usize = h.iter().map(|(g, c)| (*c).min(*r.get(g).unwrap_or(&0))).sum();
    [h.values().sum::<usize>() as f64, r.values().sum::<usize>() as f64, matches as f64]
}

fn chrf_stats(hyp: &str, reference: &str) -> Vec<f64> {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    (1..=CHRF_ORDER).flat_map(|n| match_stats(&h, &r, n)).collect()
}

/// Per-order F-beta averaged over the orders present on both sides
/// (the sacreBLEU formulation, without its epsilon floor); 0..=100.
fn chrf_from_stats(stats: &[f64]) -> f64 {
    let factor = CHRF_BETA * CHRF_BETA;
    let mut score = 0.0;
    let mut effective = 0;
    for s in stats.chunks(3) {
        let (n_hyp, n_ref, n_match) = (s[0], s[1], s[2]);
        if n_hyp > 0.0 && n_ref > 0.0 {
            effective += 1;
            let prec = n_match / n_hyp;
            let rec = n_match / n_ref;
            let denom = factor * prec + rec;
            if denom > 0.0 {
                score += (1.0 + factor) * prec * rec / denom;
            }
        }
    }
    if effective == 0 {
        0.0
    } else {
        100.0 * score / effective as f64
    }
}

pub fn chrf<S: Segment>(segments: &[S]) -> Result<MetricReport, EvalError> {
    if segments.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = vec![0.0; CHRF_ORDER * 3];
    let mut segment_scores = Vec::with_capacity(segments.len());
    for s in segments {
        let st = chrf_stats(s.hyp(), s.reference());
        segment_scores.push(chrf_from_stats(&st));
        total.iter_mut().zip(&st).for_each(|(t, x)| *t += x);
    }
    Ok(MetricReport {
        metric: "chrf".into(),
        corpus_score: chrf_from_stats(&total),
        segment_scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Each zero-match order gets precision 1 / (2^k * total), k counting up.
    Exp,
}

/// Tokens are whitespace-separated; sentences are compared case-sensitively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub smoothing: Smoothing,
    /// Corpus score: average only over orders the hypothesis has n-grams for.
    pub effective_order: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            smoothing: Smoothing::Exp,
            effective_order: false,
        }
    }
}

struct BleuStats {
    hyp_len: f64,
    ref_len: f64,
    /// (matches, total) per order
    orders: [(f64, f64); BLEU_ORDER],
}

fn bleu_stats(hyp: &str, reference: &str) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut orders = [(0.0, 0.0); BLEU_ORDER];
    for (n, o) in orders.iter_mut().enumerate() {
        let [total, _, matches] = match_stats(&h, &r, n + 1);
        *o = (matches, total);
    }
    BleuStats {
        hyp_len: h.len() as f64,
        ref_len: r.len() as f64,
        orders,
    }
}

fn bleu_from_stats(s: &BleuStats, cfg: BleuConfig) -> f64 {
    if s.hyp_len == 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut used = 0;
    let mut smooth = 1.0;
    for &(matches, total) in &s.orders {
        if total == 0.0 {
            if cfg.effective_order {
                break;
            }
            return 0.0;
        }
        let p = if matches > 0.0 {
            matches / total
        } else {
            match cfg.smoothing {
                Smoothing::Exp => {
                    smooth *= 2.0;
                    1.0 / (smooth * total)
                }
                Smoothing::None => return 0.0,
            }
        };
        log_sum += p.ln();
        used += 1;
    }
    if used == 0 {
        return 0.0;
    }
    let bp = if s.hyp_len >= s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len / s.hyp_len).exp()
    };
    100.0 * bp * (log_sum / used as f64).exp()
}

/// Corpus BLEU from summed statistics; segment scores use effective order.
pub fn bleu<S: Segment>(segments: &[S], cfg: BleuConfig) -> Result<MetricReport, EvalError> {
    if segments.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = BleuStats {
        hyp_len: 0.0,
        ref_len: 0.0,
        orders: [(0.0, 0.0); BLEU_ORDER],
    };
    let seg_cfg = BleuConfig {
        effective_order: true,
        ..cfg
    };
    let mut segment_scores = Vec::with_capacity(segments.len());
    for seg in segments {
        let st = bleu_stats(seg.hyp(), seg.reference());
        segment_scores.push(bleu_from_stats(&st, seg_cfg));
        total.hyp_len += st.hyp_len;
        total.ref_len += st.ref_len;
        for (t, o) in total.orders.iter_mut().zip(st.orders) {
            t.0 += o.0;
            t.1 += o.1;
        }
    }
    Ok(MetricReport {
        metric: "bleu".into(),
        corpus_score: bleu_from_stats(&total, cfg),
        segment_scores,
    })
}

#[derive(Serialize)]
struct ScorerRequest<'a> {
    src: &'a str,
    mt: &'a str,
    #[serde(rename = "ref")]
    reference: &'a str,
}

#[derive(Deserialize)]
struct ScorerResponse {
    score: f64,
}

/// Streams `{"src","mt","ref"}` lines to `sh -c scorer_cmd` and reads one
/// `{"score"}` line back per segment. Corpus score is the segment mean.
pub fn external_score<S: Segment>(segments: &[S], scorer_cmd: &str) -> Result<MetricReport, EvalError> {
    if segments.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut input = String::new();
    for s in segments {
        let req = ScorerRequest {
            src: s.src(),
            mt: s.hyp(),
            reference: s.reference(),
        };
        input.push_str(&serde_json::to_string(&req).expect("request serializes"));
        input.push('\n');
    }
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(scorer_cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut stdin = child.stdin.take().expect("stdin piped");
    let writer = std::thread::spawn(move || {
        // A scorer that exits early closes the pipe; that surfaces below as
        // a count mismatch or exit status, not as a write error.
        let _ = stdin.write_all(input.as_bytes());
    });
    let stdout = child.stdout.take().expect("stdout piped");
    let mut scores = Vec::with_capacity(segments.len());
    let mut parse_error = None;
    for (i, line) in BufReader::new(stdout).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScorerResponse>(&line) {
            Ok(r) => scores.push(r.score),
            Err(e) => {
                parse_error.get_or_insert(EvalError::ScorerOutput {
                    line: i + 1,
                    reason: e.to_string(),
                });
            }
        }
    }
    let _ = writer.join();
    let out = child.wait_with_output()?;
    if !out.status.success() {
        return Err(EvalError::ScorerFailed {
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    if let Some(e) = parse_error {
        return Err(e);
    }
    if scores.len() != segments.len() {
        return Err(EvalError::CountMismatch {
            expected: segments.len(),
            got: scores.len(),
        });
    }
    Ok(MetricReport {
        metric: "external".into(),
        corpus_score: scores.iter().sum::<f64>() / scores.len() as f64,
        segment_scores: scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub baseline: String,
    pub system: String,
    /// mean(system) - mean(baseline)
    pub delta: f64,
    pub p_value: f64,
    pub significant: bool,
    pub alpha: f64,
    pub resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: DEFAULT_SEED,
            alpha: DEFAULT_ALPHA,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One-sided paired bootstrap: p is the share of resamples in which `b`
/// does not beat `a`. Significant iff p < alpha.
pub fn paired_bootstrap(a: &[f64], b: &[f64], cfg: BootstrapConfig) -> Result<SignificanceResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() || cfg.resamples == 0 {
        return Err(EvalError::Empty);
    }
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut not_better = 0usize;
    for _ in 0..cfg.resamples {
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        if sb <= sa {
            not_better += 1;
        }
    }
    let p_value = not_better as f64 / cfg.resamples as f64;
    Ok(SignificanceResult {
        baseline: String::new(),
        system: String::new(),
        delta: mean(b) - mean(a),
        p_value,
        significant: p_value < cfg.alpha,
        alpha: cfg.alpha,
        resamples: cfg.resamples,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricSpec {
    Chrf,
    Bleu,
    External(String),
}

impl MetricSpec {
    pub fn name(&self) -> &str {
        match self {
            MetricSpec::Chrf => "chrf",
            MetricSpec::Bleu => "bleu",
            MetricSpec::External(_) => "external",
        }
    }

    pub fn score(&self, records: &[&TranslationRecord]) -> Result<MetricReport, EvalError> {
        let segs: Vec<(&str, &str, &str)> = records
            .iter()
            .map(|r| (r.hyp.as_str(), r.reference.as_str(), r.src.as_str()))
            .collect();
        match self {
            MetricSpec::Chrf => chrf(&segs),
            MetricSpec::Bleu => bleu(&segs, BleuConfig::default()),
            MetricSpec::External(cmd) => external_score(&segs, cmd),
        }
    }
}

impl Segment for (&str, &str, &str) {
    fn hyp(&self) -> &str {
        self.0
    }
    fn reference(&self) -> &str {
        self.1
    }
    fn src(&self) -> &str {
        self.2
    }
}

impl FromStr for MetricSpec {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "chrf" => Ok(MetricSpec::Chrf),
            "bleu" => Ok(MetricSpec::Bleu),
            other => match other.strip_prefix("external:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(MetricSpec::External(cmd.to_string())),
                _ => Err(EvalError::UnknownMetric(other.to_string())),
            },
        }
    }
}

/// Splits a comma-separated metric list; `external:` commands may not
/// contain commas, so they must come last.
pub fn parse_metrics(list: &str) -> Result<Vec<MetricSpec>, EvalError> {
    let mut out = Vec::new();
    let mut rest = list.trim();
    while !rest.is_empty() {
        if rest.starts_with("external:") {
            out.push(rest.parse()?);
            break;
        }
        let (head, tail) = rest.split_once(',').unwrap_or((rest, ""));
        out.push(head.parse()?);
        rest = tail.trim();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub score: f64,
    pub segments: usize,
    pub delta: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// domain -> cell; domains without records are absent.
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub metric: String,
    pub baseline: String,
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn row_order(label: &str, baseline: &str) -> (u8, usize, String) {
    if label == baseline {
        return (0, 0, String::new());
    }
    let idx = Setting::ALL
        .iter()
        .position(|s| label == s.as_str() || label.starts_with(&format!("{}/", s.as_str())))
        .unwrap_or(Setting::ALL.len());
    (1, idx, label.to_string())
}

/// Scores each (domain, label) group and compares every label against the
/// baseline row of the same domain, pairing segments by source id.
pub fn build_report(
    records: &[TranslationRecord],
    metric: &MetricSpec,
    baseline: &str,
    boot: BootstrapConfig,
) -> Result<ReportTable, EvalError> {
    let mut groups: BTreeMap<(Domain, String), Vec<&TranslationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.domain.clone(), r.label.clone())).or_default().push(r);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    }
    let mut scored: BTreeMap<(Domain, String), (MetricReport, Vec<String>)> = BTreeMap::new();
    for (key, recs) in &groups {
        let report = metric.score(recs)?;
        scored.insert(key.clone(), (report, recs.iter().map(|r| r.source_id.clone()).collect()));
    }
    let domains: BTreeSet<Domain> = scored.keys().map(|(d, _)| d.clone()).collect();
    let mut labels: Vec<String> = scored
        .keys()
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    labels.sort_by_key(|l| row_order(l, baseline));

    let mut rows = Vec::new();
    for label in &labels {
        let mut cells = BTreeMap::new();
        for d in &domains {
            let Some((rep, ids)) = scored.get(&(d.clone(), label.clone())) else {
                continue;
            };
            let mut cell = Cell {
                score: rep.corpus_score,
                segments: ids.len(),
                delta: None,
                p_value: None,
                significant: None,
            };
            if label != baseline {
                if let Some((base, base_ids)) = scored.get(&(d.clone(), baseline.to_string())) {
                    cell.delta = Some(rep.corpus_score - base.corpus_score);
                    let pos: HashMap<&str, usize> =
                        base_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
                    let (mut a, mut b) = (Vec::new(), Vec::new());
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(&j) = pos.get(id.as_str()) {
                            a.push(base.segment_scores[j]);
                            b.push(rep.segment_scores[i]);
                        }
                    }
                    if !a.is_empty() {
                        let sig = paired_bootstrap(&a, &b, boot)?;
                        cell.p_value = Some(sig.p_value);
                        cell.significant = Some(sig.significant && sig.delta > 0.0);
                    }
                }
            }
            cells.insert(d.to_string(), cell);
        }
        rows.push(ReportRow {
            label: label.clone(),
            cells,
        });
    }
    Ok(ReportTable {
        metric: metric.name().to_string(),
        baseline: baseline.to_string(),
        domains: domains.iter().map(|d| d.to_string()).collect(),
        rows,
    })
}

impl ReportTable {
    /// Fixed-width text; `*` marks a significant improvement over the
    /// baseline, `-` an absent cell.
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "metric: {} (baseline: {})", self.metric, self.baseline);
        let _ = write!(out, "{:<label_w$}", "setting");
        for d in &self.domains {
            let _ = write!(out, " | {:>9} {:>8}", d, "Δ");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<label_w$}", row.label);
            for d in &self.domains {
                match row.cells.get(d) {
                    Some(c) => {
                        let mark = if c.significant == Some(true) { "*" } else { " " };
                        let delta = c.delta.map_or(String::new(), |x| format!("{x:+.2}"));
                        let _ = write!(out, " | {:>8.2}{mark} {delta:>8}", c.score);
                    }
                    None => {
                        let _ = write!(out, " | {:>9} {:>8}", "-", "");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
