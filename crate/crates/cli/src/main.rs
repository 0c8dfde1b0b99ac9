use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use domt_core::corpus::{domain_from_path, load_corpus, BitextPair, CorpusFormat, Domain, DomainCorpus, Split};
use domt_core::decompose::run_decomposition;
use domt_core::evaluate::{build_report, parse_metrics, BootstrapConfig, ReportTable};
use domt_core::exemplars::ExemplarSet;
use domt_core::experiment::{
    ablation, build_llm_client, load_records, run_experiment, write_reports, AblationMode, ExperimentConfig, RunManifest,
    RunSummary,
};
use domt_core::generation::{demo_exemplars_for, generate_demos, generate_terms, IclMode};
use domt_core::llm::{configure_stages, StagedLlm};
use domt_core::prompting::{LanguagePair, PromptLibrary, Setting, TemplateId};
use domt_core::retrieval::{Bm25Index, Bm25Params, DEFAULT_B, DEFAULT_K, DEFAULT_K1};
use domt_core::terminology::{induce_dictionary, GlobalDictionary, LookupOptions};

#[derive(Parser)]
#[command(name = "domt", version, about = "Domain-adapted LLM translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus inspection.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// BM25 datastore index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Terminology dictionaries.
    #[command(subcommand)]
    Terms(TermsCmd),
    /// LLM-generated demonstrations or terminology.
    #[command(subcommand)]
    Gen(GenCmd),
    /// Prompt templates.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Style / terminology decomposition of retrieved demonstrations.
    #[command(subcommand)]
    Decompose(DecomposeCmd),
    /// Run a single setting of an experiment config.
    Translate {
        #[arg(long)]
        setting: Setting,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run every setting of an experiment config.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run one demonstration-generation ablation row.
    Ablation {
        #[arg(long)]
        mode: AblationMode,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Scoring and significance.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Rebuild and print the report of a run directory.
    Report {
        /// `runs/<hash>` directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        metrics: Option<String>,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Load, validate and count a corpus.
    Validate {
        path: PathBuf,
        #[arg(long)]
        format: Option<CorpusFormat>,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        domain: Option<Domain>,
    },
}

#[derive(Args)]
struct CorpusArg {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(long)]
    domain: Option<Domain>,
}

impl CorpusArg {
    fn load(&self, split: Split) -> Result<DomainCorpus> {
        let format = self.format.unwrap_or_else(|| CorpusFormat::guess(&self.corpus));
        let domain = self.domain.clone().or_else(|| Some(domain_from_path(&self.corpus)));
        let (c, report) = load_corpus(&self.corpus, format, split, domain)
            .with_context(|| format!("loading {}", self.corpus.display()))?;
        log::info!(
            "{}: {} pairs kept ({} read, {} duplicates, {} invalid)",
            self.corpus.display(),
            report.kept,
            report.read,
            report.duplicates,
            report.invalid_lines.len()
        );
        Ok(c)
    }
}

/// Where model responses come from.
#[derive(Args)]
struct BackendArgs {
    /// Model id to use.
    #[arg(long)]
    backend: String,
    /// Backend config (model id -> provider).
    #[arg(long, conflicts_with = "fixtures")]
    backends: Option<PathBuf>,
    /// Replay fixture file serving every model.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl BackendArgs {
    fn staged(&self) -> Result<StagedLlm> {
        let client = build_llm_client(
            self.backends.as_deref(),
            self.fixtures.as_deref(),
            &[&self.backend],
            self.cache_dir.as_deref(),
        )?;
        let client = Arc::new(client);
        let routing = configure_stages(&client, &self.backend, &self.backend)?;
        Ok(StagedLlm::new(client, routing))
    }
}

#[derive(Subcommand)]
enum IndexCmd {
    Build {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K1)]
        k1: f64,
        #[arg(long, default_value_t = DEFAULT_B)]
        b: f64,
    },
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(short, default_value_t = DEFAULT_K)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum TermsCmd {
    /// Extract term pairs from a corpus (or a subset of it) and aggregate.
    Induce {
        #[command(flatten)]
        corpus: CorpusArg,
        /// `all`, or a file with one pair id per line.
        #[arg(long, default_value = "all")]
        subset: String,
        #[command(flatten)]
        llm: BackendArgs,
        #[arg(long)]
        out: PathBuf,
    },
    Lookup {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        token_boundaries: bool,
    },
}

#[derive(Clone, Copy)]
enum GenKind {
    Demos,
    Terms,
}

#[derive(Subcommand)]
enum GenCmd {
    Demos(GenArgs),
    Terms(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    llm: BackendArgs,
    #[arg(long, default_value = "domain")]
    icl: IclMode,
    /// General-domain exemplar file for `--icl general`.
    #[arg(long)]
    general_exemplars: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PromptCmd {
    Render {
        #[arg(long)]
        template: TemplateId,
        /// JSON object of slot values; language slots default to German -> English.
        #[arg(long)]
        slots: String,
        /// Print the content hash after the prompt.
        #[arg(long)]
        hash: bool,
    },
}

#[derive(Subcommand)]
enum DecomposeCmd {
    Run {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        index: PathBuf,
        #[arg(short, default_value_t = DEFAULT_K)]
        k: usize,
        #[command(flatten)]
        llm: BackendArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Run {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "chrf,bleu")]
        metrics: String,
        #[arg(long, default_value = "zero_shot")]
        baseline: String,
        #[arg(long, default_value_t = domt_core::evaluate::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = domt_core::evaluate::DEFAULT_RESAMPLES)]
        resamples: usize,
        /// Also write report.txt / report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Experiment config plus command-line overrides.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Only these domains (repeatable).
    #[arg(long = "domain")]
    domains: Vec<Domain>,
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    icl: Option<IclMode>,
    #[arg(long)]
    generation_model: Option<String>,
    #[arg(long)]
    translation_model: Option<String>,
    #[arg(long)]
    backends: Option<PathBuf>,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Domain exemplar overrides.
    #[arg(long)]
    exemplars: Option<PathBuf>,
    /// General-domain demo-generation exemplars.
    #[arg(long)]
    general_exemplars: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    baseline: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        // Command-line paths are relative to the working directory.
        let abs = |p: &PathBuf| std::path::absolute(p).unwrap_or_else(|_| p.clone());
        if !self.domains.is_empty() {
            c.domains.retain(|d| self.domains.contains(&d.domain));
            if c.domains.is_empty() {
                bail!("none of the requested domains is configured");
            }
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(m) = self.icl {
            c.icl_mode = m;
        }
        if let Some(m) = &self.generation_model {
            c.generation_model = m.clone();
        }
        if let Some(m) = &self.translation_model {
            c.translation_model = m.clone();
        }
        if let Some(p) = &self.backends {
            c.backends = Some(abs(p));
            c.fixtures = None;
        }
        if let Some(p) = &self.fixtures {
            c.fixtures = Some(abs(p));
            c.backends = None;
        }
        if let Some(p) = &self.exemplars {
            c.exemplars = Some(abs(p));
        }
        if let Some(p) = &self.general_exemplars {
            c.general_exemplars = Some(abs(p));
        }
        if let Some(p) = &self.out_dir {
            c.out_dir = abs(p);
        }
        if let Some(p) = &self.cache_dir {
            c.cache_dir = Some(abs(p));
        }
        if self.limit.is_some() {
            c.limit = self.limit;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = &self.metrics {
            c.metrics = m.split(',').map(str::to_string).collect();
        }
        if let Some(b) = &self.baseline {
            c.baseline = b.clone();
        }
        Ok(c)
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(s: &RunSummary) {
    println!("run directory: {}", s.run_dir.display());
    println!("{} records ({} new), {} failures", s.records.len(), s.new_records, s.failures.len());
    for r in &s.reports {
        println!("\n{}", r.to_text());
    }
}

fn reports(
    records: &[domt_core::evaluate::TranslationRecord],
    metrics: &str,
    baseline: &str,
    boot: BootstrapConfig,
) -> Result<Vec<ReportTable>> {
    parse_metrics(metrics)?
        .iter()
        .map(|m| Ok(build_report(records, m, baseline, boot)?))
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let lib = PromptLibrary::builtin();
    match cli.command {
        Command::Corpus(CorpusCmd::Validate {
            path,
            format,
            split,
            domain,
        }) => {
            let format = format.unwrap_or_else(|| CorpusFormat::guess(&path));
            let domain = domain.or_else(|| Some(domain_from_path(&path)));
            let (c, report) = load_corpus(&path, format, split, domain)?;
            let mut per: BTreeMap<String, usize> = BTreeMap::new();
            for p in c.pairs() {
                *per.entry(p.domain.to_string()).or_default() += 1;
            }
            for (d, n) in per {
                println!("{d}\t{split}\t{n}");
            }
            println!(
                "read {}, kept {}, duplicates {}, invalid {}",
                report.read,
                report.kept,
                report.duplicates,
                report.invalid_lines.len()
            );
        }
        Command::Index(IndexCmd::Build { corpus, out, k1, b }) => {
            let c = corpus.load(Split::Train)?;
            let index = Bm25Index::build(&c, Bm25Params { k1, b })?;
            index.save(&out)?;
            println!(
                "{} documents, {} terms, avg length {:.2} -> {}",
                index.doc_count(),
                index.vocabulary_size(),
                index.avg_doc_length(),
                out.display()
            );
        }
        Command::Index(IndexCmd::Query { index, text, k }) => {
            let index = Bm25Index::load(&index)?;
            for r in index.query(&text, k)? {
                println!("{}\t{:.6}\t{}\t{}\t{}", r.rank, r.score, r.pair.id, r.pair.src, r.pair.tgt);
            }
        }
        Command::Terms(TermsCmd::Induce {
            corpus,
            subset,
            llm,
            out,
        }) => {
            let c = corpus.load(Split::Train)?;
            let pairs: Vec<BitextPair> = if subset == "all" {
                c.pairs().to_vec()
            } else {
                let ids: HashSet<String> = fs::read_to_string(&subset)
                    .with_context(|| format!("reading subset {subset}"))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect();
                c.retain_ids(&ids)
            };
            let ex = ExemplarSet::builtin();
            let outcome = induce_dictionary(&lib, &llm.staged()?, c.domain.clone(), &pairs, ex.term_extract(&c.domain)?);
            outcome.dictionary.save(&out)?;
            println!(
                "{} pairs, {} term pairs extracted, {} kept, {} entries -> {}",
                pairs.len(),
                outcome.extracted,
                outcome.kept,
                outcome.dictionary.len(),
                out.display()
            );
            for w in &outcome.warnings {
                log::warn!("{w}");
            }
            if !outcome.failed.is_empty() {
                let path = out.with_extension("failures.json");
                fs::write(&path, outcome.failure_manifest())?;
                log::warn!("{} batches failed; see {}", outcome.failed.len(), path.display());
            }
        }
        Command::Terms(TermsCmd::Lookup {
            dict,
            text,
            token_boundaries,
        }) => {
            let dict = GlobalDictionary::load(&dict)?;
            for m in dict.lookup(&text, LookupOptions { token_boundaries }) {
                println!("{}\t{}\t{}", m.start, m.entry.src_term, m.entry.targets().join(" | "));
            }
        }
        Command::Gen(cmd) => {
            let (kind, args) = match cmd {
                GenCmd::Demos(a) => (GenKind::Demos, a),
                GenCmd::Terms(a) => (GenKind::Terms, a),
            };
            let c = args.corpus.load(Split::Test)?;
            let llm = args.llm.staged()?;
            let mut set = ExemplarSet::builtin();
            if let Some(p) = &args.general_exemplars {
                set.general_demo_gen = ExemplarSet::load_general(p)?;
            }
            let langs = LanguagePair::default();
            let mut failed = 0;
            match kind {
                GenKind::Demos => {
                    let ex = demo_exemplars_for(&set, &c.domain, args.icl)?;
                    let mut out = Vec::new();
                    for p in c.pairs() {
                        match generate_demos(&lib, &llm, p, args.icl, ex, &langs) {
                            Ok(g) => out.push(g),
                            Err(e) => {
                                failed += 1;
                                log::warn!("{}: {e}", p.id);
                            }
                        }
                    }
                    write_jsonl(&args.out, &out)?;
                    println!("{} generated, {failed} failed -> {}", out.len(), args.out.display());
                }
                GenKind::Terms => {
                    let ex = match args.icl {
                        IclMode::None => &[][..],
                        _ => set.term_gen(&c.domain)?,
                    };
                    let mut out = Vec::new();
                    for p in c.pairs() {
                        match generate_terms(&lib, &llm, p, args.icl, ex, &langs) {
                            Ok(g) => out.push(g),
                            Err(e) => {
                                failed += 1;
                                log::warn!("{}: {e}", p.id);
                            }
                        }
                    }
                    write_jsonl(&args.out, &out)?;
                    println!("{} generated, {failed} failed -> {}", out.len(), args.out.display());
                }
            }
        }
        Command::Prompt(PromptCmd::Render { template, slots, hash }) => {
            let given: BTreeMap<String, String> = serde_json::from_str(&slots).context("--slots must be a JSON object of strings")?;
            // Language slots default to German -> English.
            let mut slots = LanguagePair::default().slots();
            slots.extend(given);
            let p = lib.render(template, &slots)?;
            print!("{}", p.text());
            if hash {
                println!("\n{}", p.content_hash());
            } else {
                println!();
            }
        }
        Command::Decompose(DecomposeCmd::Run {
            corpus,
            index,
            k,
            llm,
            out,
        }) => {
            let c = corpus.load(Split::Test)?;
            let index = Bm25Index::load(&index)?;
            let ex = ExemplarSet::builtin();
            let outcome = run_decomposition(&lib, &llm.staged()?, c.pairs(), &index, k, ex.term_extract(&c.domain)?);
            fs::create_dir_all(&out)?;
            let local: Vec<_> = outcome.instances.iter().map(|i| &i.local_terms).collect();
            let style: Vec<_> = outcome
                .instances
                .iter()
                .map(|i| serde_json::json!({"source_id": i.source_id, "style_templates": i.style_templates}))
                .collect();
            write_jsonl(&out.join("local_terms.jsonl"), &local)?;
            write_jsonl(&out.join("style_templates.jsonl"), &style)?;
            let failed: Vec<_> = outcome
                .failed
                .iter()
                .map(|(id, e)| serde_json::json!({"source_id": id, "error": e.to_string()}))
                .collect();
            write_jsonl(&out.join("failures.jsonl"), &failed)?;
            println!(
                "{} instances decomposed, {} failed -> {}",
                outcome.instances.len(),
                outcome.failed.len(),
                out.display()
            );
        }
        Command::Translate { setting, run } => {
            let mut cfg = run.config()?;
            cfg.settings = vec![setting];
            if setting != Setting::ZeroShot && cfg.baseline == Setting::ZeroShot.as_str() {
                // A single-setting run has no zero-shot row to compare against.
                cfg.baseline = setting.as_str().into();
            }
            print_summary(&run_experiment(&cfg)?);
        }
        Command::Run { run } => print_summary(&run_experiment(&run.config()?)?),
        Command::Ablation { mode, run } => print_summary(&ablation(&run.config()?, mode)?),
        Command::Eval(EvalCmd::Run {
            records,
            metrics,
            baseline,
            seed,
            resamples,
            out,
        }) => {
            let recs = load_records(&records)?;
            let boot = BootstrapConfig {
                seed,
                resamples,
                ..BootstrapConfig::default()
            };
            let tables = reports(&recs, &metrics, &baseline, boot)?;
            for t in &tables {
                println!("{}", t.to_text());
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_reports(&dir, &tables)?;
            }
        }
        Command::Report { run, metrics } => {
            let manifest: RunManifest = serde_json::from_str(
                &fs::read_to_string(run.join("manifest.json")).with_context(|| format!("{} is not a run directory", run.display()))?,
            )?;
            let cfg = manifest.config;
            let recs = load_records(&run.join("records.jsonl"))?;
            let metrics = metrics.unwrap_or_else(|| cfg.metrics.join(","));
            let boot = BootstrapConfig {
                seed: cfg.seed,
                resamples: cfg.resamples,
                ..BootstrapConfig::default()
            };
            for t in reports(&recs, &metrics, &cfg.baseline, boot)? {
                println!("{}", t.to_text());
            }
            if !manifest.failures.is_empty() {
                println!("{} failed instances listed in manifest.json", manifest.failures.len());
            }
        }
    }
    Ok(())
}
