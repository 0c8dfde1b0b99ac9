//! End-to-end runs: knowledge acquisition, prompt rendering, completion,
//! parsing and scoring for each requested setting, written to
//! `runs/<config-hash>/`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, BitextPair, CorpusError, CorpusFormat, Domain, Split};
use crate::decompose::{decompose_instance, InstanceDecomposition, LocalTerminology};
use crate::evaluate::{build_report, parse_metrics, BootstrapConfig, EvalError, ReportTable, TranslationRecord};
use crate::exemplars::{
    render_term_translation_examples, static_demos, DemoGenExemplar, DemoPair, ExemplarError, ExemplarSet,
    TermRecord,
};
use crate::generation::{demo_exemplars_for, generate_demos, generate_terms, GenError, IclMode};
use crate::llm::{
    configure_stages, AuditEntry, Backend, BackendsConfig, LlmClient, LlmError, ReplayProvider, ResponseCache,
    RetryPolicy, Stage, StagedLlm,
};
use crate::prompting::format::{demo_examples, terminology_list};
use crate::prompting::{
    parse_translation, sha256_hex, LanguagePair, ParseOptions, PromptError, PromptLibrary, RenderedPrompt, Setting,
};
use crate::retrieval::{Bm25Index, RetrievalError};
use crate::terminology::{GlobalDictionary, LookupOptions, TermError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("setting {setting} for domain {domain} needs {what}")]
    Prerequisite {
        setting: Setting,
        domain: Domain,
        what: &'static str,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Terms(#[from] TermError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Exemplars(#[from] ExemplarError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Inputs for one domain. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainInputs {
    pub domain: Domain,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    NoIcl,
    GeneralIcl,
    /// The domain generation exemplars' six pairs used directly as static
    /// translation demonstrations; nothing is generated.
    TranslationIcl,
    GenerateDemos,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::NoIcl,
        AblationMode::GeneralIcl,
        AblationMode::TranslationIcl,
        AblationMode::GenerateDemos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::NoIcl => "no_icl",
            AblationMode::GeneralIcl => "general_icl",
            AblationMode::TranslationIcl => "translation_icl",
            AblationMode::GenerateDemos => "generate_demos",
        }
    }

    fn icl_mode(self) -> IclMode {
        match self {
            AblationMode::NoIcl => IclMode::None,
            AblationMode::GeneralIcl => IclMode::General5x1,
            AblationMode::TranslationIcl | AblationMode::GenerateDemos => IclMode::Domain2x3,
        }
    }
}

impl FromStr for AblationMode {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown ablation mode {s:?}")))
    }
}

fn default_k() -> usize {
    3
}
fn default_icl() -> IclMode {
    IclMode::Domain2x3
}
fn default_metrics() -> Vec<String> {
    vec!["chrf".into(), "bleu".into()]
}
fn default_baseline() -> String {
    Setting::ZeroShot.as_str().into()
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_seed() -> u64 {
    crate::evaluate::DEFAULT_SEED
}
fn default_resamples() -> usize {
    crate::evaluate::DEFAULT_RESAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domains: Vec<DomainInputs>,
    pub settings: Vec<Setting>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_icl")]
    pub icl_mode: IclMode,
    pub generation_model: String,
    pub translation_model: String,
    /// Backend config file (model id -> provider).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends: Option<PathBuf>,
    /// Replay fixtures; when set, every model is served from this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    /// Replacement exemplar directory (same layout as the built-in one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    /// Replacement general-domain generation exemplars.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub general_exemplars: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default)]
    pub lookup_token_boundaries: bool,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default = "default_baseline")]
    pub baseline: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationMode>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Digest of everything that affects results; output and cache
    /// locations are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("out_dir");
            o.remove("cache_dir");
        }
        sha256_hex(v.to_string().as_bytes())[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir).join(self.hash())
    }

    fn label(&self, setting: Setting) -> String {
        match self.ablation {
            Some(m) if setting == Setting::GeneratedDemos => format!("{}/{}", setting.as_str(), m.as_str()),
            _ => setting.as_str().to_string(),
        }
    }

    fn effective_icl(&self) -> IclMode {
        self.ablation.map_or(self.icl_mode, AblationMode::icl_mode)
    }

    /// Checks everything that can be checked before any request is sent.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.k == 0 {
            return Err(ExperimentError::Config("k must be at least 1".into()));
        }
        if self.settings.is_empty() {
            return Err(ExperimentError::Config("no settings requested".into()));
        }
        if self.domains.is_empty() {
            return Err(ExperimentError::Config("no domains configured".into()));
        }
        parse_metrics(&self.metrics.join(","))?;
        let exists = |p: &Path, what: &str| {
            let r = self.resolve(p);
            if r.exists() {
                Ok(())
            } else {
                Err(ExperimentError::Config(format!("{what} {} does not exist", r.display())))
            }
        };
        for p in [&self.backends, &self.fixtures, &self.exemplars, &self.general_exemplars]
            .into_iter()
            .flatten()
        {
            exists(p, "path")?;
        }
        for d in &self.domains {
            exists(&d.test, "test corpus")?;
            for &s in &self.settings {
                let need_index = matches!(s, Setting::RetrievedDemos | Setting::LocalTerms | Setting::StyleDemos);
                if need_index {
                    let p = d.index.as_ref().ok_or(ExperimentError::Prerequisite {
                        setting: s,
                        domain: d.domain.clone(),
                        what: "an index path",
                    })?;
                    exists(p, "index")?;
                }
                if s == Setting::RetrievedTerms {
                    let p = d.dictionary.as_ref().ok_or(ExperimentError::Prerequisite {
                        setting: s,
                        domain: d.domain.clone(),
                        what: "a terminology dictionary",
                    })?;
                    exists(p, "dictionary")?;
                }
            }
        }
        Ok(())
    }
}

/// What a translation prompt is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Knowledge {
    None,
    Demos(Vec<DemoPair>),
    Terms(Vec<TermRecord>),
    /// Demonstrations with terms masked.
    Style(Vec<DemoPair>),
}

pub fn translation_prompt(
    lib: &PromptLibrary,
    setting: Setting,
    src: &str,
    knowledge: &Knowledge,
    exemplars: &ExemplarSet,
    domain: &Domain,
    langs: &LanguagePair,
) -> Result<RenderedPrompt, ExperimentError> {
    let mut slots = langs.slots();
    slots.insert("source_text".into(), src.to_string());
    let pairs = |d: &[DemoPair]| demo_examples(d.iter().map(|p| (p.src.as_str(), p.tgt.as_str())), langs);
    match knowledge {
        Knowledge::None => {}
        Knowledge::Demos(d) => {
            slots.insert("demo_examples".into(), pairs(d));
        }
        Knowledge::Style(d) => {
            slots.insert("few_shot_examples".into(), pairs(d));
        }
        Knowledge::Terms(t) => {
            let examples = exemplars.term_translation(domain)?;
            slots.insert("examples".into(), render_term_translation_examples(examples, langs));
            slots.insert(
                "terminology".into(),
                terminology_list(t.iter().map(|r| (r.src.as_str(), r.tgts.as_slice()))),
            );
        }
    }
    Ok(lib.render(setting.template(), &slots)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub domain: Domain,
    pub label: String,
    pub source_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub records: usize,
    pub new_records: usize,
    pub failures: Vec<Failure>,
    pub artifacts: Vec<String>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub records: Vec<TranslationRecord>,
    pub new_records: usize,
    pub failures: Vec<Failure>,
    pub reports: Vec<ReportTable>,
    pub audit: Vec<AuditEntry>,
}

/// Builds a client serving `models`: from a replay fixture file when given,
/// otherwise from a backend config. Paths are used as given.
pub fn build_llm_client(
    backends: Option<&Path>,
    fixtures: Option<&Path>,
    models: &[&str],
    cache_dir: Option<&Path>,
) -> Result<LlmClient, ExperimentError> {
    let retry = RetryPolicy::default();
    let mut client = if let Some(fx) = fixtures {
        let replay = Arc::new(ReplayProvider::load(fx)?);
        let mut c = LlmClient::new(retry);
        for m in models {
            c.add_backend(m.to_string(), Backend::new(replay.clone()));
        }
        c
    } else {
        let path = backends.ok_or_else(|| ExperimentError::Config("either backends or fixtures must be given".into()))?;
        let cfg = BackendsConfig::load(path)?;
        LlmClient::from_config(&cfg, path.parent().unwrap_or(Path::new(".")), retry)?
    };
    if let Some(dir) = cache_dir {
        client = client.with_cache(ResponseCache::open(dir)?);
    }
    for m in models {
        if !client.has_model(m) {
            return Err(ExperimentError::Config(format!("no backend configured for model {m:?}")));
        }
    }
    Ok(client)
}

fn build_client(cfg: &ExperimentConfig) -> Result<LlmClient, ExperimentError> {
    let resolve = |p: &Option<PathBuf>| p.as_ref().map(|p| cfg.resolve(p));
    build_llm_client(
        resolve(&cfg.backends).as_deref(),
        resolve(&cfg.fixtures).as_deref(),
        &[&cfg.generation_model, &cfg.translation_model],
        resolve(&cfg.cache_dir).as_deref(),
    )
}

fn load_exemplars(cfg: &ExperimentConfig) -> Result<(ExemplarSet, Vec<DemoGenExemplar>), ExperimentError> {
    let set = match &cfg.exemplars {
        Some(dir) => ExemplarSet::load_dir(&cfg.resolve(dir))?,
        None => ExemplarSet::builtin(),
    };
    let general = match &cfg.general_exemplars {
        Some(p) => ExemplarSet::load_general(&cfg.resolve(p))?,
        None => set.general_demo_gen.clone(),
    };
    if cfg.effective_icl() == IclMode::General5x1 && general.is_empty() {
        return Err(ExperimentError::Config("general-domain exemplars are required for general_5x1".into()));
    }
    Ok((set, general))
}

fn read_records(path: &Path) -> Result<Vec<TranslationRecord>, ExperimentError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ExperimentError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<TranslationRecord>, ExperimentError> {
    read_records(path)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), ExperimentError> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it).expect("artifact serializes"));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Serialize)]
struct RetrievedDemosArtifact<'a> {
    source_id: &'a str,
    demos: Vec<(&'a str, f64)>,
}

#[derive(Serialize)]
struct TermsArtifact<'a> {
    source_id: &'a str,
    terms: &'a [TermRecord],
}

#[derive(Serialize)]
struct LocalTermsArtifact<'a> {
    source_id: &'a str,
    local_terms: &'a LocalTerminology,
}

#[derive(Serialize)]
struct StyleArtifact<'a> {
    source_id: &'a str,
    style_templates: &'a [crate::decompose::StyleTemplate],
}

/// Everything a domain's settings need, computed once per domain.
struct DomainContext<'a> {
    cfg: &'a ExperimentConfig,
    lib: &'a PromptLibrary,
    llm: &'a StagedLlm,
    exemplars: &'a ExemplarSet,
    general: &'a [DemoGenExemplar],
    langs: LanguagePair,
    domain: Domain,
    test: Vec<BitextPair>,
    index: Option<Bm25Index>,
    dictionary: Option<GlobalDictionary>,
    artifacts_dir: PathBuf,
    artifacts: Vec<String>,
    failures: Vec<Failure>,
    log: Vec<String>,
}

type PerInstance<T> = BTreeMap<String, Result<T, String>>;

impl DomainContext<'_> {
    fn artifact_id(&self, kind: &str, source_id: &str) -> String {
        format!("{}/{kind}#{source_id}", self.domain)
    }

    fn write_artifact<T: Serialize>(&mut self, kind: &str, items: Vec<T>) -> Result<(), ExperimentError> {
        let rel = format!("{}/{kind}.jsonl", self.domain);
        write_jsonl(&self.artifacts_dir.join(&rel), items)?;
        self.artifacts.push(format!("artifacts/{rel}"));
        Ok(())
    }

    fn retrieved_demos(&mut self) -> Result<PerInstance<Knowledge>, ExperimentError> {
        let index = self.index.as_ref().expect("validated");
        let k = self.cfg.k;
        let mut out = BTreeMap::new();
        let mut art = Vec::new();
        let hits: Vec<_> = self.test.iter().map(|t| index.query(&t.src, k)).collect::<Result<_, _>>()?;
        for (t, h) in self.test.iter().zip(&hits) {
            art.push(RetrievedDemosArtifact {
                source_id: &t.id,
                demos: h.iter().map(|r| (r.pair.id.as_str(), r.score)).collect(),
            });
            let demos = h
                .iter()
                .map(|r| DemoPair {
                    src: r.pair.src.clone(),
                    tgt: r.pair.tgt.clone(),
                })
                .collect();
            out.insert(t.id.clone(), Ok(Knowledge::Demos(demos)));
        }
        let art: Vec<serde_json::Value> = art.into_iter().map(|a| serde_json::to_value(a).unwrap()).collect();
        self.write_artifact("retrieved_demos", art)?;
        Ok(out)
    }

    fn retrieved_terms(&mut self) -> Result<PerInstance<Knowledge>, ExperimentError> {
        let dict = self.dictionary.as_ref().expect("validated");
        let opts = LookupOptions {
            token_boundaries: self.cfg.lookup_token_boundaries,
        };
        let mut out = BTreeMap::new();
        let mut art = Vec::new();
        for t in &self.test {
            let terms: Vec<TermRecord> = dict.lookup(&t.src, opts).iter().map(|m| m.entry.to_record()).collect();
            art.push(serde_json::to_value(TermsArtifact { source_id: &t.id, terms: &terms }).unwrap());
            out.insert(t.id.clone(), Ok(Knowledge::Terms(terms)));
        }
        self.write_artifact("retrieved_terms", art)?;
        Ok(out)
    }

    fn generated_demos(&mut self) -> Result<PerInstance<Knowledge>, ExperimentError> {
        let mode = self.cfg.effective_icl();
        if self.cfg.ablation == Some(AblationMode::TranslationIcl) {
            let demos = static_demos(self.exemplars.demo_gen(&self.domain)?);
            self.log.push(format!("{}: {} static translation demos", self.domain, demos.len()));
            return Ok(self
                .test
                .iter()
                .map(|t| (t.id.clone(), Ok(Knowledge::Demos(demos.clone()))))
                .collect());
        }
        let exemplars: &[DemoGenExemplar] = match mode {
            IclMode::General5x1 => self.general,
            _ => demo_exemplars_for(self.exemplars, &self.domain, mode)?,
        };
        let results: Vec<_> = self
            .test
            .par_iter()
            .map(|t| generate_demos(self.lib, self.llm, t, mode, exemplars, &self.langs))
            .collect();
        let mut out = BTreeMap::new();
        let mut art = Vec::new();
        for (t, r) in self.test.iter().zip(results) {
            match r {
                Ok(g) => {
                    out.insert(t.id.clone(), Ok(Knowledge::Demos(g.pairs.clone())));
                    art.push(g);
                }
                Err(e) => {
                    out.insert(t.id.clone(), Err(format!("demo generation: {e}")));
                }
            }
        }
        self.write_artifact("generated_demos", art)?;
        Ok(out)
    }

    fn generated_terms(&mut self) -> Result<PerInstance<Knowledge>, ExperimentError> {
        let mode = match self.cfg.effective_icl() {
            IclMode::None => IclMode::None,
            _ => IclMode::Domain2x3,
        };
        let exemplars = match mode {
            IclMode::None => &[][..],
            _ => self.exemplars.term_gen(&self.domain)?,
        };
        let results: Vec<_> = self
            .test
            .par_iter()
            .map(|t| generate_terms(self.lib, self.llm, t, mode, exemplars, &self.langs))
            .collect();
        let mut out = BTreeMap::new();
        let mut art = Vec::new();
        for (t, r) in self.test.iter().zip(results) {
            match r {
                Ok(g) => {
                    out.insert(t.id.clone(), Ok(Knowledge::Terms(g.terms.clone())));
                    art.push(g);
                }
                Err(e) => {
                    out.insert(t.id.clone(), Err(format!("term generation: {e}")));
                }
            }
        }
        self.write_artifact("generated_terms", art)?;
        Ok(out)
    }

    fn decomposition(&mut self) -> Result<PerInstance<InstanceDecomposition>, ExperimentError> {
        let index = self.index.as_ref().expect("validated");
        let ex = self.exemplars.term_extract(&self.domain)?;
        let k = self.cfg.k;
        let results: Vec<Result<InstanceDecomposition, String>> = self
            .test
            .par_iter()
            .map(|t| {
                let demos: Vec<BitextPair> = index
                    .query(&t.src, k)
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|r| r.pair)
                    .collect();
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
                decompose_instance(self.lib, self.llm, t, &demos, ex).map_err(|e| format!("decomposition: {e}"))
            })
            .collect();
        let out: PerInstance<InstanceDecomposition> =
            self.test.iter().map(|t| t.id.clone()).zip(results).collect();
        let ok: Vec<&InstanceDecomposition> = out.values().filter_map(|r| r.as_ref().ok()).collect();
        let local: Vec<serde_json::Value> = ok
            .iter()
            .map(|d| {
                serde_json::to_value(LocalTermsArtifact {
                    source_id: &d.source_id,
                    local_terms: &d.local_terms,
                })
                .unwrap()
            })
            .collect();
        let style: Vec<serde_json::Value> = ok
            .iter()
            .map(|d| {
                serde_json::to_value(StyleArtifact {
                    source_id: &d.source_id,
                    style_templates: &d.style_templates,
                })
                .unwrap()
            })
            .collect();
        self.write_artifact("local_terms", local)?;
        self.write_artifact("style_templates", style)?;
        Ok(out)
    }

    fn knowledge_for(
        &mut self,
        setting: Setting,
        decomposition: &mut Option<PerInstance<InstanceDecomposition>>,
    ) -> Result<PerInstance<Knowledge>, ExperimentError> {
        let from_decomp = |d: &PerInstance<InstanceDecomposition>, f: fn(&InstanceDecomposition) -> Knowledge| {
            d.iter()
                .map(|(id, r)| (id.clone(), r.as_ref().map(f).map_err(Clone::clone)))
                .collect()
        };
        Ok(match setting {
            Setting::ZeroShot => self.test.iter().map(|t| (t.id.clone(), Ok(Knowledge::None))).collect(),
            Setting::RetrievedDemos => self.retrieved_demos()?,
            Setting::RetrievedTerms => self.retrieved_terms()?,
            Setting::GeneratedDemos => self.generated_demos()?,
            Setting::GeneratedTerms => self.generated_terms()?,
            Setting::LocalTerms | Setting::StyleDemos => {
                if decomposition.is_none() {
                    *decomposition = Some(self.decomposition()?);
                }
                let d = decomposition.as_ref().expect("just computed");
                if setting == Setting::LocalTerms {
                    from_decomp(d, |x| Knowledge::Terms(x.local_terms.records()))
                } else {
                    from_decomp(d, |x| {
                        Knowledge::Style(
                            x.style_templates
                                .iter()
                                .map(|s| DemoPair {
                                    src: s.src_masked.clone(),
                                    tgt: s.tgt_masked.clone(),
                                })
                                .collect(),
                        )
                    })
                }
            }
        })
    }

    fn knowledge_ids(&self, setting: Setting, source_id: &str) -> Vec<String> {
        let kind = match setting {
            Setting::ZeroShot => return Vec::new(),
            Setting::GeneratedDemos if self.cfg.ablation == Some(AblationMode::TranslationIcl) => {
                return vec![format!("{}/static_demos", self.domain)]
            }
            Setting::RetrievedDemos => "retrieved_demos",
            Setting::RetrievedTerms => "retrieved_terms",
            Setting::GeneratedDemos => "generated_demos",
            Setting::GeneratedTerms => "generated_terms",
            Setting::LocalTerms => "local_terms",
            Setting::StyleDemos => "style_templates",
        };
        vec![self.artifact_id(kind, source_id)]
    }

    fn translate(
        &self,
        setting: Setting,
        label: &str,
        pair: &BitextPair,
        knowledge: &Knowledge,
    ) -> Result<TranslationRecord, String> {
        let prompt = translation_prompt(self.lib, setting, &pair.src, knowledge, self.exemplars, &self.domain, &self.langs)
            .map_err(|e| e.to_string())?;
        let resp = self
            .llm
            .complete(&prompt, Stage::Translation)
            .map_err(|e| format!("translation: {e}"))?;
        let hyp = parse_translation(&resp.text, setting.template(), &self.langs, ParseOptions::default())
            .map_err(|e| format!("parse: {e}"))?;
        Ok(TranslationRecord {
            source_id: pair.id.clone(),
            domain: self.domain.clone(),
            setting,
            label: label.to_string(),
            src: pair.src.clone(),
            hyp,
            reference: pair.tgt.clone(),
            raw: resp.text,
            prompt_hash: prompt.content_hash().to_string(),
            knowledge: self.knowledge_ids(setting, &pair.id),
        })
    }
}

/// Runs every configured (domain, setting) and writes the run directory.
/// Records already present in `records.jsonl` are kept and not recomputed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    run_experiment_with(cfg, build_client(cfg)?)
}

/// As [`run_experiment`], with the model backends supplied by the caller
/// instead of the config.
pub fn run_experiment_with(cfg: &ExperimentConfig, client: LlmClient) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    let (exemplars, general) = load_exemplars(cfg)?;
    let client = Arc::new(client);
    let routing = configure_stages(&client, &cfg.generation_model, &cfg.translation_model)?;
    let llm = StagedLlm::new(client.clone(), routing);
    let lib = PromptLibrary::builtin();
    let metrics = parse_metrics(&cfg.metrics.join(","))?;

    let run_dir = cfg.run_dir();
    let artifacts_dir = run_dir.join("artifacts");
    fs::create_dir_all(&artifacts_dir).map_err(io_err(&artifacts_dir))?;
    let records_path = run_dir.join("records.jsonl");
    let mut records = read_records(&records_path)?;
    let done: HashSet<(Domain, String, String)> = records
        .iter()
        .map(|r| (r.domain.clone(), r.label.clone(), r.source_id.clone()))
        .collect();

    let mut failures = Vec::new();
    let mut artifacts = Vec::new();
    let mut log = vec![format!("config {}", cfg.hash())];
    let mut new_records = Vec::new();

    for inputs in &cfg.domains {
        let format = match &inputs.test_format {
            Some(f) => f.parse()?,
            None => CorpusFormat::guess(&inputs.test),
        };
        let (test_corpus, report) =
            load_corpus(&cfg.resolve(&inputs.test), format, Split::Test, Some(inputs.domain.clone()))?;
        let mut test = test_corpus.pairs().to_vec();
        if let Some(n) = cfg.limit {
            test.truncate(n);
        }
        log.push(format!(
            "{}: {} test pairs ({} read, {} duplicates)",
            inputs.domain,
            test.len(),
            report.read,
            report.duplicates
        ));
        let needs_index = cfg
            .settings
            .iter()
            .any(|s| matches!(s, Setting::RetrievedDemos | Setting::LocalTerms | Setting::StyleDemos));
        let index = match (&inputs.index, needs_index) {
            (Some(p), true) => Some(Bm25Index::load(&cfg.resolve(p))?),
            _ => None,
        };
        let dictionary = match (&inputs.dictionary, cfg.settings.contains(&Setting::RetrievedTerms)) {
            (Some(p), true) => Some(GlobalDictionary::load(&cfg.resolve(p))?),
            _ => None,
        };
        let mut ctx = DomainContext {
            cfg,
            lib: &lib,
            llm: &llm,
            exemplars: &exemplars,
            general: &general,
            langs: LanguagePair::default(),
            domain: inputs.domain.clone(),
            test,
            index,
            dictionary,
            artifacts_dir: artifacts_dir.clone(),
            artifacts: Vec::new(),
            failures: Vec::new(),
            log: Vec::new(),
        };
        let mut decomposition = None;
        let mut settings = cfg.settings.clone();
        settings.sort();
        settings.dedup();
        for setting in settings {
            let label = cfg.label(setting);
            let knowledge = ctx.knowledge_for(setting, &mut decomposition)?;
            let todo: Vec<&BitextPair> = ctx
                .test
                .iter()
                .filter(|t| !done.contains(&(ctx.domain.clone(), label.clone(), t.id.clone())))
                .collect();
            let results: Vec<Result<TranslationRecord, String>> = todo
                .par_iter()
                .map(|t| match &knowledge[&t.id] {
                    Ok(k) => ctx.translate(setting, &label, t, k),
                    Err(e) => Err(e.clone()),
                })
                .collect();
            let mut ok = 0;
            for (t, r) in todo.iter().zip(results) {
                match r {
                    Ok(rec) => {
                        ok += 1;
                        new_records.push(rec);
                    }
                    Err(error) => ctx.failures.push(Failure {
                        domain: ctx.domain.clone(),
                        label: label.clone(),
                        source_id: t.id.clone(),
                        error,
                    }),
                }
            }
            ctx.log.push(format!(
                "{}/{label}: {ok} new records, {} skipped as done",
                ctx.domain,
                ctx.test.len() - todo.len()
            ));
        }
        failures.append(&mut ctx.failures);
        artifacts.append(&mut ctx.artifacts);
        log.append(&mut ctx.log);
    }

    if !new_records.is_empty() {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&records_path)
            .map_err(io_err(&records_path))?;
        let mut buf = String::new();
        for r in &new_records {
            buf.push_str(&serde_json::to_string(r).expect("record serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(io_err(&records_path))?;
    }
    let n_new = new_records.len();
    records.extend(new_records);

    let boot = BootstrapConfig {
        resamples: cfg.resamples,
        seed: cfg.seed,
        alpha: crate::evaluate::DEFAULT_ALPHA,
    };
    let mut reports = Vec::new();
    if !records.is_empty() {
        for m in &metrics {
            reports.push(build_report(&records, m, &cfg.baseline, boot)?);
        }
    }
    write_reports(&run_dir, &reports)?;

    artifacts.sort();
    artifacts.dedup();
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        records: records.len(),
        new_records: n_new,
        failures: failures.clone(),
        artifacts,
    };
    let manifest_path = run_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(io_err(&manifest_path))?;

    for f in &failures {
        log.push(format!("failed {}/{} {}: {}", f.domain, f.label, f.source_id, f.error));
    }
    let mut audit = client.audit();
    audit.sort_by(|a, b| (a.stage, &a.model_id, &a.cache_key).cmp(&(b.stage, &b.model_id, &b.cache_key)));
    let mut by_stage: BTreeMap<(Stage, String), usize> = BTreeMap::new();
    for a in &audit {
        *by_stage.entry((a.stage, a.model_id.clone())).or_insert(0) += 1;
    }
    for ((stage, model), n) in by_stage {
        log.push(format!("requests stage={} model={model}: {n}", stage.as_str()));
    }
    let log_path = run_dir.join("log");
    fs::write(&log_path, log.join("\n") + "\n").map_err(io_err(&log_path))?;
    write_jsonl(&run_dir.join("audit.jsonl"), &audit)?;

    Ok(RunSummary {
        run_dir,
        records,
        new_records: n_new,
        failures,
        reports,
        audit,
    })
}

pub fn write_reports(dir: &Path, reports: &[ReportTable]) -> Result<(), ExperimentError> {
    let text: Vec<String> = reports.iter().map(ReportTable::to_text).collect();
    let txt = dir.join("report.txt");
    fs::write(&txt, text.join("\n")).map_err(io_err(&txt))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(reports).expect("report serializes")).map_err(io_err(&json))
}

/// Runs one ablation row: zero-shot plus generated demos under `mode`.
pub fn ablation(cfg: &ExperimentConfig, mode: AblationMode) -> Result<RunSummary, ExperimentError> {
    let mut c = cfg.clone();
    c.ablation = Some(mode);
    c.settings = vec![Setting::ZeroShot, Setting::GeneratedDemos];
    run_experiment(&c)
}

/// Distinct labels in a record set, in table order.
pub fn labels(records: &[TranslationRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.label.clone()).collect()
}
