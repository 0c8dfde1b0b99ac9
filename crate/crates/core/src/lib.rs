//! Domain knowledge for LLM-based machine translation: BM25 demonstration
//! retrieval, terminology induction and lookup, LLM-generated demos and
//! terms, style/terminology decomposition, prompting and evaluation.

pub mod corpus;
pub mod json_repair;
pub mod text;
pub mod retrieval;
pub mod prompting;
pub mod exemplars;
pub mod llm;
pub mod terminology;
pub mod generation;
pub mod decompose;
pub mod evaluate;
pub mod experiment;

pub use corpus::{BitextPair, Domain, DomainCorpus, Split};
pub use evaluate::{MetricReport, ReportTable, TranslationRecord};
pub use experiment::{run_experiment, ExperimentConfig, RunSummary};
pub use llm::{LlmClient, LlmRequest, LlmResponse, Stage, StagedLlm};
pub use prompting::{LanguagePair, PromptLibrary, RenderedPrompt, Setting, TemplateId};
pub use retrieval::{Bm25Index, Bm25Params, RetrievalResult};
pub use terminology::{GlobalDictionary, TermEntry, TermPair};
