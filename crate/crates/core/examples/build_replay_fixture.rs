//! Regenerates `tests/fixtures/replay/`: three small synthetic domains, their
//! indexes and dictionaries, an experiment config, and the recorded stub
//! responses that replay runs are served from.
//!
//! The stub model translates with a phrase lexicon. Domain terms come out
//! right only when a correct rendering appears earlier in the prompt (a
//! demonstration, a dictionary entry); otherwise it falls back to a naive
//! literal rendering.
//!
//!     cargo run -p domt-core --example build_replay_fixture

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use domt_core::corpus::{BitextPair, Domain, DomainCorpus, Split};
use domt_core::exemplars::ExemplarSet;
use domt_core::experiment::{run_experiment, run_experiment_with, ExperimentConfig};
use domt_core::llm::{
    configure_stages, write_fixtures, Backend, FnProvider, LlmClient, RecordingProvider, RetryPolicy, StagedLlm,
};
use domt_core::prompting::{sha256_hex, PromptLibrary};
use domt_core::retrieval::{Bm25Index, Bm25Params};
use domt_core::terminology::induce_dictionary;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GEN_MODEL: &str = "stub-gen";
const MT_MODEL: &str = "stub-mt";
const TRAIN_PER_DOMAIN: usize = 45;

struct Term {
    de: &'static str,
    en: &'static [&'static str],
    naive: &'static str,
}

const fn t(de: &'static str, en: &'static [&'static str], naive: &'static str) -> Term {
    Term { de, en, naive }
}

const LAW_TERMS: &[Term] = &[
    t(
        "einleitung des verfahrens",
        &["initiation of the proceeding", "opening of the proceedings"],
        "introduction of the method",
    ),
    t("richtlinie", &["directive"], "guideline"),
    t("mitgliedstaaten", &["member states"], "member countries"),
    t("verordnung", &["regulation"], "ordinance"),
    t("kommission", &["commission"], "committee"),
    t("beihilfe", &["state aid"], "assistance"),
    t("gerichtshof", &["court of justice"], "court yard"),
    t("rechtsmittel", &["appeal"], "legal remedy"),
];

const MEDICAL_TERMS: &[Term] = &[
    t("filmtabletten", &["film-coated tablets"], "film tablets"),
    t("nebenwirkungen", &["side effects"], "secondary actions"),
    t("packungsbeilage", &["package leaflet"], "pack insert"),
    t("arzneimittel", &["medicinal product"], "drug agent"),
    t("niereninsuffizienz", &["renal impairment"], "kidney weakness"),
    t("dosisanpassung", &["dose adjustment"], "dosage fitting"),
    t("leberfunktion", &["hepatic function"], "liver working"),
];

const KORAN_TERMS: &[Term] = &[
    t("schrift", &["Book"], "writing"),
    t("rechtleitung", &["guidance"], "right direction"),
    t("peinigung", &["chastisement"], "torment"),
    t("gesandten", &["apostles"], "envoys"),
    t("allbarmherzige", &["All-compassionate"], "all merciful one"),
    t("lohn", &["guerdon"], "wage"),
    t("irrtum", &["error"], "mistake"),
];

const GENERAL: &[(&str, &str)] = &[
    ("die", "the"),
    ("der", "the"),
    ("das", "the"),
    ("gilt für", "applies to"),
    ("alle", "all"),
    ("nach", "under"),
    ("sind", "are"),
    ("ist", "is"),
    ("verpflichtet", "obliged"),
    ("wird von der", "is examined by the"),
    ("geprüft", "without delay"),
    ("gemäß", "pursuant to"),
    ("eine", "a"),
    ("erforderlich", "required"),
    ("und", "and"),
    ("vereinbar", "compatible"),
    ("in der", "in the"),
    ("beschrieben", "described"),
    ("bei", "in case of"),
    ("ohne", "without"),
    ("anzuwenden", "to be used"),
    ("des", "of the"),
    ("werden", "are"),
    ("überwacht", "monitored"),
    ("sag", "say"),
    ("wer", "who"),
    ("hat", "has"),
    ("hinabgesandt", "sent down"),
    ("unser herr", "our Lord"),
    ("wahrlich", "truly"),
    ("sie", "they"),
    ("ihren", "their"),
    ("empfangen", "receive"),
    ("über", "upon"),
    ("kommt", "comes"),
    ("von", "from"),
    ("im", "in"),
    ("mit", "with"),
];

fn domain_terms(d: &Domain) -> &'static [Term] {
    match d {
        Domain::Law => LAW_TERMS,
        Domain::Medical => MEDICAL_TERMS,
        _ => KORAN_TERMS,
    }
}

fn frames(d: &Domain) -> &'static [&'static str] {
    match d {
        Domain::Law => &[
            "die {0} gilt für alle {1}",
            "nach der {0} sind die {1} verpflichtet",
            "die {0} wird von der {1} geprüft",
            "gemäß der {0} ist eine {1} erforderlich",
            "die {1} und die {0} sind vereinbar",
        ],
        Domain::Medical => &[
            "die {0} sind in der {1} beschrieben",
            "bei {0} ist eine {1} erforderlich",
            "das {0} ist ohne {1} anzuwenden",
            "die {1} des {0} werden überwacht",
        ],
        _ => &[
            "sag wer hat die {0} hinabgesandt und die {1}",
            "unser herr ist wahrlich {0} und {1}",
            "sie werden ihren {0} im {1} empfangen",
            "über sie kommt die {0} von {1}",
        ],
    }
}

fn all_terms() -> impl Iterator<Item = &'static Term> {
    LAW_TERMS.iter().chain(MEDICAL_TERMS).chain(KORAN_TERMS)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect::<String>() + ".",
        None => String::new(),
    }
}

fn fill(frame: &str, a: &str, b: &str) -> String {
    frame.replace("{0}", a).replace("{1}", b)
}

/// How the stub renders a domain term.
trait TermChoice {
    fn render(&self, term: &Term) -> String;
}

/// Greedy longest-match phrase translation.
fn translate(src: &str, choice: &dyn TermChoice) -> String {
    let lower = src.trim().trim_end_matches('.').to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < words.len() {
        for len in (1..=4).rev() {
            if i + len > words.len() {
                continue;
            }
            let phrase = words[i..i + len].join(" ");
            if let Some(t) = all_terms().find(|t| t.de == phrase) {
                out.push(choice.render(t));
                i += len;
                continue 'outer;
            }
            if let Some((_, en)) = GENERAL.iter().find(|(de, _)| *de == phrase) {
                out.push(en.to_string());
                i += len;
                continue 'outer;
            }
        }
        out.push(words[i].to_string());
        i += 1;
    }
    capitalize(&out.join(" "))
}

fn hash_bit(s: &str) -> bool {
    sha256_hex(s.as_bytes()).as_bytes()[0].is_multiple_of(2)
}

/// Correct when a correct rendering occurs in `context`.
struct Licensed<'a>(&'a str);

impl TermChoice for Licensed<'_> {
    fn render(&self, term: &Term) -> String {
        let ctx = self.0.to_lowercase();
        term.en
            .iter()
            .find(|e| ctx.contains(&e.to_lowercase()))
            .map_or_else(|| term.naive.to_string(), |e| e.to_string())
    }
}

/// What the generator "knows": about half the terms, plus anything
/// licensed by its exemplars.
struct Recall<'a> {
    context: &'a str,
    exemplars: bool,
}

impl TermChoice for Recall<'_> {
    fn render(&self, term: &Term) -> String {
        let licensed = Licensed(self.context).render(term);
        if licensed != term.naive {
            licensed
        } else if self.exemplars && hash_bit(term.de) {
            term.en[0].to_string()
        } else {
            term.naive.to_string()
        }
    }
}

fn last_line_after<'a>(prompt: &'a str, label: &str) -> Option<(usize, &'a str)> {
    let mut found = None;
    let mut offset = 0;
    for line in prompt.split('\n') {
        if let Some(rest) = line.strip_prefix(label) {
            found = Some((offset, rest.trim()));
        }
        offset += line.len() + 1;
    }
    found
}

fn terms_in(src: &str) -> Vec<&'static Term> {
    let lower = src.to_lowercase();
    let mut v: Vec<(usize, &'static Term)> =
        all_terms().filter_map(|t| lower.find(t.de).map(|p| (p, t))).collect();
    v.sort_by_key(|(p, _)| *p);
    v.into_iter().map(|(_, t)| t).collect()
}

fn json(s: &str) -> String {
    serde_json::to_string(s).unwrap()
}

fn stub(prompt: &str) -> String {
    if prompt.starts_with("Identify and annotate") {
        return stub_extract(prompt);
    }
    if prompt.starts_with("You are given") && prompt.contains("write exactly 3 text pairs") {
        return stub_demo_gen(prompt);
    }
    if prompt.starts_with("You are given") {
        return stub_term_gen(prompt);
    }
    let (pos, src) = last_line_after(prompt, "German: ").expect("translation prompt has a source line");
    let hyp = translate(src, &Licensed(&prompt[..pos]));
    if prompt.starts_with("Instruction:") || prompt.starts_with("Your task") {
        format!("{{\"translation\": {}}}", json(&hyp))
    } else {
        hyp
    }
}

fn stub_extract(prompt: &str) -> String {
    let batch = |label: &str| -> Vec<String> {
        let start = prompt.rfind(&format!("\n{label} 1: ")).expect("batch present") + 1;
        prompt[start..]
            .lines()
            .take_while(|l| l.starts_with(&format!("{label} ")))
            .map(|l| l.split_once(": ").unwrap().1.to_string())
            .collect()
    };
    let (srcs, tgts) = (batch("source"), batch("target"));
    let mut out = Vec::new();
    for (i, (s, t)) in srcs.iter().zip(&tgts).enumerate() {
        let mut items = Vec::new();
        for term in terms_in(s) {
            if let Some(en) = term.en.iter().find(|e| t.contains(*e)) {
                items.push(format!("{{\"de\": {}, \"en\": {}}}", json(term.de), json(en)));
            }
            if hash_bit(&format!("{}{s}", term.de)) {
                // A spurious alignment the substring filter should drop.
                items.push(format!("{{\"de\": {}, \"en\": {}}}", json(term.de), json(term.naive)));
            }
        }
        out.push(format!("terminology {}: [{}]", i + 1, items.join(", ")));
    }
    out.join("\n")
}

fn domain_of(terms: &[&Term]) -> Domain {
    let first = terms.first().map(|t| t.de).unwrap_or("");
    if LAW_TERMS.iter().any(|t| t.de == first) {
        Domain::Law
    } else if MEDICAL_TERMS.iter().any(|t| t.de == first) {
        Domain::Medical
    } else {
        Domain::Koran
    }
}

fn stub_demo_gen(prompt: &str) -> String {
    let (pos, src) = last_line_after(prompt, "German source: ").expect("source present");
    let context = &prompt[..pos];
    let exemplars = context.contains("Pair 1:");
    let terms = terms_in(src);
    let domain = domain_of(&terms);
    let pool = domain_terms(&domain);
    let fs = frames(&domain);
    let recall = Recall { context, exemplars };
    let n = if exemplars { 3 } else { 2 };
    let mut lines = Vec::new();
    for j in 0..n + 1 {
        if lines.len() == n {
            break;
        }
        let a = terms.first().map_or(pool[j % pool.len()].de, |t| t.de);
        let b = terms.get(1).map_or(pool[(j + 1) % pool.len()].de, |t| t.de);
        let de = capitalize(&fill(fs[(j + src.len()) % fs.len()], a, b));
        if de == src {
            continue;
        }
        let en = translate(&de, &recall);
        lines.push(format!(
            "Pair {}: {{\"de\": {}, \"en\": {}}}",
            lines.len() + 1,
            json(&de),
            json(&en)
        ));
    }
    lines.join("\n")
}

fn stub_term_gen(prompt: &str) -> String {
    let (pos, src) = last_line_after(prompt, "German source: ").expect("source present");
    let context = &prompt[..pos];
    let recall = Recall {
        context,
        exemplars: context.contains("Term 1:"),
    };
    terms_in(src)
        .iter()
        .enumerate()
        .map(|(i, t)| format!("Term {}: {{\"de\": {}, \"en\": [{}]}}", i + 1, json(t.de), json(&recall.render(t))))
        .collect::<Vec<_>>()
        .join("\n")
}

fn synth_pairs(domain: &Domain, rng: &mut ChaCha8Rng, n: usize, id_prefix: &str) -> Vec<BitextPair> {
    let terms = domain_terms(domain);
    let fs = frames(domain);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let f = fs.choose(rng).unwrap();
        let picks: Vec<&Term> = terms.choose_multiple(rng, 2).collect();
        let de = capitalize(&fill(f, picks[0].de, picks[1].de));
        if !seen.insert(de.clone()) {
            continue;
        }
        // The reference picks one of the accepted renderings per sentence.
        let variant: Vec<&str> = picks.iter().map(|t| *t.en.choose(rng).unwrap()).collect();
        struct Fixed<'a>(Vec<(&'a str, &'a str)>);
        impl TermChoice for Fixed<'_> {
            fn render(&self, term: &Term) -> String {
                self.0
                    .iter()
                    .find(|(d, _)| *d == term.de)
                    .map_or(term.en[0], |(_, e)| e)
                    .to_string()
            }
        }
        let en = translate(&de, &Fixed(picks.iter().map(|t| t.de).zip(variant).collect()));
        out.push(BitextPair::new(
            format!("{id_prefix}-{:03}", out.len() + 1),
            de,
            en,
            domain.clone(),
        ));
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay");
    fs::create_dir_all(&root)?;
    let lib = PromptLibrary::builtin();
    let exemplars = ExemplarSet::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(20240607);

    // Dictionary induction talks to the stub directly; those calls are not
    // part of the replay set.
    let mut induce_client = LlmClient::new(RetryPolicy::default());
    induce_client.add_backend(GEN_MODEL, Backend::new(FnProvider(stub)));
    let induce_client = Arc::new(induce_client);
    let induce_llm = StagedLlm::new(induce_client.clone(), configure_stages(&induce_client, GEN_MODEL, GEN_MODEL)?);

    let mut domains = Vec::new();
    for (domain, n_test) in [(Domain::Law, 7), (Domain::Medical, 7), (Domain::Koran, 6)] {
        let dir = root.join(domain.as_str());
        fs::create_dir_all(&dir)?;
        let mut all = synth_pairs(&domain, &mut rng, TRAIN_PER_DOMAIN + n_test, domain.as_str());
        if domain == Domain::Law && !all[..n_test].iter().any(|p| p.src.to_lowercase().contains("einleitung des verfahrens")) {
            let idx = all
                .iter()
                .position(|p| p.src.to_lowercase().contains("einleitung des verfahrens"))
                .expect("law corpus mentions the proceeding");
            all.swap(0, idx);
        }
        let train: Vec<BitextPair> = all[n_test..].to_vec();
        let test: Vec<BitextPair> = all[..n_test]
            .iter()
            .enumerate()
            .map(|(i, p)| BitextPair::new(format!("{}-test-{:02}", domain.as_str(), i + 1), &p.src, &p.tgt, domain.clone()))
            .collect();
        let (train_c, _) = DomainCorpus::from_pairs(domain.clone(), Split::Train, train)?;
        let (test_c, _) = DomainCorpus::from_pairs(domain.clone(), Split::Test, test)?;
        train_c.write_jsonl(&dir.join("train.jsonl"))?;
        test_c.write_jsonl(&dir.join("test.jsonl"))?;

        let index = Bm25Index::build(&train_c, Bm25Params::default())?;
        index.save(&dir.join("index.json"))?;
        let queries: Vec<&str> = test_c.pairs().iter().map(|p| p.src.as_str()).collect();
        let subset = index.relevant_subset(&queries, 3)?;
        let pairs: Vec<BitextPair> = train_c.pairs().iter().filter(|p| subset.contains(&p.id)).cloned().collect();
        let outcome = induce_dictionary(
            &lib,
            &induce_llm,
            domain.clone(),
            &pairs,
            exemplars.term_extract(&domain)?,
        );
        if !outcome.failed.is_empty() {
            return Err(format!("induction failed: {}", outcome.failure_manifest()).into());
        }
        outcome.dictionary.save(&dir.join("dict.jsonl"))?;
        println!(
            "{}: {} train, {} test, subset {}, dictionary {} entries",
            domain,
            train_c.len(),
            test_c.len(),
            subset.len(),
            outcome.dictionary.len()
        );
        domains.push(serde_json::json!({
            "domain": domain.as_str(),
            "test": format!("{}/test.jsonl", domain.as_str()),
            "index": format!("{}/index.json", domain.as_str()),
            "dictionary": format!("{}/dict.jsonl", domain.as_str()),
        }));
    }

    let config = serde_json::json!({
        "domains": domains,
        "settings": ["zero_shot", "retrieved_demos", "retrieved_terms", "generated_demos",
                     "generated_terms", "local_terms", "style_demos"],
        "k": 3,
        "icl_mode": "domain_2x3",
        "generation_model": GEN_MODEL,
        "translation_model": MT_MODEL,
        "fixtures": "fixtures.jsonl",
        "metrics": ["chrf", "bleu"],
        "baseline": "zero_shot",
    });
    let config_path = root.join("config.json");
    let fixtures_path = root.join("fixtures.jsonl");
    if !fixtures_path.exists() {
        fs::write(&fixtures_path, "")?;
    }
    fs::write(&config_path, serde_json::to_string_pretty(&config)? + "\n")?;

    // Record every response a full run and each ablation row need.
    let recorder = Arc::new(RecordingProvider::new(FnProvider(stub)));
    let scratch = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::load(&config_path)?;
    cfg.out_dir = scratch.path().to_path_buf();
    let client = || {
        let mut c = LlmClient::new(RetryPolicy::default());
        c.add_backend(GEN_MODEL, Backend::new(recorder.clone()));
        c.add_backend(MT_MODEL, Backend::new(recorder.clone()));
        c
    };
    let summary = run_experiment_with(&cfg, client())?;
    if !summary.failures.is_empty() {
        return Err(format!("stub run failed: {:?}", summary.failures).into());
    }
    for mode in domt_core::experiment::AblationMode::ALL {
        let mut c = cfg.clone();
        c.ablation = Some(mode);
        c.settings = vec![domt_core::prompting::Setting::ZeroShot, domt_core::prompting::Setting::GeneratedDemos];
        let s = run_experiment_with(&c, client())?;
        if !s.failures.is_empty() {
            return Err(format!("ablation {} failed: {:?}", mode.as_str(), s.failures).into());
        }
    }
    write_fixtures(&fixtures_path, &recorder.recorded())?;

    // Check that replay alone reproduces the run.
    cfg.out_dir = scratch.path().join("replay");
    let replay = run_experiment(&cfg)?;
    assert!(replay.failures.is_empty(), "{:?}", replay.failures);
    assert_eq!(replay.records, summary.records);
    for r in &replay.reports {
        println!("{}", r.to_text());
    }
    println!("{} fixtures written to {}", recorder.recorded().len(), root.display());
    Ok(())
}
