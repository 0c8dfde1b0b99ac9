//! Helpers shared by integration test targets.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use domt_core::corpus::Domain;
use domt_core::exemplars::{numbered_lines, render_demo_gen_block, render_term_gen_block, ExemplarSet};
use domt_core::prompting::{LanguagePair, PromptLibrary, TemplateId};

pub fn golden(id: TemplateId) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(id.file_name());
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Binds every slot to its own marker text, except the exemplar blocks,
/// which are rendered from the published exemplars.
pub fn reference_bindings(id: TemplateId) -> BTreeMap<String, String> {
    let lib = PromptLibrary::builtin();
    let set = ExemplarSet::builtin();
    let langs = LanguagePair::default();
    let tpl = lib.get(id);
    let mut slots = BTreeMap::new();
    for name in &tpl.required_slots {
        let marker = if tpl.body.contains(&format!("[{name}]")) {
            format!("[{name}]")
        } else {
            format!("{{{name}}}")
        };
        slots.insert(name.clone(), marker);
    }
    match id {
        TemplateId::DemoGen => {
            let ex = set.demo_gen(&Domain::Medical).unwrap();
            slots.insert("demo_examples".into(), render_demo_gen_block(ex, &langs));
        }
        TemplateId::TermGen => {
            let ex = set.term_gen(&Domain::Law).unwrap();
            slots.insert("term_examples".into(), render_term_gen_block(ex, &langs));
        }
        TemplateId::TermExtract => {
            let ex = set.term_extract(&Domain::Koran).unwrap();
            slots.insert(
                "source_examples".into(),
                numbered_lines("source", ex.sources.iter().map(String::as_str)),
            );
            slots.insert(
                "target_examples".into(),
                numbered_lines("target", ex.targets.iter().map(String::as_str)),
            );
            slots.insert(
                "term_examples".into(),
                numbered_lines("terminology", ex.terminology.iter().map(String::as_str)),
            );
        }
        _ => {}
    }
    slots
}
