//! Concept collection, deduplication, and spurious-concept filtering.

use serde::{Deserialize, Serialize};

use crate::data::{ConceptPool, ConceptStatus, Provenance};
use crate::error::{Error, Result};
use crate::gateway::{Capability, Gateway, ModelRequest};
use crate::spurious::CorrelationReport;
use crate::text::parse_list;

pub const DEFAULT_THETA_CONCEPT: f64 = 0.9;
pub const DEFAULT_THETA_CLASS: f64 = 0.85;
pub const DEFAULT_THETA_SPUR: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    ImportantFeatures,
    Superclass,
    SeenAround,
    Distinguished,
    /// Two-hop expansion: subclasses of each class, then subclasses of those;
    /// the other kinds are then issued for every discovered subclass.
    Subclass,
}

impl PromptKind {
    pub fn provenance(self) -> Provenance {
        match self {
            PromptKind::ImportantFeatures => Provenance::ImportantFeatures,
            PromptKind::Superclass => Provenance::Superclass,
            PromptKind::SeenAround => Provenance::SeenAround,
            PromptKind::Distinguished => Provenance::Distinguished,
            PromptKind::Subclass => Provenance::Subclass,
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<PromptKind>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                serde_json::from_value(serde_json::Value::String(t.to_string()))
                    .map_err(|_| Error::Invalid(format!("unknown prompt kind `{t}`")))
            })
            .collect()
    }
}

pub fn important_features_prompt(class: &str) -> String {
    format!("List the most important features for recognizing something as a {class}")
}

pub fn superclass_prompt(class: &str) -> String {
    format!("Give superclasses for the word {class}")
}

pub fn seen_around_prompt(class: &str) -> String {
    format!("List the things most commonly seen around a {class}")
}

pub fn distinguished_prompt(a: &str, b: &str) -> String {
    format!("Provide a list of visual features to distinguish between a {a} and {b}")
}

pub fn subclass_prompt(class: &str) -> String {
    format!("List the subclasses of {class}")
}

fn single_class_prompt(kind: PromptKind, class: &str) -> String {
    match kind {
        PromptKind::ImportantFeatures => important_features_prompt(class),
        PromptKind::Superclass => superclass_prompt(class),
        PromptKind::SeenAround => seen_around_prompt(class),
        PromptKind::Subclass => subclass_prompt(class),
        PromptKind::Distinguished => unreachable!("pairwise prompt"),
    }
}

/// Prompts in the fixed order they are issued and reduced.
pub fn plan_prompts(
    class_names: &[String],
    kinds: &[PromptKind],
    subclasses: &[String],
) -> Vec<(PromptKind, String)> {
    let mut out = Vec::new();
    let subjects: Vec<&String> = class_names.iter().chain(subclasses).collect();
    for &kind in kinds {
        match kind {
            PromptKind::Distinguished => {
                for (i, a) in class_names.iter().enumerate() {
                    for (j, b) in class_names.iter().enumerate() {
                        if i != j {
                            out.push((kind, distinguished_prompt(a, b)));
                        }
                    }
                }
            }
            PromptKind::Subclass => {}
            _ => {
                for s in &subjects {
                    out.push((kind, single_class_prompt(kind, s)));
                }
            }
        }
    }
    out
}

fn ask_list(gw: &Gateway, backend: &str, prompt: &str) -> Result<Vec<String>> {
    let text = gw.query_text(&ModelRequest::new(backend, Capability::TextGen, prompt).greedy())?;
    Ok(parse_list(&text))
}

/// Union of parsed list items across prompts and classes, first-seen provenance.
pub fn collect_concepts(
    class_names: &[String],
    gw: &Gateway,
    backend: &str,
    kinds: &[PromptKind],
) -> Result<ConceptPool> {
    if class_names.len() < 2 {
        return Err(Error::Precondition("concept collection needs at least 2 classes".into()));
    }
    let mut subclasses: Vec<String> = Vec::new();
    if kinds.contains(&PromptKind::Subclass) {
        let mut first_hop = Vec::new();
        for c in class_names {
            for s in ask_list(gw, backend, &subclass_prompt(c))? {
                if !first_hop.contains(&s) {
                    first_hop.push(s);
                }
            }
        }
        let mut all = first_hop.clone();
        for s in &first_hop {
            for t in ask_list(gw, backend, &subclass_prompt(s))? {
                if !all.contains(&t) {
                    all.push(t);
                }
            }
        }
        subclasses = all;
    }
    let plan = plan_prompts(class_names, kinds, &subclasses);
    let answers: Vec<Result<Vec<String>>> = {
        use rayon::prelude::*;
        plan.par_iter().map(|(_, p)| ask_list(gw, backend, p)).collect()
    };
    let mut pool = ConceptPool::new();
    let mut any_items = false;
    for ((kind, _), items) in plan.iter().zip(answers) {
        let items = items?;
        any_items |= !items.is_empty();
        for item in items {
            pool.insert(&item, kind.provenance());
        }
    }
    if !plan.is_empty() && !any_items {
        return Err(Error::Invalid(
            "every concept prompt parsed to zero items; check prompts and backend".into(),
        ));
    }
    Ok(pool)
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} = {v} must be in (0, 1]")))
    }
}

/// Greedy first-wins scan in pool order over active phrases.
pub fn dedup_pool(
    pool: &ConceptPool,
    class_names: &[String],
    gw: &Gateway,
    embed_backends: &[String],
    theta_concept: f64,
    theta_class: f64,
) -> Result<ConceptPool> {
    check_threshold("theta_concept", theta_concept)?;
    check_threshold("theta_class", theta_class)?;
    let mut out = pool.clone();
    let idx: Vec<usize> = (0..out.len())
        .filter(|&i| out.entries[i].status == ConceptStatus::Active)
        .collect();
    if idx.is_empty() {
        return Ok(out);
    }
    let phrases: Vec<&str> = idx.iter().map(|&i| out.entries[i].phrase.as_str()).collect();
    let pair = gw.ensemble_similarity(&phrases, &phrases, embed_backends)?;
    let to_class = gw.ensemble_similarity(&phrases, class_names, embed_backends)?;
    let mut retained: Vec<usize> = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        let near_class = to_class[k].iter().any(|&s| s > theta_class);
        let near_kept = retained.iter().any(|&r| pair[k][r] > theta_concept);
        if near_class || near_kept {
            out.entries[i].status = ConceptStatus::RemovedDedup;
        } else {
            retained.push(k);
        }
    }
    Ok(out)
}

/// Mark active phrases whose ensemble similarity to any S2 keyword exceeds `theta_spur`.
pub fn filter_spurious(
    pool: &ConceptPool,
    s2: &CorrelationReport,
    gw: &Gateway,
    embed_backends: &[String],
    theta_spur: f64,
) -> Result<ConceptPool> {
    check_threshold("theta_spur", theta_spur)?;
    let keywords = s2.selected_keywords();
    filter_by_keywords(pool, &keywords, gw, embed_backends, theta_spur)
}

pub fn filter_by_keywords(
    pool: &ConceptPool,
    keywords: &[String],
    gw: &Gateway,
    embed_backends: &[String],
    theta_spur: f64,
) -> Result<ConceptPool> {
    let mut out = pool.clone();
    if keywords.is_empty() {
        return Ok(out);
    }
    let idx: Vec<usize> = (0..out.len())
        .filter(|&i| out.entries[i].status == ConceptStatus::Active)
        .collect();
    if idx.is_empty() {
        return Ok(out);
    }
    let phrases: Vec<&str> = idx.iter().map(|&i| out.entries[i].phrase.as_str()).collect();
    let sim = gw.ensemble_similarity(&phrases, keywords, embed_backends)?;
    for (k, &i) in idx.iter().enumerate() {
        if sim[k].iter().any(|&s| s > theta_spur) {
            out.entries[i].status = ConceptStatus::RemovedSpurious;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BehaviorRule, BehaviorTable, MockBackend};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn gateway(rules: Vec<BehaviorRule>, aliases: BTreeMap<String, Vec<(String, f64)>>) -> Gateway {
        let mut gw = Gateway::in_memory();
        let table = BehaviorTable {
            rules,
            aliases,
            ..Default::default()
        };
        gw.register(Arc::new(MockBackend::new("llm", 1, table.clone()).unwrap()));
        gw.register(Arc::new(MockBackend::new("emb-a", 2, table.clone()).unwrap()));
        gw.register(Arc::new(MockBackend::new("emb-b", 3, table).unwrap()));
        gw
    }

    fn classes() -> Vec<String> {
        vec!["can opener".into(), "letter opener".into()]
    }

    fn embeds() -> Vec<String> {
        vec!["emb-a".into(), "emb-b".into()]
    }

    #[test]
    fn single_prompt_parses_two_items() {
        let gw = gateway(
            vec![
                BehaviorRule::new("important features.*can opener", "• sharp blade\n• wooden handle"),
                BehaviorRule::new("important features", ""),
            ],
            BTreeMap::new(),
        );
        let pool = collect_concepts(&classes(), &gw, "llm", &[PromptKind::ImportantFeatures]).unwrap();
        assert_eq!(pool.active_phrases(), vec!["sharp blade", "wooden handle"]);
        assert!(pool.entries.iter().all(|e| e.provenance == Provenance::ImportantFeatures));
    }

    #[test]
    fn duplicate_across_prompts_keeps_first_provenance() {
        let gw = gateway(
            vec![
                BehaviorRule::new("important features", "- a pen"),
                BehaviorRule::new("superclass", "- a pen\n- tool"),
            ],
            BTreeMap::new(),
        );
        let pool = collect_concepts(
            &classes(),
            &gw,
            "llm",
            &[PromptKind::ImportantFeatures, PromptKind::Superclass],
        )
        .unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.entries[0].provenance, Provenance::ImportantFeatures);
    }

    #[test]
    fn all_empty_responses_is_an_error() {
        let gw = gateway(vec![BehaviorRule::new(".*", "")], BTreeMap::new());
        assert!(collect_concepts(&classes(), &gw, "llm", &[PromptKind::SeenAround]).is_err());
        assert!(collect_concepts(&classes()[..1], &gw, "llm", &[PromptKind::SeenAround]).is_err());
    }

    #[test]
    fn distinguished_is_per_ordered_pair() {
        let plan = plan_prompts(&classes(), &[PromptKind::Distinguished], &[]);
        assert_eq!(plan.len(), 2);
        assert!(plan[1].1.contains("between a letter opener and can opener"));
    }

    #[test]
    fn subclass_expansion_recurses_once() {
        let gw = gateway(
            vec![
                BehaviorRule::new("subclasses of waterbird$", "- gull"),
                BehaviorRule::new("subclasses of landbird$", "- warbler"),
                BehaviorRule::new("subclasses of gull$", "- herring gull"),
                BehaviorRule::new("subclasses of", ""),
                BehaviorRule::new("important features for recognizing something as a (.*)$", "- $1 beak"),
            ],
            BTreeMap::new(),
        );
        let pool = collect_concepts(
            &["waterbird".into(), "landbird".into()],
            &gw,
            "llm",
            &[PromptKind::Subclass, PromptKind::ImportantFeatures],
        )
        .unwrap();
        assert!(pool.active_phrases().contains(&"herring gull beak".to_string()));
        assert_eq!(pool.len(), 5);
    }

    #[test]
    fn dedup_exact_duplicate_and_class_name() {
        let gw = gateway(vec![], BTreeMap::new());
        let mut pool = ConceptPool::from_phrases(&["sharp blade", "can opener"], Provenance::Manual);
        pool.entries.push(crate::data::ConceptEntry {
            phrase: "sharp blade".into(),
            provenance: Provenance::Superclass,
            status: ConceptStatus::Active,
        });
        let out = dedup_pool(&pool, &classes(), &gw, &embeds(), 0.99, 0.99).unwrap();
        let st: Vec<ConceptStatus> = out.entries.iter().map(|e| e.status).collect();
        assert_eq!(
            st,
            vec![ConceptStatus::Active, ConceptStatus::RemovedDedup, ConceptStatus::RemovedDedup]
        );
        assert!(dedup_pool(&pool, &classes(), &gw, &embeds(), 0.0, 0.5).is_err());
    }

    #[test]
    fn empty_s2_passes_through() {
        let gw = gateway(vec![], BTreeMap::new());
        let pool = ConceptPool::from_phrases(&["a", "bb"], Provenance::Manual);
        let out = filter_by_keywords(&pool, &[], &gw, &embeds(), 0.8).unwrap();
        assert_eq!(out, pool);
    }
}
