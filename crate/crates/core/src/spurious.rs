//! Spurious-correlation detection over image descriptions.
//!
//! Descriptions are reduced to keyword lists, vectorised into a binary
//! presence matrix, and every vocabulary token is correlated against each
//! one-vs-rest class indicator with the point-biserial coefficient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::data::{canonicalize, ConceptPool, ConceptStatus, DatasetManifest};
use crate::error::{Error, Result};
use crate::gateway::{Capability, Gateway, ImageRef, ModelRequest};
use crate::pool::filter_by_keywords;
use crate::text::{content_tokens, parse_list};

pub const DESCRIBE_PROMPT: &str = "Describe the image in a sentence.";
pub const DEFAULT_THETA_MERGE: f64 = 0.85;

/// One in-context (sentence, concepts) demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub sentence: String,
    pub concepts: String,
}

fn icl(pairs: &[(&str, &str)]) -> Vec<IclExample> {
    pairs
        .iter()
        .map(|(s, c)| IclExample {
            sentence: s.to_string(),
            concepts: c.to_string(),
        })
        .collect()
}

pub fn opener_icl_examples() -> Vec<IclExample> {
    icl(&[
        ("A can opener is sitting on top of a can of food.", "can opener, a can of food"),
        (
            "A knife with a wooden handle is sitting on a green plate.",
            "knife with a wooden handle, green plate",
        ),
        (
            "A blue wrench with a handle is shown in a close-up view.",
            "blue wrench with a handle",
        ),
    ])
}

pub fn metashift_icl_examples() -> Vec<IclExample> {
    icl(&[
        (
            "An orange tabby cat is laying on a bed next to a laptop computer.",
            "tabby cat, laying on a bed, laptop computer",
        ),
        (
            "A cat is laying on a blanket and eating food from a fork.",
            "cat, laying on a blanket, eating food",
        ),
        (
            "A cat is sleeping on a couch, with its head resting on a pillow.",
            "cat, sleeping on a couch, resting on a pillow",
        ),
    ])
}

pub fn waterbirds_icl_examples() -> Vec<IclExample> {
    icl(&[
        (
            "The image features a seagull flying over the ocean, with its wings spread wide open as it soars through the sky.",
            "seagull flying over the ocean, wings spread wide open.",
        ),
        (
            "The image shows a seagull floating on water, with its wings spread out, and its body resting on the surface.",
            "seagull floating on water, wings spread out, body resting on the surface.",
        ),
        (
            "The image features a bird perched on a tall bamboo plant, with a blue and black color scheme.",
            "perched on a tall bamboo plant, with a blue and black color scheme",
        ),
    ])
}

const ORDINALS: &[&str] = &["first", "second", "third", "fourth", "fifth", "sixth"];

/// Keyword-extraction prompt: instruction, demonstrations, then the target sentence.
pub fn extraction_prompt(description: &str, examples: &[IclExample]) -> String {
    let mut p = String::from("Instruction : Extract concepts from the sentence such as the examples below.\n");
    for (i, ex) in examples.iter().enumerate() {
        let ord = ORDINALS.get(i).copied().unwrap_or("next");
        p.push_str(&format!(
            "The {ord} example,\n    sentence : \"{}\",\n    concepts : \"{}\"\n",
            ex.sentence, ex.concepts
        ));
    }
    p.push_str(&format!("Now the target,\n    sentence : \"{description}\"\n    concepts :"));
    p
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescribeOutcome {
    /// Ids whose description could not be obtained; they are excluded from detection.
    pub flagged: Vec<String>,
    pub described: usize,
}

/// Fill missing descriptions via the vision-language backend.
pub fn describe_images(
    manifest: &mut DatasetManifest,
    gw: &Gateway,
    backend: &str,
    image_refs: &[ImageRef],
) -> Result<DescribeOutcome> {
    if image_refs.len() != manifest.records.len() {
        return Err(Error::Dimension(format!(
            "{} image refs for {} records",
            image_refs.len(),
            manifest.records.len()
        )));
    }
    let answers: Vec<Option<Result<String>>> = manifest
        .records
        .par_iter()
        .zip(image_refs.par_iter())
        .map(|(r, img)| {
            if r.description.is_some() {
                return None;
            }
            let req = ModelRequest::new(backend, Capability::VlQuery, DESCRIBE_PROMPT)
                .with_image(img.clone())
                .greedy();
            Some(gw.query_text(&req))
        })
        .collect();
    let mut out = DescribeOutcome::default();
    for (r, ans) in manifest.records.iter_mut().zip(answers) {
        match ans {
            None => {}
            Some(Ok(text)) if !text.trim().is_empty() => {
                r.description = Some(text.trim().to_string());
                out.described += 1;
            }
            Some(Ok(_)) => {
                log::warn!("empty description for `{}`", r.id);
                out.flagged.push(r.id.clone());
            }
            Some(Err(e)) if e.halts_stage() => return Err(e),
            Some(Err(e)) => {
                log::warn!("description failed for `{}`: {e}", r.id);
                out.flagged.push(r.id.clone());
            }
        }
    }
    Ok(out)
}

/// Deterministic fallback: the stop-word-filtered tokens of the description.
pub fn rule_based_keywords(description: &str) -> Vec<String> {
    content_tokens(description)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub image_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// k_i: extracted keywords with the record's class name appended.
    pub keywords: Vec<Vec<String>>,
    pub vocabulary: Vec<String>,
    /// Presence matrix (n × N).
    pub matrix: Vec<Vec<u8>>,
    /// Records whose extraction fell back to the rule-based tokenizer.
    pub fallbacks: Vec<String>,
}

/// Extract keyword lists for `(id, description, class_label)` rows.
pub fn extract_keywords(
    rows: &[(String, String, usize)],
    class_names: &[String],
    gw: &Gateway,
    backend: &str,
    examples: &[IclExample],
) -> Result<(Vec<Vec<String>>, Vec<String>)> {
    let results: Vec<Result<(Vec<String>, bool)>> = rows
        .par_iter()
        .map(|(_, desc, _)| {
            if desc.trim().is_empty() {
                return Ok((Vec::new(), false));
            }
            let req = ModelRequest::new(backend, Capability::TextGen, extraction_prompt(desc, examples)).greedy();
            let parsed = match gw.query_text(&req) {
                Ok(text) => parse_list(&text),
                Err(e) if e.halts_stage() => return Err(e),
                Err(e) => {
                    log::warn!("keyword extraction failed: {e}");
                    Vec::new()
                }
            };
            if parsed.is_empty() {
                Ok((rule_based_keywords(desc), true))
            } else {
                Ok((parsed, false))
            }
        })
        .collect();
    let mut lists = Vec::with_capacity(rows.len());
    let mut fallbacks = Vec::new();
    for ((id, _, label), res) in rows.iter().zip(results) {
        let (mut kws, fell_back) = res?;
        if fell_back {
            log::info!("rule-based keyword fallback for `{id}`");
            fallbacks.push(id.clone());
        }
        let class = class_names
            .get(*label)
            .ok_or_else(|| Error::Invalid(format!("class label {label} has no name")))?;
        kws.push(canonicalize(class));
        lists.push(kws);
    }
    Ok((lists, fallbacks))
}

/// Tokenise keyword lists into a sorted vocabulary and presence matrix.
///
/// A keyword equal to a class name stays one token so class identity is not
/// split across words shared with ordinary keywords.
pub fn tokenize_and_vectorize(lists: &[Vec<String>], class_names: &[String]) -> Result<(Vec<String>, Vec<Vec<u8>>)> {
    let class_tokens: BTreeSet<String> = class_names.iter().map(|c| canonicalize(c)).collect();
    let token_sets: Vec<BTreeSet<String>> = lists
        .iter()
        .map(|kws| {
            let mut set = BTreeSet::new();
            for k in kws {
                let c = canonicalize(k);
                if class_tokens.contains(&c) {
                    set.insert(c);
                } else {
                    set.extend(content_tokens(&c));
                }
            }
            set
        })
        .collect();
    let vocabulary: Vec<String> = token_sets
        .iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if vocabulary.is_empty() {
        return Err(Error::Invalid("keyword vocabulary is empty".into()));
    }
    let matrix = token_sets
        .iter()
        .map(|set| vocabulary.iter().map(|t| u8::from(set.contains(t))).collect())
        .collect();
    Ok((vocabulary, matrix))
}

impl KeywordSet {
    pub fn build(
        image_ids: Vec<String>,
        labels: Vec<usize>,
        keywords: Vec<Vec<String>>,
        class_names: &[String],
        fallbacks: Vec<String>,
    ) -> Result<Self> {
        let (vocabulary, matrix) = tokenize_and_vectorize(&keywords, class_names)?;
        Ok(KeywordSet {
            image_ids,
            labels,
            keywords,
            vocabulary,
            matrix,
            fallbacks,
        })
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        self.matrix.iter().map(|r| r[j]).collect()
    }
}

/// Point-biserial coefficient between a binary keyword column and a binary
/// class indicator (population standard deviations). A constant keyword
/// column yields 0.
pub fn point_biserial(column: &[u8], class_indicator: &[u8]) -> Result<f64> {
    if column.len() != class_indicator.len() {
        return Err(Error::Dimension(format!(
            "keyword column has {} entries, class indicator {}",
            column.len(),
            class_indicator.len()
        )));
    }
    let n = column.len();
    if n < 2 {
        return Err(Error::Precondition("point-biserial needs at least 2 samples".into()));
    }
    let (mut nx, mut ny, mut nxy) = (0u64, 0u64, 0u64);
    for (&x, &y) in column.iter().zip(class_indicator) {
        if x > 1 || y > 1 {
            return Err(Error::Invalid("point-biserial inputs must be binary".into()));
        }
        nx += x as u64;
        ny += y as u64;
        nxy += (x & y) as u64;
    }
    let n = n as u64;
    if ny == 0 || ny == n {
        return Err(Error::Precondition("class indicator is constant".into()));
    }
    if nx == 0 || nx == n {
        return Ok(0.0);
    }
    // n² · cov and n⁴ · var(x)var(y), exact in integers.
    let num = n as f64 * nxy as f64 - nx as f64 * ny as f64;
    let den = ((nx * (n - nx)) as f64 * (ny * (n - ny)) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCoefficient {
    pub keyword: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCoefficients {
    pub class_label: usize,
    pub class_name: String,
    /// Sorted by descending coefficient, ties by keyword.
    pub coefficients: Vec<KeywordCoefficient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedKeyword {
    pub keyword: String,
    pub class_label: usize,
    pub r: f64,
}

/// Per-class ranked coefficients, merge groups, threshold and S2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub class_names: Vec<String>,
    pub num_records: usize,
    pub per_class: Vec<ClassCoefficients>,
    /// Representative -> absorbed members (representative excluded).
    pub merge_groups: BTreeMap<String, Vec<String>>,
    pub threshold: Option<f64>,
    pub selected: Vec<SelectedKeyword>,
}

fn sort_coefficients(v: &mut [KeywordCoefficient]) {
    v.sort_by(|a, b| b.r.total_cmp(&a.r).then_with(|| a.keyword.cmp(&b.keyword)));
}

impl CorrelationReport {
    /// One-vs-rest coefficients of every vocabulary token for every class.
    pub fn compute(set: &KeywordSet, class_names: &[String]) -> Result<Self> {
        let mut per_class = Vec::new();
        for (c, name) in class_names.iter().enumerate() {
            let indicator: Vec<u8> = set.labels.iter().map(|&l| u8::from(l == c)).collect();
            let mut coefficients = (0..set.vocabulary.len())
                .map(|j| {
                    Ok(KeywordCoefficient {
                        keyword: set.vocabulary[j].clone(),
                        r: point_biserial(&set.column(j), &indicator)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sort_coefficients(&mut coefficients);
            per_class.push(ClassCoefficients {
                class_label: c,
                class_name: name.clone(),
                coefficients,
            });
        }
        Ok(CorrelationReport {
            class_names: class_names.to_vec(),
            num_records: set.labels.len(),
            per_class,
            merge_groups: BTreeMap::new(),
            threshold: None,
            selected: Vec::new(),
        })
    }

    /// Binary report from per-class positive lists; the other class gets the negation.
    pub fn from_binary_lists(class_names: [&str; 2], lists: [&[(&str, f64)]; 2]) -> Self {
        let mut per_class = Vec::new();
        for c in 0..2 {
            let mut coefficients: Vec<KeywordCoefficient> = lists[c]
                .iter()
                .map(|(k, r)| KeywordCoefficient {
                    keyword: k.to_string(),
                    r: *r,
                })
                .chain(lists[1 - c].iter().map(|(k, r)| KeywordCoefficient {
                    keyword: k.to_string(),
                    r: -*r,
                }))
                .collect();
            sort_coefficients(&mut coefficients);
            per_class.push(ClassCoefficients {
                class_label: c,
                class_name: class_names[c].to_string(),
                coefficients,
            });
        }
        CorrelationReport {
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            num_records: 0,
            per_class,
            merge_groups: BTreeMap::new(),
            threshold: None,
            selected: Vec::new(),
        }
    }

    pub fn coefficient(&self, class_label: usize, keyword: &str) -> Option<f64> {
        self.per_class
            .get(class_label)?
            .coefficients
            .iter()
            .find(|k| k.keyword == keyword)
            .map(|k| k.r)
    }

    fn is_class_token(&self, keyword: &str) -> bool {
        self.class_names.iter().any(|c| canonicalize(c) == keyword)
    }

    pub fn selected_keywords(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.keyword.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Absorb keywords similar to a stronger representative and add their coefficients.
///
/// Keywords are scanned by descending max |r| (ties by keyword); each
/// unabsorbed keyword becomes a representative and absorbs every later
/// keyword whose ensemble similarity exceeds `theta_merge`. Sums are clamped
/// to [-1, 1]. Class-name tokens never take part.
pub fn merge_similar_keywords(
    report: &CorrelationReport,
    gw: &Gateway,
    embed_backends: &[String],
    theta_merge: f64,
) -> Result<CorrelationReport> {
    let mut strength: BTreeMap<&str, f64> = BTreeMap::new();
    for cc in &report.per_class {
        for k in &cc.coefficients {
            if report.is_class_token(&k.keyword) {
                continue;
            }
            let e = strength.entry(k.keyword.as_str()).or_insert(0.0);
            *e = e.max(k.r.abs());
        }
    }
    let mut order: Vec<(&str, f64)> = strength.into_iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let words: Vec<&str> = order.iter().map(|(w, _)| *w).collect();
    let mut out = report.clone();
    if words.len() < 2 {
        return Ok(out);
    }
    let sim = gw.ensemble_similarity(&words, &words, embed_backends)?;
    let mut absorbed = vec![false; words.len()];
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for i in 0..words.len() {
        if absorbed[i] {
            continue;
        }
        for j in (i + 1)..words.len() {
            if !absorbed[j] && sim[i][j] > theta_merge {
                absorbed[j] = true;
                groups.entry(words[i].to_string()).or_default().push(words[j].to_string());
            }
        }
    }
    for cc in &mut out.per_class {
        let lookup: BTreeMap<String, f64> = cc.coefficients.iter().map(|k| (k.keyword.clone(), k.r)).collect();
        let mut merged = Vec::new();
        for k in &cc.coefficients {
            if let Some(pos) = words.iter().position(|w| *w == k.keyword) {
                if absorbed[pos] {
                    continue;
                }
            }
            let mut r = k.r;
            if let Some(members) = groups.get(&k.keyword) {
                r += members.iter().filter_map(|m| lookup.get(m)).sum::<f64>();
            }
            merged.push(KeywordCoefficient {
                keyword: k.keyword.clone(),
                r: r.clamp(-1.0, 1.0),
            });
        }
        sort_coefficients(&mut merged);
        cc.coefficients = merged;
    }
    for (rep, members) in groups {
        out.merge_groups.entry(rep).or_default().extend(members);
    }
    Ok(out)
}

/// Select S2: keywords whose coefficient toward some class is at least `tau`.
pub fn select_s2(report: &CorrelationReport, tau: f64) -> Result<CorrelationReport> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Precondition(format!("tau = {tau} must be in (0, 1]")));
    }
    let mut out = report.clone();
    out.threshold = Some(tau);
    out.selected.clear();
    let mut seen = BTreeSet::new();
    for cc in &report.per_class {
        for k in &cc.coefficients {
            if k.r >= tau && !report.is_class_token(&k.keyword) && seen.insert(k.keyword.clone()) {
                out.selected.push(SelectedKeyword {
                    keyword: k.keyword.clone(),
                    class_label: cc.class_label,
                    r: k.r,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub selected: usize,
    pub removed: usize,
    pub removed_phrases: Vec<String>,
}

/// Apply selection and filtering at each threshold.
pub fn sweep_threshold(
    report: &CorrelationReport,
    pool: &ConceptPool,
    taus: &[f64],
    gw: &Gateway,
    embed_backends: &[String],
    theta_spur: f64,
) -> Result<Vec<SweepRow>> {
    taus.iter()
        .map(|&tau| {
            let s2 = select_s2(report, tau)?;
            let filtered = filter_by_keywords(pool, &s2.selected_keywords(), gw, embed_backends, theta_spur)?;
            let removed_phrases: Vec<String> = filtered
                .entries
                .iter()
                .zip(&pool.entries)
                .filter(|(after, before)| {
                    after.status == ConceptStatus::RemovedSpurious && before.status != ConceptStatus::RemovedSpurious
                })
                .map(|(after, _)| after.phrase.clone())
                .collect();
            Ok(SweepRow {
                tau,
                selected: s2.selected.len(),
                removed: removed_phrases.len(),
                removed_phrases,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub keywords: KeywordSet,
    pub report: CorrelationReport,
    pub flagged: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSettings {
    pub vl_backend: String,
    pub text_backend: String,
    pub embed_backends: Vec<String>,
    pub examples: Vec<IclExample>,
    pub theta_merge: f64,
    pub tau: f64,
}

/// Describe, extract, vectorise, correlate, merge, and threshold.
pub fn detect_spurious(
    manifest: &DatasetManifest,
    gw: &Gateway,
    image_refs: &[ImageRef],
    settings: &DetectionSettings,
) -> Result<DetectionOutput> {
    let mut described = manifest.clone();
    let outcome = describe_images(&mut described, gw, &settings.vl_backend, image_refs)?;
    detect_from_described(&described, &outcome.flagged, gw, settings)
}

/// Everything after the description step; `flagged` records are left out.
pub fn detect_from_described(
    described: &DatasetManifest,
    flagged: &[String],
    gw: &Gateway,
    settings: &DetectionSettings,
) -> Result<DetectionOutput> {
    let manifest = described;
    let flagged_ids: BTreeSet<&String> = flagged.iter().collect();
    let rows: Vec<(String, String, usize)> = described
        .records
        .iter()
        .filter(|r| !flagged_ids.contains(&r.id))
        .map(|r| (r.id.clone(), r.description.clone().unwrap_or_default(), r.class_label))
        .collect();
    let class_names = manifest.class_names().to_vec();
    let (lists, fallbacks) = extract_keywords(&rows, &class_names, gw, &settings.text_backend, &settings.examples)?;
    let keywords = KeywordSet::build(
        rows.iter().map(|r| r.0.clone()).collect(),
        rows.iter().map(|r| r.2).collect(),
        lists,
        &class_names,
        fallbacks,
    )?;
    let raw = CorrelationReport::compute(&keywords, &class_names)?;
    let merged = merge_similar_keywords(&raw, gw, &settings.embed_backends, settings.theta_merge)?;
    let report = select_s2(&merged, settings.tau)?;
    Ok(DetectionOutput {
        keywords,
        report,
        flagged: flagged.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{tag_image_bytes, BehaviorTable, MockBackend};
    use crate::oracles::pearson_oracle;
    use std::sync::Arc;

    fn gw(aliases: BTreeMap<String, Vec<(String, f64)>>) -> Gateway {
        let mut g = Gateway::in_memory();
        let t = BehaviorTable {
            aliases,
            ..Default::default()
        };
        g.register(Arc::new(MockBackend::new("m", 0, t.clone()).unwrap()));
        g.register(Arc::new(MockBackend::new("e2", 5, t).unwrap()));
        g
    }

    #[test]
    fn point_biserial_hand_cases() {
        assert_eq!(point_biserial(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(point_biserial(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.0);
        let r = point_biserial(&[1, 1, 1, 0], &[1, 1, 0, 0]).unwrap();
        let oracle = pearson_oracle(&[1.0, 1.0, 1.0, 0.0], &[1.0, 1.0, 0.0, 0.0]);
        assert!((oracle - 0.577_350_269_189_625_7).abs() < 1e-12);
        assert!((r - oracle).abs() < 1e-12);
        assert!((r - 0.57735).abs() < 1e-5);
    }

    #[test]
    fn point_biserial_errors_and_constant_keyword() {
        assert!(point_biserial(&[1, 0], &[1, 0, 1]).is_err());
        assert!(point_biserial(&[1], &[1]).is_err());
        assert!(point_biserial(&[1, 0, 1], &[1, 1, 1]).is_err());
        assert_eq!(point_biserial(&[1, 1, 1], &[1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn vectorize_hand_case() {
        let lists = vec![
            vec!["can opener".to_string(), "a can".to_string()],
            vec!["knife".to_string(), "on".to_string()],
        ];
        let (vocab, m) = tokenize_and_vectorize(&lists, &[]).unwrap();
        assert_eq!(vocab, vec!["can", "knife", "opener"]);
        assert_eq!(m, vec![vec![1, 0, 1], vec![0, 1, 0]]);
        assert!(tokenize_and_vectorize(&[vec!["on".to_string()]], &[]).is_err());
    }

    #[test]
    fn class_name_stays_one_token() {
        let lists = vec![vec!["a can".to_string(), "can opener".to_string()]];
        let (vocab, _) = tokenize_and_vectorize(&lists, &["can opener".to_string()]).unwrap();
        assert_eq!(vocab, vec!["can", "can opener"]);
    }

    #[test]
    fn extraction_echoes_worked_example_and_falls_back() {
        let g = gw(BTreeMap::new());
        let names = vec!["can opener".to_string(), "letter opener".to_string()];
        let rows = vec![
            ("a".to_string(), "A can opener is sitting on top of a can of food.".to_string(), 0),
            ("b".to_string(), String::new(), 1),
        ];
        let (lists, fb) = extract_keywords(&rows, &names, &g, "m", &opener_icl_examples()).unwrap();
        assert_eq!(lists[0], vec!["can opener", "a can of food", "can opener"]);
        assert_eq!(lists[1], vec!["letter opener"]);
        assert!(fb.is_empty());
        assert_eq!(rule_based_keywords("a cat on a bed"), vec!["cat", "bed"]);
    }

    #[test]
    fn describe_skips_present_and_flags_empty() {
        let g = gw(BTreeMap::new());
        let mut m = DatasetManifest::parse(
            concat!(
                r#"{"class_names":["cat","dog"]}"#,
                "\n",
                r#"{"id":"a","class_label":0,"description":"kept"}"#,
                "\n",
                r#"{"id":"b","class_label":1}"#,
                "\n",
                r#"{"id":"c","class_label":1}"#
            ),
            "t",
        )
        .unwrap();
        let refs = vec![
            g.images().insert_bytes(tag_image_bytes(&["id:a"])).unwrap(),
            g.images().insert_bytes(tag_image_bytes(&["id:b", "obj_dog", "bg_grass"])).unwrap(),
            g.images().insert_bytes(tag_image_bytes(&["id:c", "empty_describe"])).unwrap(),
        ];
        let out = describe_images(&mut m, &g, "m", &refs).unwrap();
        assert_eq!(m.records[0].description.as_deref(), Some("kept"));
        assert_eq!(m.records[1].description.as_deref(), Some("A dog on a grass."));
        assert_eq!(out.flagged, vec!["c"]);
    }

    #[test]
    fn merge_sums_and_clamps() {
        let mut aliases = BTreeMap::new();
        aliases.insert("benches".to_string(), vec![("bench".to_string(), 1.0)]);
        aliases.insert("kitties".to_string(), vec![("kitty".to_string(), 1.0)]);
        let g = gw(aliases);
        let backends = vec!["m".to_string(), "e2".to_string()];
        let rep = CorrelationReport::from_binary_lists(
            ["cat", "dog"],
            [&[("kitty", 0.7), ("kitties", 0.6)], &[("bench", 0.12), ("benches", 0.09), ("frisbee", 0.2)]],
        );
        let merged = merge_similar_keywords(&rep, &g, &backends, 0.85).unwrap();
        assert!((merged.coefficient(1, "bench").unwrap() - 0.21).abs() < 1e-12);
        assert!(merged.coefficient(1, "benches").is_none());
        assert_eq!(merged.coefficient(0, "kitty").unwrap(), 1.0);
        assert_eq!(merged.coefficient(1, "kitty").unwrap(), -1.0);
        assert_eq!(merged.merge_groups["bench"], vec!["benches"]);

        let plain = CorrelationReport::from_binary_lists(["cat", "dog"], [&[("a1", 0.3)], &[("zz", 0.2)]]);
        let same = merge_similar_keywords(&plain, &g, &backends, 0.85).unwrap();
        assert_eq!(same, plain);
    }

    #[test]
    fn select_excludes_class_tokens() {
        let rep = CorrelationReport::from_binary_lists(["cat", "dog"], [&[("cat", 1.0), ("bed", 0.5)], &[("leash", 0.3)]]);
        let s = select_s2(&rep, 0.3).unwrap();
        assert_eq!(s.selected_keywords(), vec!["bed", "leash"]);
        assert!(select_s2(&rep, 1.0).unwrap().selected.is_empty());
        assert!(select_s2(&rep, 0.0).is_err());
    }
}
