use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use super::{Backend, BackendError, Capability, DetectionBox, ImageStore, ModelRequest, ModelResponse};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::text::{attribute_tag, content_tokens, raw_tokens};

const ALL_CAPABILITIES: &[Capability] = &[
    Capability::TextGen,
    Capability::VlQuery,
    Capability::Embed,
    Capability::Vqa,
    Capability::Ground,
    Capability::Segment,
];

/// Regex on the prompt (plus optional capability and required image tag)
/// mapped to a response template; `$1`-style captures are expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRule {
    pub pattern: String,
    #[serde(default)]
    pub capability: Option<Capability>,
    #[serde(default)]
    pub tag: Option<String>,
    pub response: String,
}

impl BehaviorRule {
    pub fn new(pattern: &str, response: &str) -> Self {
        BehaviorRule {
            pattern: pattern.to_string(),
            capability: None,
            tag: None,
            response: response.to_string(),
        }
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.tag = Some(tag.to_string());
        self
    }

    pub fn with_capability(mut self, cap: Capability) -> Self {
        self.capability = Some(cap);
        self
    }
}

fn default_true() -> bool {
    true
}

fn default_dim() -> usize {
    128
}

/// Data-driven behavior of a mock backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTable {
    #[serde(default)]
    pub rules: Vec<BehaviorRule>,
    /// Embedding aliases: phrase -> weighted anchor phrases.
    #[serde(default)]
    pub aliases: BTreeMap<String, Vec<(String, f64)>>,
    /// Ship the built-in yes/no, describe, keyword, grounding and segmentation behaviors.
    #[serde(default = "default_true")]
    pub defaults: bool,
    /// Segmentation strips `bg_*` tags instead of acting as the identity.
    #[serde(default)]
    pub remove_background: bool,
    /// Probability of flipping a default yes/no answer, decided per request.
    #[serde(default)]
    pub flip_rate: f64,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

impl Default for BehaviorTable {
    fn default() -> Self {
        BehaviorTable {
            rules: Vec::new(),
            aliases: BTreeMap::new(),
            defaults: true,
            remove_background: false,
            flip_rate: 0.0,
            embedding_dim: default_dim(),
        }
    }
}

/// Seeded hash-derived phrase embeddings.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    aliases: BTreeMap<String, Vec<(String, f64)>>,
}

fn embed_key(s: &str) -> String {
    raw_tokens(s).join(" ")
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize, aliases: &BTreeMap<String, Vec<(String, f64)>>) -> Self {
        MockEmbedder {
            seed,
            dim,
            aliases: aliases
                .iter()
                .map(|(k, v)| (embed_key(k), v.iter().map(|(a, w)| (embed_key(a), *w)).collect()))
                .collect(),
        }
    }

    fn base(&self, anchor: &str) -> Vec<f64> {
        let mut material = self.seed.to_le_bytes().to_vec();
        material.extend_from_slice(anchor.as_bytes());
        let digest = sha256_hex(&material);
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Unnormalised vector; phrases differing only in case or punctuation coincide.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let key = embed_key(text);
        match self.aliases.get(&key) {
            Some(mix) => {
                let mut v = vec![0.0; self.dim];
                for (anchor, w) in mix {
                    for (acc, x) in v.iter_mut().zip(self.base(anchor)) {
                        *acc += w * x;
                    }
                }
                v
            }
            None => self.base(&key),
        }
    }
}

struct CompiledRule {
    regex: Regex,
    rule: BehaviorRule,
}

/// Deterministic stand-in for every capability, driven by image tags.
pub struct MockBackend {
    id: String,
    version: String,
    seed: u64,
    table: BehaviorTable,
    rules: Vec<CompiledRule>,
    embedder: MockEmbedder,
    max_in_flight: usize,
}

fn yes_no_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?is)^\s*(?:does the object have|is the object made of|does the image contain|is there)\s+(.+?)\s*\??\s*$")
            .expect("valid regex")
    })
}

fn sentence_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"sentence : "(.*)""#).expect("valid regex"))
}

fn example_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"sentence : "(.*)",?\s*\n\s*concepts : "(.*)""#).expect("valid regex"))
}

fn tag_value(tags: &BTreeSet<String>, prefix: &str) -> Option<String> {
    tags.iter()
        .find_map(|t| t.strip_prefix(prefix))
        .map(|v| v.replace('_', " "))
}

impl MockBackend {
    pub fn new(id: impl Into<String>, seed: u64, table: BehaviorTable) -> Result<Self> {
        if !(0.0..=1.0).contains(&table.flip_rate) {
            return Err(Error::Invalid(format!("flip_rate {} outside [0, 1]", table.flip_rate)));
        }
        let rules = table
            .rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|regex| CompiledRule {
                        regex,
                        rule: r.clone(),
                    })
                    .map_err(|e| Error::Invalid(format!("bad behavior pattern `{}`: {e}", r.pattern)))
            })
            .collect::<Result<Vec<_>>>()?;
        let table_digest = sha256_hex(serde_json::to_string(&table)?);
        Ok(MockBackend {
            id: id.into(),
            version: format!("mock-v1:{seed}:{}", &table_digest[..12]),
            seed,
            embedder: MockEmbedder::new(seed, table.embedding_dim, &table.aliases),
            table,
            rules,
            max_in_flight: 8,
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n;
        self
    }

    /// Uniform in [0,1) derived from the seed and request content.
    fn unit_hash(&self, req: &ModelRequest) -> f64 {
        let material = format!(
            "{}|{}|{}",
            self.seed,
            req.prompt,
            req.image_ref.as_ref().map(|r| r.0.as_str()).unwrap_or("")
        );
        let d = sha256_hex(material);
        u64::from_str_radix(&d[..13], 16).expect("hex") as f64 / (1u64 << 52) as f64
    }

    fn image_tags(&self, req: &ModelRequest, images: &ImageStore) -> BTreeSet<String> {
        req.image_ref
            .as_ref()
            .and_then(|r| images.tags(r))
            .unwrap_or_default()
    }

    fn text_default(&self, req: &ModelRequest, tags: &BTreeSet<String>) -> Option<String> {
        let p = &req.prompt;
        let lower = p.to_lowercase();
        match req.capability {
            Capability::VlQuery | Capability::Vqa => {
                if let Some(c) = yes_no_regex().captures(p) {
                    let mut yes = tags.contains(&attribute_tag(&c[1]));
                    if self.table.flip_rate > 0.0 && self.unit_hash(req) < self.table.flip_rate {
                        yes = !yes;
                    }
                    return Some(if yes { "Yes" } else { "No" }.to_string());
                }
                if lower.contains("describe the image") {
                    if tags.contains("empty_describe") {
                        return Some(String::new());
                    }
                    if let Some(c) = tags.iter().find_map(|t| t.strip_prefix("caption=")) {
                        return Some(c.to_string());
                    }
                    let obj = tag_value(tags, "obj_").unwrap_or_else(|| "object".into());
                    return Some(match tag_value(tags, "bg_") {
                        Some(bg) => format!("A {obj} on a {bg}."),
                        None => format!("A {obj}."),
                    });
                }
                if lower.contains("main object") {
                    return Some(tag_value(tags, "obj_").unwrap_or_else(|| "object".into()));
                }
                None
            }
            Capability::TextGen => {
                if lower.contains("extract concepts from the sentence") {
                    let target = sentence_regex().captures_iter(p).last()?.get(1)?.as_str().to_string();
                    for ex in example_regex().captures_iter(p) {
                        if ex[1] == target {
                            return Some(ex[2].to_string());
                        }
                    }
                    return Some(chunk_phrases(&target).join(", "));
                }
                None
            }
            _ => None,
        }
    }

    fn segment(&self, req: &ModelRequest, images: &ImageStore) -> std::result::Result<ModelResponse, BackendError> {
        let src = req.image_ref.clone().expect("validated");
        if !self.table.remove_background {
            return Ok(ModelResponse::mask(src));
        }
        match images.tags(&src) {
            Some(tags) => {
                let mut kept: Vec<String> = tags.into_iter().filter(|t| !t.starts_with("bg_")).collect();
                kept.push("segmented".into());
                let r = images
                    .insert_bytes(super::tag_image_bytes(&kept))
                    .map_err(|e| BackendError::Fatal(e.to_string()))?;
                Ok(ModelResponse::mask(r))
            }
            None => Ok(ModelResponse::mask(src)),
        }
    }
}

/// Maximal runs of non-stop-word tokens, in sentence order.
fn chunk_phrases(sentence: &str) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for tok in raw_tokens(sentence) {
        if content_tokens(&tok).is_empty() {
            if !cur.is_empty() {
                chunks.push(cur.join(" "));
                cur.clear();
            }
        } else {
            cur.push(tok);
        }
    }
    if !cur.is_empty() {
        chunks.push(cur.join(" "));
    }
    chunks
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn capabilities(&self) -> &[Capability] {
        ALL_CAPABILITIES
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn embedding_dim(&self) -> Option<usize> {
        Some(self.table.embedding_dim)
    }

    fn call(&self, req: &ModelRequest, images: &ImageStore) -> std::result::Result<ModelResponse, BackendError> {
        let tags = self.image_tags(req, images);
        if tags.contains("fail_all") || tags.contains(&format!("fail_{}", req.capability)) {
            return Err(BackendError::Fatal(format!("scripted {} failure", req.capability)));
        }
        for c in &self.rules {
            let r = &c.rule;
            if r.capability.is_some_and(|cap| cap != req.capability) {
                continue;
            }
            if r.tag.as_ref().is_some_and(|t| !tags.contains(t)) {
                continue;
            }
            if let Some(caps) = c.regex.captures(&req.prompt) {
                let mut out = String::new();
                caps.expand(&r.response, &mut out);
                return Ok(ModelResponse::text(out));
            }
        }
        if !self.table.defaults {
            return Err(BackendError::Unsupported(req.prompt.clone()));
        }
        match req.capability {
            Capability::Embed => Ok(ModelResponse::vector(self.embedder.embed(&req.prompt))),
            Capability::Ground => Ok(ModelResponse::boxes(vec![DetectionBox {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0,
                label: req.prompt.clone(),
                score: 1.0,
            }])),
            Capability::Segment => self.segment(req, images),
            _ => self
                .text_default(req, &tags)
                .map(ModelResponse::text)
                .ok_or_else(|| BackendError::Unsupported(req.prompt.clone())),
        }
    }
}

/// Convenience: a mock backend whose every answer is a pure function of `seed` and `table`.
pub fn mock_backend(id: &str, seed: u64, table: BehaviorTable) -> Result<MockBackend> {
    MockBackend::new(id, seed, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{tag_image_bytes, Gateway};
    use std::sync::Arc;

    fn gw_with(table: BehaviorTable, seed: u64) -> Gateway {
        let mut gw = Gateway::in_memory();
        gw.register(Arc::new(MockBackend::new("mock", seed, table).unwrap()));
        gw
    }

    fn vl(gw: &Gateway, tags: &[&str], prompt: &str) -> String {
        let r = gw.images().insert_bytes(tag_image_bytes(tags)).unwrap();
        gw.query_text(&ModelRequest::new("mock", Capability::VlQuery, prompt).with_image(r))
            .unwrap()
    }

    #[test]
    fn yes_no_follows_tags() {
        let gw = gw_with(BehaviorTable::default(), 0);
        assert_eq!(vl(&gw, &["has_can"], "Does the object have a can?"), "Yes");
        assert_eq!(vl(&gw, &[], "Does the object have a can?"), "No");
        assert_eq!(vl(&gw, &["has_metal_material"], "Is the object made of metal material?"), "Yes");
    }

    #[test]
    fn custom_rule_precedes_defaults() {
        let mut t = BehaviorTable::default();
        t.rules.push(BehaviorRule::new("(?i)wood material", "Yes").with_tag("bg_wooden_table"));
        let gw = gw_with(t, 0);
        assert_eq!(vl(&gw, &["bg_wooden_table"], "Is the object made of wood material?"), "Yes");
        assert_eq!(vl(&gw, &["bg_grass"], "Is the object made of wood material?"), "No");
    }

    #[test]
    fn no_behavior_without_defaults() {
        let t = BehaviorTable {
            defaults: false,
            ..Default::default()
        };
        let gw = gw_with(t, 0);
        let err = gw
            .query(&ModelRequest::new("mock", Capability::TextGen, "anything"))
            .unwrap_err();
        assert!(matches!(err, Error::NoBehavior(_)));
    }

    #[test]
    fn describe_templates_tags() {
        let gw = gw_with(BehaviorTable::default(), 0);
        assert_eq!(
            vl(&gw, &["obj_cat", "bg_wooden_bed"], "Describe the image in a sentence."),
            "A cat on a wooden bed."
        );
    }

    #[test]
    fn keyword_echo_uses_matching_example() {
        let gw = gw_with(BehaviorTable::default(), 0);
        let prompt = "Extract concepts.\n sentence : \"A b.\",\n concepts : \"x, y\"\n sentence : \"A b.\"";
        let p = format!("Extract concepts from the sentence{prompt}");
        let out = gw
            .query_text(&ModelRequest::new("mock", Capability::TextGen, p))
            .unwrap();
        assert_eq!(out, "x, y");
        assert_eq!(chunk_phrases("A cat is laying on a bed next to a computer"), vec![
            "cat", "laying", "bed next", "computer"
        ]);
    }

    #[test]
    fn embeddings_are_seeded_and_alias_aware() {
        let mut aliases = BTreeMap::new();
        aliases.insert("a cat bed".to_string(), vec![("bed".to_string(), 1.0), ("a cat bed".to_string(), 0.2)]);
        let e1 = MockEmbedder::new(7, 64, &aliases);
        let e2 = MockEmbedder::new(7, 64, &aliases);
        assert_eq!(e1.embed("sharp blade"), e2.embed("sharp blade"));
        assert_eq!(e1.embed("a long thin blade"), e1.embed("A long, thin blade"));
        assert_ne!(e1.embed("x"), MockEmbedder::new(8, 64, &aliases).embed("x"));
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        assert!(cos(&e1.embed("a cat bed"), &e1.embed("bed")) > 0.95);
    }

    #[test]
    fn background_removal_drops_bg_tags() {
        let t = BehaviorTable {
            remove_background: true,
            ..Default::default()
        };
        let gw = gw_with(t, 0);
        let r = gw.images().insert_bytes(tag_image_bytes(&["obj_x", "bg_table"])).unwrap();
        let resp = gw
            .query(&ModelRequest::new("mock", Capability::Segment, "segment").with_image(r))
            .unwrap();
        let tags = gw.images().tags(&resp.mask_ref.unwrap()).unwrap();
        assert!(tags.contains("obj_x") && !tags.contains("bg_table"));
    }
}
