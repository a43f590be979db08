//! Run configuration: one TOML file with a section per stage.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::annotate::{PromptTemplate, ATTRIBUTE_SLOT, DEFAULT_MIN_CLASSES, DEFAULT_TEMPLATE};
use crate::data::read_to_string;
use crate::error::{Error, Result};
use crate::gateway::{BehaviorTable, Capability, HttpBackend, HttpBackendConfig};
use crate::nn::{ClassifierConfig, ConceptTrainConfig};
use crate::pool::{PromptKind, DEFAULT_THETA_CLASS, DEFAULT_THETA_CONCEPT, DEFAULT_THETA_SPUR};
use crate::refine::DEFAULT_INSTRUCTION;
use crate::spurious::{self, IclExample, DEFAULT_THETA_MERGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Response cache, relative to the run directory unless absolute.
    #[serde(default = "default_cache")]
    pub cache: String,
}

fn default_cache() -> String {
    "cache.jsonl".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: String,
    #[serde(default)]
    pub val: Option<String>,
    #[serde(default)]
    pub test: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        id: String,
        #[serde(default)]
        seed: u64,
        /// JSON behavior table, relative to the config file.
        #[serde(default)]
        behavior: Option<String>,
    },
    Http(HttpBackendConfig),
}

impl BackendSpec {
    pub fn id(&self) -> &str {
        match self {
            BackendSpec::Mock { id, .. } => id,
            BackendSpec::Http(c) => &c.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    /// Text generation: concept collection and keyword extraction.
    pub llm: String,
    /// Vision-language: descriptions and annotation.
    pub vlm: String,
    /// Text embedders averaged for similarity.
    pub embed: Vec<String>,
    /// Grounding/segmentation tools for refinement.
    #[serde(default)]
    pub tools: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    #[serde(default = "default_prompts")]
    pub prompts: Vec<PromptKind>,
    #[serde(default = "default_theta_concept")]
    pub theta_concept: f64,
    #[serde(default = "default_theta_class")]
    pub theta_class: f64,
    #[serde(default = "default_theta_spur")]
    pub theta_spur: f64,
}

fn default_prompts() -> Vec<PromptKind> {
    vec![
        PromptKind::ImportantFeatures,
        PromptKind::Superclass,
        PromptKind::SeenAround,
        PromptKind::Distinguished,
    ]
}
fn default_theta_concept() -> f64 {
    DEFAULT_THETA_CONCEPT
}
fn default_theta_class() -> f64 {
    DEFAULT_THETA_CLASS
}
fn default_theta_spur() -> f64 {
    DEFAULT_THETA_SPUR
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            prompts: default_prompts(),
            theta_concept: DEFAULT_THETA_CONCEPT,
            theta_class: DEFAULT_THETA_CLASS,
            theta_spur: DEFAULT_THETA_SPUR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSet {
    #[default]
    None,
    Opener,
    Metashift,
    Waterbirds,
}

impl ExampleSet {
    pub fn examples(self) -> Vec<IclExample> {
        match self {
            ExampleSet::None => Vec::new(),
            ExampleSet::Opener => spurious::opener_icl_examples(),
            ExampleSet::Metashift => spurious::metashift_icl_examples(),
            ExampleSet::Waterbirds => spurious::waterbirds_icl_examples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_theta_merge")]
    pub theta_merge: f64,
    #[serde(default)]
    pub examples: ExampleSet,
    /// Extra thresholds reported in the sweep table.
    #[serde(default)]
    pub sweep: Vec<f64>,
}

fn default_tau() -> f64 {
    0.2
}
fn default_theta_merge() -> f64 {
    DEFAULT_THETA_MERGE
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            tau: default_tau(),
            theta_merge: DEFAULT_THETA_MERGE,
            examples: ExampleSet::None,
            sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateSection {
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    #[serde(default)]
    pub consolidate: bool,
    #[serde(default = "default_min_classes")]
    pub min_classes: usize,
}

fn default_template() -> String {
    DEFAULT_TEMPLATE.into()
}
fn default_min_classes() -> usize {
    DEFAULT_MIN_CLASSES
}

impl Default for AnnotateSection {
    fn default() -> Self {
        AnnotateSection {
            template: default_template(),
            overrides: BTreeMap::new(),
            consolidate: false,
            min_classes: DEFAULT_MIN_CLASSES,
        }
    }
}

impl AnnotateSection {
    pub fn prompt_template(&self) -> Result<PromptTemplate> {
        let mut t = PromptTemplate::new(&self.template)?;
        for (k, v) in &self.overrides {
            t = t.with_override(k, v);
        }
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default = "default_chain")]
    pub chain: Vec<Capability>,
    #[serde(default = "default_instruction")]
    pub instruction: String,
}

fn default_chain() -> Vec<Capability> {
    vec![Capability::Vqa, Capability::Ground, Capability::Segment]
}
fn default_instruction() -> String {
    DEFAULT_INSTRUCTION.into()
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            enabled: false,
            targets: Vec::new(),
            chain: default_chain(),
            instruction: default_instruction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Train f on the annotation matrix.
    #[default]
    Annotations,
    /// Train f on g's hard predictions for the training images.
    Predictions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default)]
    pub classifier_input: ClassifierInput,
    #[serde(default)]
    pub concept_model: ConceptTrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            classifier_input: ClassifierInput::Annotations,
            concept_model: ConceptTrainConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub probe: ClassifierConfig,
}

fn default_true() -> bool {
    true
}

impl Default for LeakageSection {
    fn default() -> Self {
        LeakageSection {
            enabled: true,
            probe: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Include wall-clock stage timings (the only nondeterministic content).
    #[serde(default = "default_true")]
    pub include_timing: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { include_timing: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    pub roles: Roles,
    #[serde(default)]
    pub pool: PoolSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub leakage: LeakageSection,
    #[serde(default)]
    pub report: ReportSection,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Canonical TOML with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config serialization: {e}")))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_behavior(&self, rel: &str) -> Result<BehaviorTable> {
        let path = self.resolve(rel);
        Ok(serde_json::from_str(&read_to_string(&path)?)?)
    }

    /// Every range, reference and template problem, each prefixed with its key.
    pub fn problems(&self, replay_only: bool) -> Vec<String> {
        let mut errs = Vec::new();
        let mut unit = |key: &str, v: f64, open_low: bool| {
            let ok = if open_low { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if !ok {
                let range = if open_low { "(0, 1]" } else { "[0, 1]" };
                errs.push(format!("{key} = {v} is outside {range}"));
            }
        };
        unit("detect.tau", self.detect.tau, false);
        unit("detect.theta_merge", self.detect.theta_merge, true);
        unit("pool.theta_concept", self.pool.theta_concept, true);
        unit("pool.theta_class", self.pool.theta_class, true);
        unit("pool.theta_spur", self.pool.theta_spur, true);
        for (i, t) in self.detect.sweep.iter().enumerate() {
            unit(&format!("detect.sweep[{i}]"), *t, false);
        }

        if !self.annotate.template.contains(ATTRIBUTE_SLOT) {
            errs.push(format!("annotate.template is missing the {ATTRIBUTE_SLOT} slot"));
        }
        for (k, v) in &self.annotate.overrides {
            if !v.contains(ATTRIBUTE_SLOT) {
                errs.push(format!("annotate.overrides.\"{k}\" is missing the {ATTRIBUTE_SLOT} slot"));
            }
        }
        if self.annotate.min_classes == 0 {
            errs.push("annotate.min_classes must be positive".into());
        }

        let train = |errs: &mut Vec<String>, key: &str, lr: f64, batch: usize, momentum: f64| {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!("{key}.learning_rate = {lr} must be positive"));
            }
            if batch == 0 {
                errs.push(format!("{key}.batch_size must be positive"));
            }
            if !(0.0..1.0).contains(&momentum) {
                errs.push(format!("{key}.momentum = {momentum} is outside [0, 1)"));
            }
        };
        let c = &self.training.concept_model;
        train(&mut errs, "training.concept_model", c.learning_rate, c.batch_size, c.momentum);
        for (key, c) in [("training.classifier", &self.training.classifier), ("leakage.probe", &self.leakage.probe)] {
            train(&mut errs, key, c.learning_rate, c.batch_size, c.momentum);
            if c.hidden.contains(&0) {
                errs.push(format!("{key}.hidden sizes must be positive"));
            }
        }

        let mut ids: Vec<&str> = Vec::new();
        for (i, b) in self.backends.iter().enumerate() {
            if ids.contains(&b.id()) {
                errs.push(format!("backends[{i}].id `{}` is declared twice", b.id()));
            }
            ids.push(b.id());
            match b {
                BackendSpec::Mock { behavior: Some(rel), .. } => {
                    if let Err(e) = self.load_behavior(rel) {
                        errs.push(format!("backends[{i}].behavior: {e}"));
                    }
                }
                BackendSpec::Mock { .. } => {}
                BackendSpec::Http(h) => {
                    if h.capabilities.is_empty() {
                        errs.push(format!("backends[{i}].capabilities is empty"));
                    }
                    if !replay_only {
                        if let Err(e) = HttpBackend::new(h.clone()).probe() {
                            errs.push(format!("backends[{i}].endpoint `{}` is unreachable: {e}", h.endpoint));
                        }
                    }
                }
            }
        }
        let mut role = |key: &str, id: &str| {
            if !ids.contains(&id) {
                errs.push(format!("roles.{key} names undeclared backend `{id}`"));
            }
        };
        role("llm", &self.roles.llm);
        role("vlm", &self.roles.vlm);
        for (i, e) in self.roles.embed.iter().enumerate() {
            role(&format!("embed[{i}]"), e);
        }
        if let Some(t) = &self.roles.tools {
            role("tools", t);
        }
        if self.roles.embed.is_empty() {
            errs.push("roles.embed must name at least one backend".into());
        }

        if self.refine.enabled {
            if self.refine.targets.is_empty() {
                errs.push("refine.targets is empty but refine.enabled = true".into());
            }
            if self.refine.chain.is_empty() {
                errs.push("refine.chain is empty".into());
            }
            if self.roles.tools.is_none() {
                errs.push("roles.tools is required when refinement is enabled".into());
            }
        }

        if !self.resolve(&self.data.train).exists() {
            errs.push(format!("data.train `{}` does not exist", self.data.train));
        }
        for (key, p) in [("data.val", &self.data.val), ("data.test", &self.data.test)] {
            if let Some(p) = p {
                if !self.resolve(p).exists() {
                    errs.push(format!("{key} `{p}` does not exist"));
                }
            }
        }
        errs
    }
}

/// Parse and check a config file; all problems are reported together.
pub fn validate_config(path: &Path, replay_only: bool) -> Result<Config> {
    let text = read_to_string(path).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut cfg = Config::parse(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let errs = cfg.problems(replay_only);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
name = "mini"

[data]
train = "train.jsonl"

[[backends]]
kind = "mock"
id = "m"

[roles]
llm = "m"
vlm = "m"
embed = ["m"]
"#;

    fn write_min(dir: &Path, extra: &str) -> PathBuf {
        std::fs::write(dir.join("train.jsonl"), "{\"class_names\":[\"a\",\"b\"]}\n").unwrap();
        let p = dir.join("run.toml");
        std::fs::write(&p, format!("{MINIMAL}{extra}")).unwrap();
        p
    }

    #[test]
    fn minimal_config_materializes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = validate_config(&write_min(dir.path(), ""), true).unwrap();
        let text = cfg.to_toml().unwrap();
        for needle in ["tau = 0.2", "theta_spur = 0.8", "batch_size = 64", "momentum = 0.9", "min_classes = 10"] {
            assert!(text.contains(needle), "missing `{needle}` in\n{text}");
        }
        let mut again = Config::parse(&text).unwrap();
        again.base_dir = cfg.base_dir.clone();
        assert_eq!(again, cfg);
    }

    #[test]
    fn range_and_template_errors_are_aggregated() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_min(dir.path(), "\n[detect]\ntau = 1.5\n\n[annotate]\ntemplate = \"Is it there?\"\n");
        let Err(Error::Config(errs)) = validate_config(&p, true) else {
            panic!("expected config errors");
        };
        assert!(errs.iter().any(|e| e.contains("detect.tau")), "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("annotate.template")), "{errs:?}");
    }

    #[test]
    fn undeclared_role_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_min(dir.path(), "");
        let text = std::fs::read_to_string(&p).unwrap().replace("vlm = \"m\"", "vlm = \"ghost\"");
        std::fs::write(&p, text).unwrap();
        let Err(Error::Config(errs)) = validate_config(&p, true) else {
            panic!("expected config errors");
        };
        assert!(errs.iter().any(|e| e.contains("roles.vlm")), "{errs:?}");
    }
}
