//! End-to-end driver: resumable stages over a run directory.
//!
//! Every stage writes its artifacts under the run directory and is recorded
//! in `run.json` with a key chained from the config digest and the digests of
//! all earlier artifacts. A stage whose key and outputs are unchanged is
//! skipped, so reruns are no-ops and an interrupted run resumes where it
//! stopped, replaying completed backend calls from the response cache.

mod config;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub use config::{
    validate_config, AnnotateSection, BackendSpec, ClassifierInput, Config, DataSection, DetectSection, ExampleSet,
    LeakageSection, PoolSection, RefineSection, ReportSection, Roles, RunSection, TrainingSection,
};

use crate::annotate::{annotate, consolidate_class_level, evaluate_against_gt, AnnotationQuality};
use crate::data::{load_manifest, read_to_string, write_file, AnnotationMatrix, ConceptPool, DatasetManifest};
use crate::digest::{file_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::eval::{attribute_consensus, emit_report, group_metrics, group_sizes, ConsensusReport, GroupMetrics, ReportBundle};
use crate::gateway::{mock_backend, CacheMode, Gateway, HttpBackend, ImageRef, ImageStore, ResponseCache};
use crate::nn::{
    audit_leakage, predict_concepts, train_classifier, train_concept_model, ConceptModel, LabelClassifier,
    LeakageResult, PredictMode, ValidationSet,
};
use crate::pool::{collect_concepts, dedup_pool, filter_spurious};
use crate::refine::{refine_annotations, FlipReport, RefinementPlan};
use crate::spurious::{describe_images, detect_from_described, sweep_threshold, CorrelationReport, DetectionSettings, KeywordSet, SweepRow};

pub const RUN_MANIFEST: &str = "run.json";
const RUN_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PoolCollect,
    Describe,
    DetectSpurious,
    PoolFilter,
    Annotate,
    Refine,
    TrainConcept,
    TrainClassifier,
    AuditLeakage,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::PoolCollect,
        Stage::Describe,
        Stage::DetectSpurious,
        Stage::PoolFilter,
        Stage::Annotate,
        Stage::Refine,
        Stage::TrainConcept,
        Stage::TrainClassifier,
        Stage::AuditLeakage,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PoolCollect => "pool-collect",
            Stage::Describe => "describe",
            Stage::DetectSpurious => "detect-spurious",
            Stage::PoolFilter => "pool-filter",
            Stage::Annotate => "annotate",
            Stage::Refine => "refine",
            Stage::TrainConcept => "train-concept",
            Stage::TrainClassifier => "train-classifier",
            Stage::AuditLeakage => "audit-leakage",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub replay_only: bool,
    /// Stop after this stage.
    pub until: Option<Stage>,
    /// Simulate a crash after this many live backend calls.
    pub call_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    /// Run-relative path -> sha256 of the file.
    pub outputs: BTreeMap<String, String>,
    pub skipped: bool,
    pub seconds: f64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub name: String,
    pub config_digest: String,
    /// Materialised configuration with every default written out.
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub cache_digest: Option<String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_to_string(&run_dir.join(RUN_MANIFEST))?)?)
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let tmp = run_dir.join(format!("{RUN_MANIFEST}.tmp"));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&tmp, text.as_bytes())?;
        let dst = run_dir.join(RUN_MANIFEST);
        std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Digests of every stage artifact except the report, whose timing
    /// section carries wall-clock measurements.
    pub fn artifact_digests(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .filter(|r| r.stage != Stage::Report)
            .flat_map(|r| r.outputs.clone())
            .collect()
    }
}

struct StageOutput {
    outputs: Vec<&'static str>,
    notes: BTreeMap<String, serde_json::Value>,
    skipped: bool,
}

impl StageOutput {
    fn files(outputs: Vec<&'static str>) -> Self {
        StageOutput {
            outputs,
            notes: BTreeMap::new(),
            skipped: false,
        }
    }

    fn skipped(why: &str) -> Self {
        let mut notes = BTreeMap::new();
        notes.insert("skipped".to_string(), serde_json::Value::String(why.to_string()));
        StageOutput {
            outputs: Vec::new(),
            notes,
            skipped: true,
        }
    }

    fn note(mut self, key: &str, value: impl Serialize) -> Self {
        self.notes
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        self
    }
}

mod paths {
    pub const POOL_COLLECTED: &str = "pool/collected.tsv";
    pub const POOL_FINAL: &str = "pool/final.tsv";
    pub const DESCRIBED: &str = "describe/train.jsonl";
    pub const DESCRIBE_FLAGGED: &str = "describe/flagged.json";
    pub const KEYWORDS: &str = "detect/keywords.json";
    pub const CORRELATION: &str = "detect/report.json";
    pub const SWEEP: &str = "detect/sweep.json";
    pub const ANNOTATIONS: &str = "annotate/train.csv";
    pub const ANNOTATIONS_ABSTAIN: &str = "annotate/train.abstain";
    pub const CONSOLIDATED: &str = "annotate/consolidated.csv";
    pub const CONSOLIDATED_ABSTAIN: &str = "annotate/consolidated.abstain";
    pub const QUALITY: &str = "annotate/quality.json";
    pub const REFINED: &str = "refine/train.csv";
    pub const REFINED_ABSTAIN: &str = "refine/train.abstain";
    pub const FLIPS: &str = "refine/flips.json";
    pub const CONCEPT_MODEL: &str = "models/concept.bin";
    pub const CLASSIFIER: &str = "models/classifier.bin";
    pub const LEAKAGE: &str = "leakage/result.json";
    pub const METRICS: &str = "eval/metrics.json";
    pub const CONSENSUS: &str = "eval/consensus.json";
    pub const REPORT_MD: &str = "report/report.md";
    pub const REPORT_JSON: &str = "report/summary.json";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub split: String,
    pub metrics: GroupMetrics,
}

struct Ctx<'a> {
    cfg: &'a Config,
    dir: PathBuf,
    gw: Gateway,
    train: DatasetManifest,
    val: Option<DatasetManifest>,
    test: Option<DatasetManifest>,
    seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_to_string(path)?)?)
}

fn hard_u8(rows: &[Vec<f64>]) -> Vec<Vec<u8>> {
    rows.iter().map(|r| r.iter().map(|v| u8::from(*v >= 0.5)).collect()).collect()
}

impl Ctx<'_> {
    fn p(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn train_refs(&self) -> Result<Vec<ImageRef>> {
        self.gw.images().register_manifest(&self.train)
    }

    fn detection_settings(&self) -> DetectionSettings {
        DetectionSettings {
            vl_backend: self.cfg.roles.vlm.clone(),
            text_backend: self.cfg.roles.llm.clone(),
            embed_backends: self.cfg.roles.embed.clone(),
            examples: self.cfg.detect.examples.examples(),
            theta_merge: self.cfg.detect.theta_merge,
            tau: self.cfg.detect.tau,
        }
    }

    /// Matrix the concept model learns from: refined, else consolidated, else raw.
    fn effective_matrix(&self) -> Result<AnnotationMatrix> {
        if self.cfg.refine.enabled {
            AnnotationMatrix::load(&self.p(paths::REFINED))
        } else if self.cfg.annotate.consolidate {
            AnnotationMatrix::load(&self.p(paths::CONSOLIDATED))
        } else {
            AnnotationMatrix::load(&self.p(paths::ANNOTATIONS))
        }
    }

    /// Split used for evaluation, leakage audit and consensus.
    fn eval_split(&self) -> (&'static str, &DatasetManifest) {
        match (&self.test, &self.val) {
            (Some(t), _) => ("test", t),
            (None, Some(v)) => ("val", v),
            _ => ("train", &self.train),
        }
    }

    fn run_stage(&self, stage: Stage) -> Result<StageOutput> {
        match stage {
            Stage::PoolCollect => self.pool_collect(),
            Stage::Describe => self.describe(),
            Stage::DetectSpurious => self.detect(),
            Stage::PoolFilter => self.pool_filter(),
            Stage::Annotate => self.annotate(),
            Stage::Refine => self.refine(),
            Stage::TrainConcept => self.train_concept(),
            Stage::TrainClassifier => self.train_classifier(),
            Stage::AuditLeakage => self.audit_leakage(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
    }

    fn pool_collect(&self) -> Result<StageOutput> {
        let classes = self.train.class_names().to_vec();
        let collected = collect_concepts(&classes, &self.gw, &self.cfg.roles.llm, &self.cfg.pool.prompts)?;
        let pool = dedup_pool(
            &collected,
            &classes,
            &self.gw,
            &self.cfg.roles.embed,
            self.cfg.pool.theta_concept,
            self.cfg.pool.theta_class,
        )?;
        pool.save(&self.p(paths::POOL_COLLECTED))?;
        Ok(StageOutput::files(vec![paths::POOL_COLLECTED])
            .note("collected", pool.len())
            .note("after_dedup", pool.active_count()))
    }

    fn describe(&self) -> Result<StageOutput> {
        let mut described = self.train.clone();
        let refs = self.train_refs()?;
        let outcome = describe_images(&mut described, &self.gw, &self.cfg.roles.vlm, &refs)?;
        described.save(&self.p(paths::DESCRIBED))?;
        write_json(&self.p(paths::DESCRIBE_FLAGGED), &outcome.flagged)?;
        Ok(StageOutput::files(vec![paths::DESCRIBED, paths::DESCRIBE_FLAGGED])
            .note("described", outcome.described)
            .note("flagged", outcome.flagged.len()))
    }

    fn detect(&self) -> Result<StageOutput> {
        let described = load_manifest(&self.p(paths::DESCRIBED))?;
        let flagged: Vec<String> = read_json(&self.p(paths::DESCRIBE_FLAGGED))?;
        let settings = self.detection_settings();
        let out = detect_from_described(&described, &flagged, &self.gw, &settings)?;
        write_json(&self.p(paths::KEYWORDS), &out.keywords)?;
        write_file(&self.p(paths::CORRELATION), format!("{}\n", out.report.to_json()?).as_bytes())?;
        let mut outputs = vec![paths::KEYWORDS, paths::CORRELATION];
        if !self.cfg.detect.sweep.is_empty() {
            let pool = ConceptPool::load(&self.p(paths::POOL_COLLECTED))?;
            let rows = sweep_threshold(
                &out.report,
                &pool,
                &self.cfg.detect.sweep,
                &self.gw,
                &self.cfg.roles.embed,
                self.cfg.pool.theta_spur,
            )?;
            write_json(&self.p(paths::SWEEP), &rows)?;
            outputs.push(paths::SWEEP);
        }
        Ok(StageOutput::files(outputs)
            .note("selected", out.report.selected.len())
            .note("vocabulary", out.keywords.vocabulary.len())
            .note("fallbacks", out.keywords.fallbacks.len()))
    }

    fn pool_filter(&self) -> Result<StageOutput> {
        let pool = ConceptPool::load(&self.p(paths::POOL_COLLECTED))?;
        let report = CorrelationReport::from_json(&read_to_string(&self.p(paths::CORRELATION))?)?;
        let filtered = filter_spurious(&pool, &report, &self.gw, &self.cfg.roles.embed, self.cfg.pool.theta_spur)?;
        filtered.save(&self.p(paths::POOL_FINAL))?;
        Ok(StageOutput::files(vec![paths::POOL_FINAL])
            .note("removed_spurious", filtered.count_status(crate::data::ConceptStatus::RemovedSpurious))
            .note("retained", filtered.active_count()))
    }

    fn annotate(&self) -> Result<StageOutput> {
        let pool = ConceptPool::load(&self.p(paths::POOL_FINAL))?;
        let template = self.cfg.annotate.prompt_template()?;
        let refs = self.train_refs()?;
        let outcome = annotate(&self.train, &refs, &pool, &self.gw, &self.cfg.roles.vlm, &template)?;
        outcome.matrix.save(&self.p(paths::ANNOTATIONS))?;
        let mut outputs = vec![paths::ANNOTATIONS, paths::ANNOTATIONS_ABSTAIN];
        if self.train.records.iter().all(|r| r.gt_concepts.is_some()) && !self.train.is_empty() {
            if let Ok(q) = evaluate_against_gt(&outcome.matrix, &self.train) {
                write_json(&self.p(paths::QUALITY), &q)?;
                outputs.push(paths::QUALITY);
            }
        }
        if self.cfg.annotate.consolidate {
            let c = consolidate_class_level(&outcome.matrix, &self.train, self.cfg.annotate.min_classes)?;
            c.save(&self.p(paths::CONSOLIDATED))?;
            outputs.extend([paths::CONSOLIDATED, paths::CONSOLIDATED_ABSTAIN]);
        }
        let stats = &outcome.stats;
        Ok(StageOutput::files(outputs)
            .note("queries", stats.queries)
            .note("abstains", stats.abstains)
            .note("failures", stats.failures)
            .note("images_per_second", stats.images_per_second)
            .note("total_hours", stats.wall_seconds / 3600.0)
            .note("warnings", &outcome.warnings))
    }

    fn refine(&self) -> Result<StageOutput> {
        if !self.cfg.refine.enabled {
            return Ok(StageOutput::skipped("refinement disabled"));
        }
        let raw = if self.cfg.annotate.consolidate {
            AnnotationMatrix::load(&self.p(paths::CONSOLIDATED))?
        } else {
            AnnotationMatrix::load(&self.p(paths::ANNOTATIONS))?
        };
        let mut plan = RefinementPlan::new(&self.cfg.refine.targets);
        plan.chain = self.cfg.refine.chain.clone();
        plan.instruction = self.cfg.refine.instruction.clone();
        let tools = self
            .cfg
            .roles
            .tools
            .as_deref()
            .ok_or_else(|| Error::Precondition("refinement needs roles.tools".into()))?;
        let refs = self.train_refs()?;
        let template = self.cfg.annotate.prompt_template()?;
        let out = refine_annotations(&raw, &self.train, &refs, &plan, &self.gw, tools, &self.cfg.roles.vlm, &template)?;
        out.matrix.save(&self.p(paths::REFINED))?;
        write_json(&self.p(paths::FLIPS), &out.report)?;
        Ok(StageOutput::files(vec![paths::REFINED, paths::REFINED_ABSTAIN, paths::FLIPS])
            .note("flagged", out.report.flagged.len()))
    }

    fn train_concept(&self) -> Result<StageOutput> {
        let matrix = self.effective_matrix()?;
        let features = self.train.features()?;
        let model = train_concept_model(&features, &matrix, &self.cfg.training.concept_model, self.seed)?;
        model.save(&self.p(paths::CONCEPT_MODEL))?;
        Ok(StageOutput::files(vec![paths::CONCEPT_MODEL]).note("warnings", &model.warnings))
    }

    fn concept_model(&self) -> Result<ConceptModel> {
        ConceptModel::load(&self.p(paths::CONCEPT_MODEL))
    }

    fn hard_concepts(&self, model: &ConceptModel, m: &DatasetManifest) -> Result<Vec<Vec<f64>>> {
        predict_concepts(model, &m.features()?, PredictMode::Hard)
    }

    fn train_classifier(&self) -> Result<StageOutput> {
        let g = self.concept_model()?;
        let inputs: Vec<Vec<f64>> = match self.cfg.training.classifier_input {
            ClassifierInput::Annotations => self
                .effective_matrix()?
                .bits
                .iter()
                .map(|r| r.iter().map(|&b| b as f64).collect())
                .collect(),
            ClassifierInput::Predictions => self.hard_concepts(&g, &self.train)?,
        };
        let val = match &self.val {
            Some(v) => Some(ValidationSet {
                inputs: self.hard_concepts(&g, v)?,
                labels: v.labels(),
                groups: v
                    .records
                    .iter()
                    .map(|r| {
                        v.group_of(r)
                            .ok_or_else(|| Error::Precondition(format!("validation record `{}` has no group", r.id)))
                    })
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };
        let f = train_classifier(
            &inputs,
            &self.train.labels(),
            self.train.num_classes(),
            &self.cfg.training.classifier,
            val.as_ref(),
            self.seed.wrapping_add(1),
        )?;
        f.save(&self.p(paths::CLASSIFIER))?;
        Ok(StageOutput::files(vec![paths::CLASSIFIER]).note("best_epoch", f.best_epoch))
    }

    fn audit_leakage(&self) -> Result<StageOutput> {
        if !self.cfg.leakage.enabled {
            return Ok(StageOutput::skipped("leakage audit disabled"));
        }
        let (_, split) = self.eval_split();
        let Some(spurious) = split.records.iter().map(|r| r.spurious_label).collect::<Option<Vec<usize>>>() else {
            return Ok(StageOutput::skipped("evaluation split has no spurious labels"));
        };
        let reps = self.hard_concepts(&self.concept_model()?, split)?;
        let result = audit_leakage(&reps, &spurious, &self.cfg.leakage.probe, self.seed.wrapping_add(2))?;
        write_json(&self.p(paths::LEAKAGE), &result)?;
        Ok(StageOutput::files(vec![paths::LEAKAGE]).note("accuracy", result.accuracy))
    }

    fn evaluate(&self) -> Result<StageOutput> {
        let g = self.concept_model()?;
        let f = LabelClassifier::load(&self.p(paths::CLASSIFIER))?;
        let (name, split) = self.eval_split();
        let concepts = self.hard_concepts(&g, split)?;
        let preds = f.predict_batch(&concepts)?;
        let weights = group_sizes(&self.train)?;
        let opt: Vec<Option<usize>> = preds.iter().copied().map(Some).collect();
        let metrics = group_metrics(&opt, split, Some(&weights))?;
        write_json(
            &self.p(paths::METRICS),
            &EvaluationArtifact {
                split: name.to_string(),
                metrics: metrics.clone(),
            },
        )?;
        let consensus = attribute_consensus(&hard_u8(&concepts), &preds, &split.labels(), split.num_classes())?;
        write_json(&self.p(paths::CONSENSUS), &consensus)?;
        Ok(StageOutput::files(vec![paths::METRICS, paths::CONSENSUS])
            .note("worst_group", metrics.reported_worst_group)
            .note("average", metrics.reported_average))
    }

    fn report(&self) -> Result<StageOutput> {
        // The bundle is rebuilt from files so the report never depends on live state.
        let manifest = RunManifest::load(&self.dir)?;
        let bundle = report_bundle(&self.dir, &manifest, self.cfg.report.include_timing)?;
        let dir = self.p("report");
        emit_report(&bundle, &dir)?;
        Ok(StageOutput::files(vec![paths::REPORT_MD, paths::REPORT_JSON]))
    }
}

fn optional<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        load(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Assemble the report from a run directory alone; no backend is needed.
pub fn report_bundle(run_dir: &Path, manifest: &RunManifest, include_timing: bool) -> Result<ReportBundle> {
    let p = |rel: &str| run_dir.join(rel);
    let pool = match optional(&p(paths::POOL_FINAL), ConceptPool::load)? {
        Some(pool) => Some(pool),
        None => optional(&p(paths::POOL_COLLECTED), ConceptPool::load)?,
    };
    let correlation = optional(&p(paths::CORRELATION), |path| CorrelationReport::from_json(&read_to_string(path)?))?;
    let metrics: Option<EvaluationArtifact> = optional(&p(paths::METRICS), read_json)?;
    let concept_names = optional(&p(paths::CONCEPT_MODEL), ConceptModel::load)?
        .map(|m| m.concepts)
        .unwrap_or_default();
    Ok(ReportBundle {
        title: manifest.name.clone(),
        correlation,
        sweep: optional(&p(paths::SWEEP), read_json::<Vec<SweepRow>>)?,
        pool,
        annotation_quality: optional(&p(paths::QUALITY), read_json::<AnnotationQuality>)?,
        flips: optional(&p(paths::FLIPS), read_json::<FlipReport>)?,
        metrics: metrics
            .map(|m| vec![(format!("{} split", m.split), m.metrics)])
            .unwrap_or_default(),
        leakage: optional(&p(paths::LEAKAGE), read_json::<LeakageResult>)?,
        consensus: optional(&p(paths::CONSENSUS), read_json::<ConsensusReport>)?,
        concept_names,
        timings: if include_timing {
            manifest
                .stages
                .iter()
                .filter(|r| r.stage != Stage::Report)
                .map(|r| (r.stage.to_string(), r.seconds))
                .collect()
        } else {
            Vec::new()
        },
    })
}

/// Build the gateway described by the config, with the cache and derived
/// images stored in the run directory.
pub fn build_gateway(cfg: &Config, run_dir: &Path, replay_only: bool) -> Result<Gateway> {
    let cache_path = {
        let p = Path::new(&cfg.run.cache);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            run_dir.join(p)
        }
    };
    let cache = ResponseCache::open(&cache_path)?;
    let images = Arc::new(ImageStore::with_dir(&run_dir.join("images"))?);
    let mut gw = Gateway::new(cache, images).with_mode(if replay_only {
        CacheMode::ReplayOnly
    } else {
        CacheMode::RecordReplay
    });
    for spec in &cfg.backends {
        match spec {
            BackendSpec::Mock { id, seed, behavior } => {
                let table = match behavior {
                    Some(rel) => cfg.load_behavior(rel)?,
                    None => Default::default(),
                };
                gw.register(Arc::new(mock_backend(id, *seed, table)?));
            }
            BackendSpec::Http(h) => gw.register(Arc::new(HttpBackend::new(h.clone()))),
        }
    }
    Ok(gw)
}

fn chain_key(prev: &str, stage: Stage, earlier: &[StageRecord]) -> String {
    let mut material = format!("{prev}\n{stage}\n");
    for r in earlier {
        for (path, digest) in &r.outputs {
            material.push_str(&format!("{path}={digest}\n"));
        }
    }
    sha256_hex(material)
}

fn outputs_intact(run_dir: &Path, rec: &StageRecord) -> bool {
    rec.outputs
        .iter()
        .all(|(rel, digest)| file_digest(&run_dir.join(rel)).is_ok_and(|d| &d == digest))
}

fn stage_error(stage: Stage, e: Error) -> Error {
    match e {
        e @ (Error::Interrupted(_) | Error::Config(_)) => e,
        other => Error::Stage {
            stage: stage.to_string(),
            msg: other.to_string(),
        },
    }
}

/// Run every stage in order, skipping those already complete.
pub fn run_pipeline(config_path: &Path, run_dir: &Path, opts: &RunOptions) -> Result<RunManifest> {
    let cfg = validate_config(config_path, opts.replay_only)?;
    run_with_config(&cfg, run_dir, opts)
}

pub fn run_with_config(cfg: &Config, run_dir: &Path, opts: &RunOptions) -> Result<RunManifest> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_text = cfg.to_toml()?;
    let config_digest = sha256_hex(&config_text);
    write_file(&run_dir.join("config.toml"), config_text.as_bytes())?;

    let load = |rel: &str| load_manifest(&cfg.resolve(rel));
    let train = load(&cfg.data.train).map_err(|e| stage_error(Stage::PoolCollect, e))?;
    let val = cfg.data.val.as_deref().map(load).transpose()?;
    let test = cfg.data.test.as_deref().map(load).transpose()?;
    let mut inputs = BTreeMap::new();
    inputs.insert("train".to_string(), file_digest(&cfg.resolve(&cfg.data.train))?);
    for (k, v) in [("val", &cfg.data.val), ("test", &cfg.data.test)] {
        if let Some(rel) = v {
            inputs.insert(k.to_string(), file_digest(&cfg.resolve(rel))?);
        }
    }

    let mut gw = build_gateway(cfg, run_dir, opts.replay_only)?;
    if let Some(n) = opts.call_budget {
        gw = gw.with_call_budget(n);
    }
    let seed = cfg.run.seed;
    let mut seeds = BTreeMap::new();
    seeds.insert("concept_model".to_string(), seed);
    seeds.insert("classifier".to_string(), seed.wrapping_add(1));
    seeds.insert("leakage_probe".to_string(), seed.wrapping_add(2));

    let previous = RunManifest::load(run_dir).ok().filter(|m| m.config_digest == config_digest && m.inputs == inputs);
    let mut manifest = RunManifest {
        format: RUN_FORMAT,
        name: cfg.run.name.clone(),
        config_digest: config_digest.clone(),
        config: config_text,
        inputs: inputs.clone(),
        seeds,
        cache_digest: None,
        stages: Vec::new(),
    };
    let ctx = Ctx {
        cfg,
        dir: run_dir.to_path_buf(),
        gw,
        train,
        val,
        test,
        seed,
    };
    let root = sha256_hex(format!("{config_digest}\n{}", serde_json::to_string(&inputs)?));
    let mut reuse = true;
    for stage in Stage::ALL {
        let key = chain_key(&root, stage, &manifest.stages);
        let prior = previous
            .as_ref()
            .and_then(|m| m.record(stage))
            .filter(|r| r.key == key && outputs_intact(run_dir, r));
        if let (true, Some(rec)) = (reuse, prior) {
            log::info!("{stage}: up to date");
            manifest.stages.push(rec.clone());
        } else {
            reuse = false;
            log::info!("{stage}: running");
            let before = ctx.gw.stats();
            let started = Instant::now();
            let out = ctx.run_stage(stage).map_err(|e| stage_error(stage, e));
            let out = match out {
                Ok(o) => o,
                Err(e) => {
                    manifest.cache_digest = Some(ctx.gw.cache().content_digest());
                    manifest.save(run_dir)?;
                    return Err(e);
                }
            };
            let after = ctx.gw.stats();
            let mut outputs = BTreeMap::new();
            for rel in &out.outputs {
                outputs.insert(rel.to_string(), file_digest(&run_dir.join(rel))?);
            }
            manifest.stages.push(StageRecord {
                stage,
                key,
                outputs,
                skipped: out.skipped,
                seconds: started.elapsed().as_secs_f64(),
                backend_calls: after.backend_calls - before.backend_calls,
                cache_hits: after.cache_hits - before.cache_hits,
                notes: out.notes,
            });
            manifest.cache_digest = Some(ctx.gw.cache().content_digest());
            manifest.save(run_dir)?;
        }
        if opts.until == Some(stage) {
            break;
        }
    }
    manifest.cache_digest = Some(ctx.gw.cache().content_digest());
    manifest.save(run_dir)?;
    Ok(manifest)
}

/// Regenerate the report of a finished run without any backend.
pub fn regenerate_report(run_dir: &Path, out: &Path) -> Result<()> {
    let manifest = RunManifest::load(run_dir)?;
    let cfg = Config::parse(&manifest.config)?;
    let bundle = report_bundle(run_dir, &manifest, cfg.report.include_timing)?;
    write_file(out, crate::eval::render_markdown(&bundle).as_bytes())
}

/// Keyword set persisted by the detection stage.
pub fn load_keywords(run_dir: &Path) -> Result<KeywordSet> {
    read_json(&run_dir.join(paths::KEYWORDS))
}

pub fn artifact_path(run_dir: &Path, stage_output: &str) -> PathBuf {
    run_dir.join(stage_output)
}

pub use paths::{
    ANNOTATIONS as ANNOTATIONS_PATH, CLASSIFIER as CLASSIFIER_PATH, CONCEPT_MODEL as CONCEPT_MODEL_PATH,
    CORRELATION as CORRELATION_PATH, FLIPS as FLIPS_PATH, METRICS as METRICS_PATH, POOL_COLLECTED as POOL_COLLECTED_PATH,
    POOL_FINAL as POOL_FINAL_PATH, REFINED as REFINED_PATH, REPORT_MD as REPORT_PATH, SWEEP as SWEEP_PATH,
};
