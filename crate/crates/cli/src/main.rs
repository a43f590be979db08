//! `cbmforge` command line: one subcommand per stage plus `run`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbmforge::annotate::{annotate, PromptTemplate};
use cbmforge::data::{load_manifest, write_file};
use cbmforge::eval::{attribute_consensus, group_metrics, group_sizes};
use cbmforge::fixtures::{fixture_by_name, FIXTURE_NAMES};
use cbmforge::nn::{
    audit_leakage, predict_concepts, train_classifier, train_concept_model, ConceptModel, LabelClassifier,
    PredictMode, ValidationSet,
};
use cbmforge::pipeline::{build_gateway, regenerate_report, run_pipeline, validate_config, Config, RunOptions, Stage};
use cbmforge::pool::{collect_concepts, dedup_pool, filter_spurious, PromptKind};
use cbmforge::refine::{refine_annotations, RefinementPlan};
use cbmforge::spurious::{detect_spurious, CorrelationReport, DetectionSettings};
use cbmforge::{AnnotationMatrix, ConceptPool, DatasetManifest, Error, Gateway, Result};

#[derive(Parser)]
#[command(name = "cbmforge", version, about = "Build and audit annotation-based concept bottleneck models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that talks to a backend.
#[derive(Args)]
struct BackendOpts {
    /// Run configuration (backends, roles, thresholds).
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the response cache and derived images.
    #[arg(long, default_value = ".")]
    work: PathBuf,
    /// Serve every call from the cache; a miss is an error.
    #[arg(long)]
    replay_only: bool,
}

impl BackendOpts {
    fn load(&self) -> Result<(Config, Gateway)> {
        let cfg = validate_config(&self.config, self.replay_only)?;
        let gw = build_gateway(&cfg, &self.work, self.replay_only)?;
        Ok((cfg, gw))
    }
}

/// Options for commands that only need the training settings.
#[derive(Args)]
struct TrainOpts {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOpts {
    fn load(&self) -> Result<(Config, u64)> {
        let cfg = validate_config(&self.config, true)?;
        let seed = self.seed.unwrap_or(cfg.run.seed);
        Ok((cfg, seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline into a run directory, resuming completed stages.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        replay_only: bool,
        /// Stop after this stage.
        #[arg(long)]
        until: Option<Stage>,
    },
    /// Check a configuration and print it with all defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replay_only: bool,
    },
    /// Query the language model for candidate concepts and deduplicate them.
    PoolCollect {
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated prompt families; defaults to the configured list.
        #[arg(long)]
        prompts: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe images, correlate keywords with classes and select S2.
    DetectSpurious {
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also filter this pool against the selected keywords.
        #[arg(long, requires = "pool_out")]
        pool: Option<PathBuf>,
        #[arg(long)]
        pool_out: Option<PathBuf>,
    },
    /// Ask the vision-language model about every (image, concept) pair.
    Annotate {
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Prompt template containing `{attribute}`.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-annotate target concepts on background-removed images.
    Refine {
        #[command(flatten)]
        backend: BackendOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        /// Comma-separated concept phrases.
        #[arg(long)]
        targets: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Fit the concept model on features and an annotation matrix.
    TrainConcept {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the label classifier on annotations or predicted concepts.
    TrainClassifier {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        concept_model: PathBuf,
        /// Train on these annotations instead of the concept model's predictions.
        #[arg(long)]
        ann: Option<PathBuf>,
        /// Validation manifest for early stopping on worst-group accuracy.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe hard concept predictions for the spurious attribute.
    AuditLeakage {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        concept_model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group-aware metrics of a trained model on a manifest.
    Evaluate {
        /// Label classifier file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        concept_model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Training manifest whose group sizes weight the adjusted average.
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        consensus: Option<PathBuf>,
    },
    /// Regenerate the report of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one of the shipped fixtures to a versioned directory.
    GenFixture {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(FIXTURE_NAMES))]
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn csv_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn hard(model: &ConceptModel, m: &DatasetManifest) -> Result<Vec<Vec<f64>>> {
    predict_concepts(model, &m.features()?, PredictMode::Hard)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            run,
            replay_only,
            until,
        } => {
            let opts = RunOptions {
                replay_only,
                until,
                ..Default::default()
            };
            let m = run_pipeline(&config, &run, &opts)?;
            for r in &m.stages {
                let state = if r.skipped { "skipped" } else { "done" };
                println!("{:<17} {state:<8} calls={:<6} hits={}", r.stage.as_str(), r.backend_calls, r.cache_hits);
            }
            println!("run directory: {}", run.display());
        }
        Command::ValidateConfig { config, replay_only } => {
            print!("{}", validate_config(&config, replay_only)?.to_toml()?);
        }
        Command::PoolCollect {
            backend,
            manifest,
            prompts,
            out,
        } => {
            let (cfg, gw) = backend.load()?;
            let m = load_manifest(&manifest)?;
            let kinds = match prompts {
                Some(p) => PromptKind::parse_list(&p)?,
                None => cfg.pool.prompts.clone(),
            };
            let classes = m.class_names().to_vec();
            let collected = collect_concepts(&classes, &gw, &cfg.roles.llm, &kinds)?;
            let pool = dedup_pool(&collected, &classes, &gw, &cfg.roles.embed, cfg.pool.theta_concept, cfg.pool.theta_class)?;
            pool.save(&out)?;
            println!("collected {} concepts, {} active after dedup", pool.len(), pool.active_count());
        }
        Command::DetectSpurious {
            backend,
            manifest,
            tau,
            out,
            pool,
            pool_out,
        } => {
            let (cfg, gw) = backend.load()?;
            let m = load_manifest(&manifest)?;
            let refs = gw.images().register_manifest(&m)?;
            let settings = DetectionSettings {
                vl_backend: cfg.roles.vlm.clone(),
                text_backend: cfg.roles.llm.clone(),
                embed_backends: cfg.roles.embed.clone(),
                examples: cfg.detect.examples.examples(),
                theta_merge: cfg.detect.theta_merge,
                tau: tau.unwrap_or(cfg.detect.tau),
            };
            let detected = detect_spurious(&m, &gw, &refs, &settings)?;
            write_file(&out, format!("{}\n", detected.report.to_json()?).as_bytes())?;
            println!("selected {} spurious keywords", detected.report.selected.len());
            if let (Some(p), Some(o)) = (pool, pool_out) {
                let filtered = filter_pool(&p, &detected.report, &gw, &cfg)?;
                filtered.save(&o)?;
                println!("{} concepts retained", filtered.active_count());
            }
        }
        Command::Annotate {
            backend,
            manifest,
            pool,
            template,
            out,
        } => {
            let (cfg, gw) = backend.load()?;
            let m = load_manifest(&manifest)?;
            let pool = ConceptPool::load(&pool)?;
            let template = match template {
                Some(t) => PromptTemplate::new(&t)?,
                None => cfg.annotate.prompt_template()?,
            };
            let refs = gw.images().register_manifest(&m)?;
            let outcome = annotate(&m, &refs, &pool, &gw, &cfg.roles.vlm, &template)?;
            outcome.matrix.save(&out)?;
            let s = &outcome.stats;
            println!(
                "{} queries, {} abstains, {:.1} images/s",
                s.queries, s.abstains, s.images_per_second
            );
        }
        Command::Refine {
            backend,
            manifest,
            ann,
            targets,
            out,
            report,
        } => {
            let (cfg, gw) = backend.load()?;
            let m = load_manifest(&manifest)?;
            let raw = AnnotationMatrix::load(&ann)?;
            let mut plan = RefinementPlan::new(&csv_list(&targets));
            plan.chain = cfg.refine.chain.clone();
            plan.instruction = cfg.refine.instruction.clone();
            let tools = cfg
                .roles
                .tools
                .as_deref()
                .ok_or_else(|| Error::Config(vec!["roles.tools: required for refinement".into()]))?;
            let refs = gw.images().register_manifest(&m)?;
            let template = cfg.annotate.prompt_template()?;
            let r = refine_annotations(&raw, &m, &refs, &plan, &gw, tools, &cfg.roles.vlm, &template)?;
            r.matrix.save(&out)?;
            write_json(&report, &r.report)?;
            println!("{} images flagged for refinement", r.report.flagged.len());
        }
        Command::TrainConcept {
            train,
            manifest,
            ann,
            out,
        } => {
            let (cfg, seed) = train.load()?;
            let m = load_manifest(&manifest)?;
            let matrix = AnnotationMatrix::load(&ann)?;
            let model = train_concept_model(&m.features()?, &matrix, &cfg.training.concept_model, seed)?;
            model.save(&out)?;
            for w in &model.warnings {
                log::warn!("{w}");
            }
        }
        Command::TrainClassifier {
            train,
            manifest,
            concept_model,
            ann,
            val,
            out,
        } => {
            let (cfg, seed) = train.load()?;
            let m = load_manifest(&manifest)?;
            let g = ConceptModel::load(&concept_model)?;
            let inputs = match ann {
                Some(p) => AnnotationMatrix::load(&p)?
                    .bits
                    .iter()
                    .map(|r| r.iter().map(|&b| f64::from(b)).collect())
                    .collect(),
                None => hard(&g, &m)?,
            };
            let val_set = match val {
                Some(p) => {
                    let v = load_manifest(&p)?;
                    let groups = v
                        .records
                        .iter()
                        .map(|r| {
                            v.group_of(r)
                                .ok_or_else(|| Error::Precondition(format!("validation record `{}` has no group", r.id)))
                        })
                        .collect::<Result<_>>()?;
                    Some(ValidationSet {
                        inputs: hard(&g, &v)?,
                        labels: v.labels(),
                        groups,
                    })
                }
                None => None,
            };
            let f = train_classifier(&inputs, &m.labels(), m.num_classes(), &cfg.training.classifier, val_set.as_ref(), seed)?;
            f.save(&out)?;
            match f.best_epoch {
                Some(e) => println!("kept epoch {e}"),
                None => println!("no epochs run; kept the initialization"),
            }
        }
        Command::AuditLeakage {
            train,
            manifest,
            concept_model,
            out,
        } => {
            let (cfg, seed) = train.load()?;
            let m = load_manifest(&manifest)?;
            let spurious = m
                .records
                .iter()
                .map(|r| r.spurious_label)
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| Error::Precondition("manifest has records without spurious_label".into()))?;
            let g = ConceptModel::load(&concept_model)?;
            let result = audit_leakage(&hard(&g, &m)?, &spurious, &cfg.leakage.probe, seed)?;
            write_json(&out, &result)?;
            println!("probe accuracy {:.4}", result.accuracy);
        }
        Command::Evaluate {
            model,
            concept_model,
            manifest,
            train_manifest,
            out,
            consensus,
        } => {
            let m = load_manifest(&manifest)?;
            let g = ConceptModel::load(&concept_model)?;
            let f = LabelClassifier::load(&model)?;
            let concepts = hard(&g, &m)?;
            let preds = f.predict_batch(&concepts)?;
            let weights = train_manifest.map(|p| load_manifest(&p).and_then(|t| group_sizes(&t))).transpose()?;
            let opt: Vec<Option<usize>> = preds.iter().copied().map(Some).collect();
            let metrics = group_metrics(&opt, &m, weights.as_ref())?;
            write_json(&out, &metrics)?;
            if let Some(path) = consensus {
                let bits: Vec<Vec<u8>> = concepts
                    .iter()
                    .map(|r| r.iter().map(|v| u8::from(*v >= 0.5)).collect())
                    .collect();
                write_json(&path, &attribute_consensus(&bits, &preds, &m.labels(), m.num_classes())?)?;
            }
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Report { run, out } => regenerate_report(&run, &out)?,
        Command::GenFixture { name, out, seed } => {
            let config = fixture_by_name(&name, seed)?.write(&out)?;
            println!("{}", config.display());
        }
    }
    Ok(())
}

fn filter_pool(pool: &Path, report: &CorrelationReport, gw: &Gateway, cfg: &Config) -> Result<ConceptPool> {
    let pool = ConceptPool::load(pool)?;
    filter_spurious(&pool, report, gw, &cfg.roles.embed, cfg.pool.theta_spur)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
