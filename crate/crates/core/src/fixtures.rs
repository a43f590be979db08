//! Deterministic fixtures: a seeded synthetic dataset generator and three
//! shipped mock-scale corpora (opener, metashift and waterbirds style).
//!
//! Images are tag lists; the mock backends answer from the tags, so every
//! fixture runs fully offline and bit-reproducibly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::data::{write_file, DatasetManifest, GroupDef, ImageRecord, ManifestHeader, Split};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::{BehaviorRule, BehaviorTable, Capability};
use crate::nn::{ClassifierConfig, ConceptTrainConfig};
use crate::pipeline::{
    AnnotateSection, BackendSpec, Config, DataSection, DetectSection, ExampleSet, LeakageSection, PoolSection,
    RefineSection, ReportSection, Roles, RunSection, TrainingSection,
};
use crate::pool::{
    distinguished_prompt, important_features_prompt, seen_around_prompt, subclass_prompt, superclass_prompt,
    PromptKind,
};
use crate::text::{attribute_tag, raw_tokens};

pub const FIXTURE_VERSION: u32 = 1;
pub const FIXTURE_NAMES: &[&str] = &["opener", "metashift", "waterbirds"];

/// How a concept's presence is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptRates {
    /// Bernoulli rate per class.
    PerClass(Vec<f64>),
    /// Bernoulli rate per spurious value; such a concept leaks the background.
    PerSpurious(Vec<f64>),
    /// Exactly this many positives per class.
    ExactPerClass(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub phrase: String,
    pub rates: ConceptRates,
}

impl ConceptSpec {
    pub fn per_class(phrase: &str, rates: &[f64]) -> Self {
        ConceptSpec {
            phrase: phrase.into(),
            rates: ConceptRates::PerClass(rates.to_vec()),
        }
    }

    pub fn per_spurious(phrase: &str, rates: &[f64]) -> Self {
        ConceptSpec {
            phrase: phrase.into(),
            rates: ConceptRates::PerSpurious(rates.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    /// Background (spurious attribute) values; class `c` is aligned with value `c % len`.
    pub spurious_names: Vec<String>,
    pub per_class: usize,
    /// Per class, probability of the aligned spurious value.
    pub cooccurrence: Vec<f64>,
    /// Use exactly `round(rate * per_class)` aligned records instead of sampling.
    pub exact: bool,
    pub concepts: Vec<ConceptSpec>,
    pub feature_dim: usize,
    pub spurious_strength: f64,
    pub noise: f64,
    /// Seeds the concept and background directions shared by all splits.
    pub geometry_seed: u64,
    pub split: Split,
    pub id_prefix: String,
}

impl SyntheticSpec {
    /// Two classes, two backgrounds, the given co-occurrence, class-driven concepts.
    pub fn two_class(per_class: usize, cooccurrence: f64, concepts: Vec<ConceptSpec>) -> Self {
        SyntheticSpec {
            class_names: vec!["class a".into(), "class b".into()],
            spurious_names: vec!["background x".into(), "background y".into()],
            per_class,
            cooccurrence: vec![cooccurrence, cooccurrence],
            exact: false,
            concepts,
            feature_dim: 32,
            spurious_strength: 1.0,
            noise: 0.3,
            geometry_seed: 7,
            split: Split::Train,
            id_prefix: "img-".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        let l = self.class_names.len();
        let unit = |what: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{what} rate {v} outside [0, 1]")))
            }
        };
        if l < 2 || self.spurious_names.is_empty() {
            return Err(Error::Invalid("need at least 2 classes and 1 spurious value".into()));
        }
        if self.cooccurrence.len() != l {
            return Err(Error::Dimension(format!("{} co-occurrence rates for {l} classes", self.cooccurrence.len())));
        }
        for &r in &self.cooccurrence {
            unit("co-occurrence", r)?;
        }
        if self.feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be positive".into()));
        }
        for c in &self.concepts {
            match &c.rates {
                ConceptRates::PerClass(r) | ConceptRates::PerSpurious(r) => {
                    let want = if matches!(c.rates, ConceptRates::PerClass(_)) { l } else { self.spurious_names.len() };
                    if r.len() != want {
                        return Err(Error::Dimension(format!("concept `{}` has {} rates, expected {want}", c.phrase, r.len())));
                    }
                    for &v in r {
                        unit(&format!("concept `{}`", c.phrase), v)?;
                    }
                }
                ConceptRates::ExactPerClass(k) => {
                    if k.len() != l || k.iter().any(|&k| k > self.per_class) {
                        return Err(Error::Invalid(format!("bad exact counts for concept `{}`", c.phrase)));
                    }
                }
            }
        }
        Ok(())
    }

    fn directions(&self, count: usize, salt: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.geometry_seed ^ salt);
        let scale = 1.0 / (self.feature_dim as f64).sqrt();
        (0..count)
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| scale * normal(&mut rng))
                    .collect()
            })
            .collect()
    }

    /// Direction each concept adds to the features of images showing it.
    pub fn concept_directions(&self) -> Vec<Vec<f64>> {
        self.directions(self.concepts.len(), 0xc0c0)
    }

    /// Direction each background value adds, scaled by `spurious_strength`.
    pub fn spurious_directions(&self) -> Vec<Vec<f64>> {
        self.directions(self.spurious_names.len(), 0xb9b9)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn slug(s: &str) -> String {
    raw_tokens(s).join("_")
}

/// Generate a manifest whose records carry features, tags, ground-truth
/// concepts, spurious labels and class × background groups.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let s_count = spec.spurious_names.len();
    let l = spec.class_names.len();
    let u = spec.concept_directions();
    let v = spec.spurious_directions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_scale = spec.noise / (spec.feature_dim as f64).sqrt();

    let mut records = Vec::with_capacity(l * spec.per_class);
    for c in 0..l {
        let aligned = c % s_count;
        let mut order: Vec<usize> = (0..spec.per_class).collect();
        order.shuffle(&mut rng);
        let n_aligned = (spec.cooccurrence[c] * spec.per_class as f64).round() as usize;
        let aligned_set: BTreeSet<usize> = order[..n_aligned.min(spec.per_class)].iter().copied().collect();
        let exact_sets: Vec<BTreeSet<usize>> = spec
            .concepts
            .iter()
            .map(|cs| match &cs.rates {
                ConceptRates::ExactPerClass(k) => {
                    let mut o: Vec<usize> = (0..spec.per_class).collect();
                    o.shuffle(&mut rng);
                    o[..k[c]].iter().copied().collect()
                }
                _ => BTreeSet::new(),
            })
            .collect();
        for i in 0..spec.per_class {
            let is_aligned = if spec.exact {
                aligned_set.contains(&i)
            } else {
                rng.random::<f64>() < spec.cooccurrence[c]
            };
            let s = if is_aligned || s_count == 1 {
                aligned
            } else {
                let k = rng.random_range(0..s_count - 1);
                if k >= aligned {
                    k + 1
                } else {
                    k
                }
            };
            let bits: Vec<u8> = spec
                .concepts
                .iter()
                .zip(&exact_sets)
                .map(|(cs, exact)| {
                    let on = match &cs.rates {
                        ConceptRates::PerClass(r) => rng.random::<f64>() < r[c],
                        ConceptRates::PerSpurious(r) => rng.random::<f64>() < r[s],
                        ConceptRates::ExactPerClass(_) => exact.contains(&i),
                    };
                    u8::from(on)
                })
                .collect();
            let mut x: Vec<f64> = v[s].iter().map(|t| spec.spurious_strength * t).collect();
            for (b, dir) in bits.iter().zip(&u) {
                if *b == 1 {
                    for (a, d) in x.iter_mut().zip(dir) {
                        *a += d;
                    }
                }
            }
            for a in x.iter_mut() {
                *a += noise_scale * normal(&mut rng);
            }
            let mut tags = vec![
                format!("obj_{}", slug(&spec.class_names[c])),
                format!("bg_{}", slug(&spec.spurious_names[s])),
            ];
            for (b, cs) in bits.iter().zip(&spec.concepts) {
                if *b == 1 {
                    tags.push(attribute_tag(&cs.phrase));
                }
            }
            let mut r = ImageRecord::new(format!("{}{:05}", spec.id_prefix, records.len()), c);
            r.spurious_label = Some(s);
            r.group_label = Some(c * s_count + s);
            r.features = Some(x);
            r.gt_concepts = if spec.concepts.is_empty() { None } else { Some(bits) };
            r.tags = Some(tags);
            records.push(r);
        }
    }
    let group_table = (0..l)
        .flat_map(|c| (0..s_count).map(move |s| (c, s)))
        .map(|(c, s)| GroupDef {
            id: c * s_count + s,
            name: format!("{} / {}", spec.class_names[c], spec.spurious_names[s]),
            class_label: Some(c),
            spurious_label: Some(s),
        })
        .collect();
    let m = DatasetManifest {
        header: ManifestHeader {
            class_names: spec.class_names.clone(),
            feature_dim: Some(spec.feature_dim),
            split: spec.split,
            group_table,
            eval_mode: Default::default(),
        },
        records,
        base_dir: None,
    };
    m.validate()?;
    Ok(m)
}

/// Phi coefficient of a keyword present in `a` of `n_in` class records and
/// `b` of `n_out` other records.
pub fn phi_from_counts(a: usize, b: usize, n_in: usize, n_out: usize) -> f64 {
    let n = (n_in + n_out) as f64;
    let nx = (a + b) as f64;
    let ny = n_in as f64;
    let den = (nx * (n - nx) * ny * (n - ny)).sqrt();
    if den == 0.0 {
        return 0.0;
    }
    (n * a as f64 - nx * ny) / den
}

/// Smallest counts (fewest out-of-class hits first, at least one when possible)
/// whose coefficient lies in `[target + 1e-6, target + 0.005)`.
pub fn counts_for_phi(target: f64, n_in: usize, n_out: usize) -> Result<(usize, usize)> {
    let ok = |p: f64| p >= target + 1e-6 && p < target + 0.005;
    for b in (1..=n_out).chain(std::iter::once(0)) {
        for a in 1..=n_in {
            if ok(phi_from_counts(a, b, n_in, n_out)) {
                return Ok((a, b));
            }
        }
    }
    Err(Error::Invalid(format!("no counts reach coefficient {target} with {n_in}/{n_out} records")))
}

/// Which records mention a caption keyword.
#[derive(Debug, Clone, PartialEq)]
pub enum KeywordSelect {
    /// Enough records of `class` (and outside it) to hit the coefficient.
    Phi { class: usize, target: f64 },
    /// Exactly the records with this spurious value.
    Spurious(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionKeyword {
    pub keyword: String,
    pub select: KeywordSelect,
}

impl CaptionKeyword {
    pub fn phi(keyword: &str, class: usize, target: f64) -> Self {
        CaptionKeyword {
            keyword: keyword.into(),
            select: KeywordSelect::Phi { class, target },
        }
    }
}

/// Attach a `caption=` tag to every record: `base`, then the keywords it mentions.
pub fn apply_captions(m: &mut DatasetManifest, base: &str, keywords: &[CaptionKeyword], seed: u64) -> Result<()> {
    let mut mentions: Vec<Vec<&str>> = vec![Vec::new(); m.records.len()];
    for (k, kw) in keywords.iter().enumerate() {
        let chosen: Vec<usize> = match kw.select {
            KeywordSelect::Spurious(s) => (0..m.records.len())
                .filter(|&i| m.records[i].spurious_label == Some(s))
                .collect(),
            KeywordSelect::Phi { class, target } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 0x9e37));
                let mut inside: Vec<usize> = (0..m.records.len()).filter(|&i| m.records[i].class_label == class).collect();
                let mut outside: Vec<usize> = (0..m.records.len()).filter(|&i| m.records[i].class_label != class).collect();
                let (a, b) = counts_for_phi(target, inside.len(), outside.len())?;
                inside.shuffle(&mut rng);
                outside.shuffle(&mut rng);
                inside[..a].iter().chain(&outside[..b]).copied().collect()
            }
        };
        for i in chosen {
            mentions[i].push(&kw.keyword);
        }
    }
    for (r, kws) in m.records.iter_mut().zip(mentions) {
        let caption = if kws.is_empty() {
            base.to_string()
        } else {
            format!("{base} with {}", kws.join(" and "))
        };
        r.tags.get_or_insert_with(Vec::new).push(format!("caption={caption}"));
    }
    Ok(())
}

/// One scripted concept-collection answer.
#[derive(Debug, Clone)]
struct Answer {
    prompt: String,
    items: Vec<&'static str>,
}

fn answer(kind: PromptKind, subject: &str, other: Option<&str>, items: &[&'static str]) -> Answer {
    let prompt = match kind {
        PromptKind::ImportantFeatures => important_features_prompt(subject),
        PromptKind::Superclass => superclass_prompt(subject),
        PromptKind::SeenAround => seen_around_prompt(subject),
        PromptKind::Distinguished => distinguished_prompt(subject, other.unwrap_or_default()),
        PromptKind::Subclass => subclass_prompt(subject),
    };
    Answer {
        prompt,
        items: items.to_vec(),
    }
}

fn bullets(items: &[&str]) -> String {
    items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n")
}

/// Rules answering each scripted prompt, then empty lists for any other collection prompt.
fn collection_rules(answers: &[Answer]) -> Vec<BehaviorRule> {
    let mut rules: Vec<BehaviorRule> = answers
        .iter()
        .map(|a| {
            BehaviorRule::new(&format!("^{}$", regex::escape(&a.prompt)), &bullets(&a.items))
                .with_capability(Capability::TextGen)
        })
        .collect();
    rules.push(
        BehaviorRule::new(
            "^(List the most important features|Give superclasses|List the things most commonly seen|Provide a list of visual features|List the subclasses)",
            "",
        )
        .with_capability(Capability::TextGen),
    );
    rules
}

/// Distinct phrases in answer order, i.e. the order the pool collects them.
fn collection_order(answers: &[Answer]) -> Vec<&'static str> {
    let mut seen = BTreeSet::new();
    answers
        .iter()
        .flat_map(|a| a.items.iter().copied())
        .filter(|p| seen.insert(*p))
        .collect()
}

fn alias(table: &mut BehaviorTable, phrase: &str, mix: &[(&str, f64)]) {
    table
        .aliases
        .insert(phrase.to_string(), mix.iter().map(|(a, w)| (a.to_string(), *w)).collect());
}

/// A complete runnable corpus: three splits, mock behavior and a run config.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub behavior: BehaviorTable,
    pub config: Config,
    /// Pool phrases expected to survive filtering, in pool order.
    pub expected_concepts: Vec<String>,
    pub spec: SyntheticSpec,
}

impl Fixture {
    pub fn dir_name(&self) -> String {
        format!("{}-v{FIXTURE_VERSION}", self.name)
    }

    /// Write the fixture under `root/<name>-v<version>/` with a `DIGESTS`
    /// file and return the config path.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(self.dir_name());
        let mut files: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
        files.insert("train.jsonl", self.train.to_text()?.into_bytes());
        files.insert("val.jsonl", self.val.to_text()?.into_bytes());
        files.insert("test.jsonl", self.test.to_text()?.into_bytes());
        let mut behavior = serde_json::to_string_pretty(&self.behavior)?;
        behavior.push('\n');
        files.insert("behavior.json", behavior.into_bytes());
        files.insert("config.toml", self.config.to_toml()?.into_bytes());
        let mut digests = String::new();
        for (name, bytes) in &files {
            write_file(&dir.join(name), bytes)?;
            digests.push_str(&format!("{}  {name}\n", sha256_hex(bytes)));
        }
        write_file(&dir.join("DIGESTS"), digests.as_bytes())?;
        Ok(dir.join("config.toml"))
    }
}

/// Check a written fixture directory against its `DIGESTS` file.
pub fn verify_fixture_dir(dir: &Path) -> Result<()> {
    let listing = crate::data::read_to_string(&dir.join("DIGESTS"))?;
    for line in listing.lines().filter(|l| !l.trim().is_empty()) {
        let (digest, name) = line
            .split_once("  ")
            .ok_or_else(|| Error::Invalid(format!("bad DIGESTS line `{line}`")))?;
        let actual = crate::digest::file_digest(&dir.join(name))?;
        if actual != digest {
            return Err(Error::Invalid(format!("{name} does not match its recorded digest")));
        }
    }
    Ok(())
}

pub fn fixture_by_name(name: &str, seed: u64) -> Result<Fixture> {
    match name {
        "opener" => opener_fixture(seed),
        "metashift" => metashift_fixture(seed),
        "waterbirds" => waterbirds_fixture(seed),
        other => Err(Error::Invalid(format!(
            "unknown fixture `{other}` (expected one of {})",
            FIXTURE_NAMES.join(", ")
        ))),
    }
}

fn mock(id: &str, seed: u64) -> BackendSpec {
    BackendSpec::Mock {
        id: id.into(),
        seed,
        behavior: Some("behavior.json".into()),
    }
}

fn base_config(name: &str, seed: u64) -> Config {
    Config {
        run: RunSection {
            name: name.into(),
            seed,
            cache: "cache.jsonl".into(),
        },
        data: DataSection {
            train: "train.jsonl".into(),
            val: Some("val.jsonl".into()),
            test: Some("test.jsonl".into()),
        },
        backends: vec![mock("llm", 11), mock("vlm", 12), mock("clip", 13), mock("mpnet", 14)],
        roles: Roles {
            llm: "llm".into(),
            vlm: "vlm".into(),
            embed: vec!["clip".into(), "mpnet".into()],
            tools: None,
        },
        pool: PoolSection::default(),
        detect: DetectSection::default(),
        annotate: AnnotateSection::default(),
        refine: RefineSection::default(),
        training: TrainingSection {
            concept_model: ConceptTrainConfig {
                epochs: 30,
                ..Default::default()
            },
            classifier: ClassifierConfig {
                learning_rate: 0.01,
                epochs: 60,
                hidden: vec![64, 32, 16],
                ..Default::default()
            },
            ..Default::default()
        },
        leakage: LeakageSection {
            enabled: true,
            probe: ClassifierConfig {
                learning_rate: 0.01,
                epochs: 40,
                hidden: vec![16],
                ..Default::default()
            },
        },
        report: ReportSection::default(),
        base_dir: PathBuf::new(),
    }
}

/// Seeded per-class rates in [0.1, 0.9] for class-driven concepts.
fn class_rates(phrases: &[&str], classes: usize, seed: u64) -> Vec<ConceptSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    phrases
        .iter()
        .map(|p| {
            let rates: Vec<f64> = (0..classes).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
            ConceptSpec::per_class(p, &rates)
        })
        .collect()
}

struct Splits {
    train: DatasetManifest,
    val: DatasetManifest,
    test: DatasetManifest,
}

fn splits(train_spec: &SyntheticSpec, seed: u64, held_out_per_class: usize) -> Result<Splits> {
    let held = |split: Split, prefix: &str| {
        let mut s = train_spec.clone();
        s.split = split;
        s.id_prefix = prefix.into();
        s.per_class = held_out_per_class;
        s.cooccurrence = vec![0.5; s.class_names.len()];
        s.exact = true;
        s
    };
    Ok(Splits {
        train: gen_synthetic_dataset(train_spec, seed)?,
        val: gen_synthetic_dataset(&held(Split::Val, "val-"), seed.wrapping_add(1))?,
        test: gen_synthetic_dataset(&held(Split::Test, "test-"), seed.wrapping_add(2))?,
    })
}

pub const METASHIFT_CAT_KEYWORDS: &[(&str, f64)] = &[
    ("kitty", 0.96),
    ("computer", 0.44),
    ("dark", 0.35),
    ("laying", 0.33),
    ("bed", 0.32),
    ("couch", 0.24),
];
pub const METASHIFT_DOG_KEYWORDS: &[(&str, f64)] = &[
    ("puppy", 0.97),
    ("women", 0.35),
    ("leash", 0.32),
    ("walking", 0.30),
    ("small", 0.27),
    ("bike", 0.25),
    ("frisbee", 0.23),
    ("catching", 0.20),
    ("benches", 0.20),
    ("jumping", 0.20),
];

/// Two classes (cat, dog) with a context confound; captions are built so the
/// detector measures the published keyword coefficients.
pub fn metashift_fixture(seed: u64) -> Result<Fixture> {
    let (cat, dog) = ("cat", "dog");
    let answers = vec![
        answer(PromptKind::ImportantFeatures, cat, None, &[
            "erect ears",
            "a short snout",
            "a flat snout with closely set nostrils",
            "a slender tail",
            "a flexible tail",
            "oval-shaped paws with retractable claws",
            "a smooth fur",
        ]),
        answer(PromptKind::ImportantFeatures, dog, None, &[
            "floppy ear",
            "semi-erect ears",
            "prominent snout with more separated nostrils",
            "a curly tail",
            "a straight tail",
            "round paws",
        ]),
        answer(PromptKind::Superclass, cat, None, &["mammal"]),
        answer(PromptKind::Superclass, dog, None, &["mammal"]),
        answer(PromptKind::SeenAround, cat, None, &[
            "a collar",
            "a food bowl",
            "a litter box",
            "a person",
            "a scratching post",
            "a toy",
            "a cat bed",
            "a cat toy",
        ]),
        answer(PromptKind::SeenAround, dog, None, &["a collar", "a dog tag", "a food bowl", "a person", "a toy", "leash"]),
        answer(PromptKind::Distinguished, cat, Some(dog), &["a fluffy tail", "a sleek tail", "a curly fur", "a wirly fur"]),
        answer(PromptKind::Distinguished, dog, Some(cat), &["a smooth fur", "round paws"]),
    ];
    let removed = ["mammal", "a cat bed", "a cat toy", "leash"];
    let kept: Vec<&str> = collection_order(&answers)
        .into_iter()
        .filter(|p| !removed.contains(p))
        .collect();

    let mut behavior = BehaviorTable {
        rules: collection_rules(&answers),
        remove_background: true,
        ..Default::default()
    };
    alias(&mut behavior, "mammal", &[("dog", 1.0)]);
    alias(&mut behavior, "a cat bed", &[("bed", 1.0), ("a cat bed", 0.3)]);
    alias(&mut behavior, "a cat toy", &[("leash", 1.0), ("a cat toy", 0.55)]);

    let spec = SyntheticSpec {
        class_names: vec![cat.into(), dog.into()],
        spurious_names: vec!["indoor".into(), "outdoor".into()],
        per_class: 100,
        cooccurrence: vec![0.8, 0.8],
        exact: true,
        concepts: class_rates(&kept, 2, seed ^ 0x3e7a),
        feature_dim: 32,
        spurious_strength: 1.0,
        noise: 0.3,
        geometry_seed: seed ^ 0x6e0,
        split: Split::Train,
        id_prefix: "train-".into(),
    };
    let mut s = splits(&spec, seed, 40)?;
    let keywords: Vec<CaptionKeyword> = METASHIFT_CAT_KEYWORDS
        .iter()
        .map(|(k, t)| CaptionKeyword::phi(k, 0, *t))
        .chain(METASHIFT_DOG_KEYWORDS.iter().map(|(k, t)| CaptionKeyword::phi(k, 1, *t)))
        .collect();
    apply_captions(&mut s.train, "a photo", &keywords, seed)?;

    let mut config = base_config("metashift", seed);
    config.detect = DetectSection {
        tau: 0.2,
        examples: ExampleSet::Metashift,
        sweep: vec![0.2, 0.25, 0.33],
        ..Default::default()
    };
    Ok(Fixture {
        name: "metashift".into(),
        train: s.train,
        val: s.val,
        test: s.test,
        behavior,
        config,
        expected_concepts: kept.iter().map(|s| s.to_string()).collect(),
        spec,
    })
}

pub const OPENER_S2: [&[(&str, f64)]; 2] = [
    &[("can", 0.39), ("opener", 0.24), ("person", 0.22)],
    &[("knife", 0.52), ("wood", 0.28), ("gold", 0.27), ("design", 0.26), ("surface", 0.20)],
];

/// Target of the refinement confound and its constructed counts per 100
/// training images: truly wooden, and on a wooden table only.
pub const REFINE_TARGET: &str = "wood material";
pub const REFINE_WOODEN: [usize; 2] = [3, 11];
pub const REFINE_TABLE_ONLY: [usize; 2] = [18, 30];

fn opener_answers() -> Vec<Answer> {
    let (can, letter) = ("can opener", "letter opener");
    vec![
        answer(PromptKind::ImportantFeatures, can, None, &[
            "a blade for cutting open cans",
            "a lever for opening cans",
            "a bulkier shape with gears and handles",
            "a round cutting wheel shape",
            "a round wheel blade",
            "a blade not overly sharp to touch",
            "a handle for better grip",
            "a bottle opener",
            "a lid lifter",
            "metal material",
            "plastic material",
            "rubber material",
            "a comfortable grip",
            "a durable construction",
            "a blunt end",
        ]),
        answer(PromptKind::ImportantFeatures, letter, None, &[
            "a long, thin blade",
            "a pointed end",
            "a sleek shape",
            "a streamlined shape",
            "a knife-like shape",
            "delicate size",
            "wood material",
            "ornamental material",
            "solid piece",
            "a flat blade",
            "a sharp blade",
            "a slim handle",
            "an ornamental handle",
            "a small handle",
        ]),
        answer(PromptKind::Superclass, can, None, &["opener"]),
        answer(PromptKind::Superclass, letter, None, &["knife", "opener"]),
        answer(PromptKind::SeenAround, can, None, &[
            "a can",
            "a counter",
            "a cupboard",
            "a fridge",
            "a kitchen",
            "a person",
            "a table",
        ]),
        answer(PromptKind::SeenAround, letter, None, &[
            "a chair",
            "a computer",
            "a desk",
            "a mailbox",
            "a pen",
            "a printer",
            "a stamp",
            "envelopes",
            "paper",
        ]),
    ]
}

/// The 47 collected opener concepts in pool order.
pub fn opener_collected() -> Vec<&'static str> {
    collection_order(&opener_answers())
}

pub fn opener_aliases(table: &mut BehaviorTable) {
    alias(table, "a can", &[("can", 1.0), ("a can", 0.3)]);
    alias(table, "a person", &[("person", 1.0), ("a person", 0.3)]);
    alias(table, "a table", &[("surface", 1.0), ("a table", 0.4)]);
}

/// Two classes (can opener, letter opener) with a can confound, plus a
/// wooden-table background that fools the annotator about wood material.
pub fn opener_fixture(seed: u64) -> Result<Fixture> {
    let answers = opener_answers();
    let removed = ["a can", "opener", "a person", "knife", "a table"];
    let kept: Vec<&str> = collection_order(&answers)
        .into_iter()
        .filter(|p| !removed.contains(p))
        .collect();
    let mut behavior = BehaviorTable {
        rules: vec![BehaviorRule::new("(?i)wood material", "Yes").with_tag("bg_wooden_table")],
        remove_background: true,
        ..Default::default()
    };
    behavior.rules.extend(collection_rules(&answers));
    opener_aliases(&mut behavior);

    let per_class = 100;
    let (with_can, without_class) = counts_for_phi(OPENER_S2[0][0].1, per_class, per_class)?;
    let mut concepts = class_rates(&kept, 2, seed ^ 0x0be7);
    for c in concepts.iter_mut().filter(|c| c.phrase == REFINE_TARGET) {
        c.rates = ConceptRates::ExactPerClass(REFINE_WOODEN.to_vec());
    }
    let spec = SyntheticSpec {
        class_names: vec!["can opener".into(), "letter opener".into()],
        spurious_names: vec!["with can".into(), "without can".into()],
        per_class,
        cooccurrence: vec![
            with_can as f64 / per_class as f64,
            1.0 - without_class as f64 / per_class as f64,
        ],
        exact: true,
        concepts,
        feature_dim: 48,
        spurious_strength: 1.0,
        noise: 0.3,
        geometry_seed: seed ^ 0x0be,
        split: Split::Train,
        id_prefix: "train-".into(),
    };
    let mut s = splits(&spec, seed, 40)?;
    let target_col = kept.iter().position(|p| *p == REFINE_TARGET).expect("target in pool");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ab1e);
    for (c, &n) in REFINE_TABLE_ONLY.iter().enumerate() {
        let mut idx: Vec<usize> = (0..s.train.records.len())
            .filter(|&i| {
                let r = &s.train.records[i];
                r.class_label == c && r.gt_concepts.as_ref().is_some_and(|g| g[target_col] == 0)
            })
            .collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..n] {
            s.train.records[i].tags.get_or_insert_with(Vec::new).push("bg_wooden_table".into());
        }
    }
    let mut keywords = vec![CaptionKeyword {
        keyword: "can".into(),
        select: KeywordSelect::Spurious(0),
    }];
    for (c, list) in OPENER_S2.iter().enumerate() {
        for (k, t) in list.iter().skip(usize::from(c == 0)) {
            keywords.push(CaptionKeyword::phi(k, c, *t));
        }
    }
    apply_captions(&mut s.train, "a photo", &keywords, seed)?;

    let mut config = base_config("opener", seed);
    config.detect = DetectSection {
        tau: 0.2,
        examples: ExampleSet::Opener,
        ..Default::default()
    };
    config.roles.tools = Some("vlm".into());
    config.refine = RefineSection {
        enabled: true,
        targets: vec![REFINE_TARGET.into()],
        ..Default::default()
    };
    Ok(Fixture {
        name: "opener".into(),
        train: s.train,
        val: s.val,
        test: s.test,
        behavior,
        config,
        expected_concepts: kept.iter().map(|s| s.to_string()).collect(),
        spec,
    })
}

pub const BIRD_PARTS: [&str; 14] = [
    "wing", "back", "breast", "crown", "tail", "belly", "throat", "eye", "leg", "bill", "forehead", "nape",
    "upperparts", "underparts",
];
pub const BIRD_COLORS: [&str; 8] = ["black", "white", "brown", "grey", "yellow", "blue", "red", "buff"];

/// The 112 part × color concepts.
pub fn bird_concepts() -> Vec<String> {
    BIRD_PARTS
        .iter()
        .flat_map(|p| BIRD_COLORS.iter().map(move |c| format!("{c} {p}")))
        .collect()
}

/// Two classes (waterbird, landbird) with a background confound, a two-hop
/// subclass expansion, and background concepts the filter must drop.
pub fn waterbirds_fixture(seed: u64) -> Result<Fixture> {
    let concepts: &'static [String] = Box::leak(bird_concepts().into_boxed_slice());
    let names: Vec<&'static str> = concepts.iter().map(String::as_str).collect();
    let (water, land) = ("waterbird", "landbird");
    let background = ["a beach or ocean scene", "a palm tree", "a perching posture", "a green body color"];
    let answers = vec![
        answer(PromptKind::Subclass, water, None, &["gull", "duck"]),
        answer(PromptKind::Subclass, land, None, &["warbler", "sparrow"]),
        answer(PromptKind::Subclass, "gull", None, &["herring gull"]),
        answer(PromptKind::ImportantFeatures, water, None, &names[..56]),
        answer(PromptKind::ImportantFeatures, land, None, &names[56..]),
        answer(PromptKind::ImportantFeatures, "herring gull", None, &names[..8]),
        answer(PromptKind::SeenAround, water, None, &background[..1]),
        answer(PromptKind::SeenAround, land, None, &background[1..2]),
        answer(PromptKind::Distinguished, water, Some(land), &background[2..]),
    ];
    let mut behavior = BehaviorTable {
        rules: collection_rules(&answers),
        flip_rate: 0.05,
        ..Default::default()
    };
    alias(&mut behavior, "a beach or ocean scene", &[("beach", 1.0), ("a beach or ocean scene", 0.3)]);
    alias(&mut behavior, "a palm tree", &[("tree", 1.0), ("a palm tree", 0.3)]);
    alias(&mut behavior, "a perching posture", &[("perched", 1.0), ("a perching posture", 0.3)]);
    alias(&mut behavior, "a green body color", &[("green", 1.0), ("a green body color", 0.3)]);

    let spec = SyntheticSpec {
        class_names: vec![water.into(), land.into()],
        spurious_names: vec!["water".into(), "land".into()],
        per_class: 100,
        cooccurrence: vec![0.95, 0.95],
        exact: true,
        concepts: class_rates(&names, 2, seed ^ 0xb1d5),
        feature_dim: 128,
        spurious_strength: 1.0,
        noise: 0.3,
        geometry_seed: seed ^ 0xb1,
        split: Split::Train,
        id_prefix: "train-".into(),
    };
    let mut s = splits(&spec, seed, 40)?;
    let keywords = [
        CaptionKeyword {
            keyword: "standing on a beach near the water".into(),
            select: KeywordSelect::Spurious(0),
        },
        CaptionKeyword {
            keyword: "perched on a tree surrounded by green bamboo".into(),
            select: KeywordSelect::Spurious(1),
        },
    ];
    apply_captions(&mut s.train, "a bird", &keywords, seed)?;

    let mut config = base_config("waterbirds", seed);
    config.pool.prompts = vec![
        PromptKind::Subclass,
        PromptKind::ImportantFeatures,
        PromptKind::SeenAround,
        PromptKind::Distinguished,
    ];
    config.detect = DetectSection {
        tau: 0.3,
        examples: ExampleSet::Waterbirds,
        ..Default::default()
    };
    Ok(Fixture {
        name: "waterbirds".into(),
        train: s.train,
        val: s.val,
        test: s.test,
        behavior,
        config,
        expected_concepts: concepts.to_vec(),
        spec,
    })
}

/// Concept rows, predictions and labels whose correctly classified images
/// share 19 (class 0) and 21 (class 1) positive concepts, 17 of them common.
pub fn consensus_fixture() -> (Vec<Vec<u8>>, Vec<usize>, Vec<usize>) {
    const M: usize = 40;
    let common: Vec<usize> = (0..17).collect();
    let only = [vec![17, 18], vec![19, 20, 21, 22]];
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for k in 0..4 {
            let mut row = vec![0u8; M];
            for &j in common.iter().chain(&only[c]) {
                row[j] = 1;
            }
            // One distinct extra per image so only the intended sets are shared.
            row[23 + c * 4 + k] = 1;
            rows.push(row);
            preds.push(c);
            labels.push(c);
        }
        // A misclassified image sharing nothing; it must not shrink the sets.
        rows.push(vec![0u8; M]);
        preds.push(1 - c);
        labels.push(c);
    }
    (rows, preds, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_outside_unit_interval_error() {
        let spec = SyntheticSpec::two_class(10, 1.2, vec![]);
        assert!(gen_synthetic_dataset(&spec, 0).is_err());
        let spec = SyntheticSpec::two_class(10, 0.5, vec![ConceptSpec::per_class("x", &[0.5, -0.1])]);
        assert!(gen_synthetic_dataset(&spec, 0).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec::two_class(50, 0.8, vec![ConceptSpec::per_class("a red wing", &[0.9, 0.1])]);
        let a = gen_synthetic_dataset(&spec, 3).unwrap().to_text().unwrap();
        let b = gen_synthetic_dataset(&spec, 3).unwrap().to_text().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic_dataset(&spec, 4).unwrap().to_text().unwrap());
    }

    #[test]
    fn counts_hit_the_window() {
        for t in [0.2, 0.24, 0.33, 0.39, 0.52, 0.96, 0.97] {
            let (a, b) = counts_for_phi(t, 100, 100).unwrap();
            let p = phi_from_counts(a, b, 100, 100);
            assert!(p >= t + 1e-6 && p < t + 0.005, "{t}: {a}/{b} -> {p}");
        }
    }

    #[test]
    fn consensus_fixture_shape() {
        let (rows, preds, labels) = consensus_fixture();
        assert_eq!(rows.len(), preds.len());
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 5);
    }

    #[test]
    fn opener_pool_has_47_phrases() {
        assert_eq!(opener_collected().len(), 47);
    }
}
