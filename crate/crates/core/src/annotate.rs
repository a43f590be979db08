//! Binary concept annotation through vision-language queries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::data::{canonicalize, AnnotationMatrix, ConceptPool, DatasetManifest, MatrixSource};
use crate::error::{Error, Result};
use crate::eval::{group_metrics, GroupMetrics};
use crate::gateway::{Capability, Gateway, ImageRef, ModelRequest};
use crate::text::raw_tokens;

pub const DEFAULT_TEMPLATE: &str = "Does the object have {attribute}?";
pub const ATTRIBUTE_SLOT: &str = "{attribute}";
pub const DEFAULT_MIN_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
    Abstain,
}

/// Leading "yes"/"no" token decides; otherwise the first standalone yes/no
/// in the first sentence; otherwise abstain.
pub fn parse_yes_no(text: &str) -> YesNo {
    let decide = |t: &str| match t {
        "yes" => Some(YesNo::Yes),
        "no" => Some(YesNo::No),
        _ => None,
    };
    let tokens = raw_tokens(text);
    if let Some(first) = tokens.first().and_then(|t| decide(t)) {
        return first;
    }
    let end = text.find(['.', '!', '?', '\n']).unwrap_or(text.len());
    raw_tokens(&text[..end])
        .iter()
        .find_map(|t| decide(t))
        .unwrap_or(YesNo::Abstain)
}

/// Default prompt template with optional per-concept overrides (full prompts or templates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub default: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
}

impl PromptTemplate {
    pub fn new(default: &str) -> Result<Self> {
        let t = PromptTemplate {
            default: default.to_string(),
            overrides: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_override(mut self, concept: &str, prompt: &str) -> Self {
        self.overrides.insert(canonicalize(concept), prompt.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.default.contains(ATTRIBUTE_SLOT) {
            return Err(Error::Invalid(format!(
                "template `{}` lacks the {ATTRIBUTE_SLOT} slot",
                self.default
            )));
        }
        Ok(())
    }

    /// Templates pass through verbatim apart from slot substitution.
    pub fn render(&self, concept: &str) -> String {
        let t = self.overrides.get(&canonicalize(concept)).unwrap_or(&self.default);
        t.replace(ATTRIBUTE_SLOT, concept)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub queries: usize,
    pub abstains: usize,
    pub failures: usize,
    pub wall_seconds: f64,
    pub images_per_second: f64,
    /// Sum of backend latencies per image, in manifest order.
    pub image_latency_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationOutcome {
    pub matrix: AnnotationMatrix,
    pub warnings: Vec<String>,
    pub stats: AnnotationStats,
}

enum Cell {
    Answer(YesNo, u64),
    Failed,
}

fn ask(gw: &Gateway, backend: &str, prompt: String, image: &ImageRef) -> Result<Cell> {
    let req = ModelRequest::new(backend, Capability::VlQuery, prompt)
        .with_image(image.clone())
        .greedy();
    match gw.query(&req) {
        Ok(resp) => Ok(Cell::Answer(
            parse_yes_no(resp.text.as_deref().unwrap_or_default()),
            resp.latency_ms,
        )),
        Err(e) if e.halts_stage() || matches!(e, Error::Precondition(_)) => Err(e),
        Err(e) => {
            log::warn!("annotation query failed: {e}");
            Ok(Cell::Failed)
        }
    }
}

/// Query every (image, concept) pair and assemble the matrix in manifest × pool order.
pub fn annotate_phrases(
    image_ids: &[String],
    image_refs: &[ImageRef],
    phrases: &[String],
    gw: &Gateway,
    backend: &str,
    template: &PromptTemplate,
) -> Result<AnnotationOutcome> {
    template.validate()?;
    if phrases.is_empty() {
        return Err(Error::Precondition("annotation needs at least one active concept".into()));
    }
    if image_ids.len() != image_refs.len() {
        return Err(Error::Dimension(format!(
            "{} ids for {} image refs",
            image_ids.len(),
            image_refs.len()
        )));
    }
    let started = Instant::now();
    let cells: Vec<Result<Cell>> = image_refs
        .par_iter()
        .flat_map_iter(|img| phrases.iter().map(move |p| (img, p)))
        .map(|(img, p)| ask(gw, backend, template.render(p), img))
        .collect();
    let m = phrases.len();
    let mut matrix = AnnotationMatrix::zeros(image_ids.to_vec(), phrases.to_vec(), MatrixSource::Raw);
    let mut latency = vec![0u64; image_ids.len()];
    let (mut abstains, mut failures) = (0, 0);
    for (k, cell) in cells.into_iter().enumerate() {
        let (i, j) = (k / m, k % m);
        match cell? {
            Cell::Answer(YesNo::Yes, ms) => {
                matrix.bits[i][j] = 1;
                latency[i] += ms;
            }
            Cell::Answer(YesNo::No, ms) => latency[i] += ms,
            Cell::Answer(YesNo::Abstain, ms) => {
                matrix.abstain[i][j] = true;
                abstains += 1;
                latency[i] += ms;
            }
            Cell::Failed => {
                matrix.abstain[i][j] = true;
                failures += 1;
            }
        }
    }
    let mut warnings = Vec::new();
    if !image_ids.is_empty() {
        for (j, p) in phrases.iter().enumerate() {
            if matrix.abstain.iter().all(|row| row[j]) {
                let w = format!("every response for concept `{p}` abstained");
                log::warn!("{w}");
                warnings.push(w);
            }
        }
    }
    let wall = started.elapsed().as_secs_f64();
    Ok(AnnotationOutcome {
        stats: AnnotationStats {
            queries: image_ids.len() * m,
            abstains,
            failures,
            wall_seconds: wall,
            images_per_second: if wall > 0.0 { image_ids.len() as f64 / wall } else { 0.0 },
            image_latency_ms: latency,
        },
        matrix,
        warnings,
    })
}

pub fn annotate(
    manifest: &DatasetManifest,
    image_refs: &[ImageRef],
    pool: &ConceptPool,
    gw: &Gateway,
    backend: &str,
    template: &PromptTemplate,
) -> Result<AnnotationOutcome> {
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    annotate_phrases(&ids, image_refs, &pool.active_phrases(), gw, backend, template)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityCell {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

impl QualityCell {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        let f1 = (tp + fp + fn_ > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        QualityCell { recall, precision, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationQuality {
    pub per_concept: Vec<(String, QualityCell)>,
    /// Means over concepts; undefined entries are skipped.
    pub concept_mean: QualityCell,
    /// Means over images; undefined entries are skipped.
    pub image_mean: QualityCell,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_cells(cells: &[QualityCell]) -> QualityCell {
    QualityCell {
        recall: mean_defined(cells.iter().map(|c| c.recall)),
        precision: mean_defined(cells.iter().map(|c| c.precision)),
        f1: mean_defined(cells.iter().map(|c| c.f1)),
    }
}

/// Recall/precision/F1 of the annotations against ground-truth concepts.
/// Abstains count as negative predictions.
pub fn evaluate_against_gt(matrix: &AnnotationMatrix, manifest: &DatasetManifest) -> Result<AnnotationQuality> {
    let by_id: HashMap<&str, &crate::data::ImageRecord> =
        manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut gts = Vec::with_capacity(matrix.rows());
    for id in &matrix.image_ids {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Invalid(format!("image `{id}` is not in the manifest")))?;
        let gt = rec
            .gt_concepts
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("image `{id}` has no ground-truth concepts")))?;
        if gt.len() != matrix.cols() {
            return Err(Error::Dimension(format!(
                "image `{id}` has {} ground-truth concepts, matrix has {}",
                gt.len(),
                matrix.cols()
            )));
        }
        gts.push(gt);
    }
    let count = |pairs: &mut dyn Iterator<Item = (u8, u8)>| {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (pred, truth) in pairs {
            match (pred, truth) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        QualityCell::from_counts(tp, fp, fn_)
    };
    let per_concept: Vec<(String, QualityCell)> = (0..matrix.cols())
        .map(|j| {
            let mut it = (0..matrix.rows()).map(|i| (matrix.bits[i][j], gts[i][j]));
            (matrix.concept_phrases[j].clone(), count(&mut it))
        })
        .collect();
    let per_image: Vec<QualityCell> = (0..matrix.rows())
        .map(|i| {
            let mut it = (0..matrix.cols()).map(|j| (matrix.bits[i][j], gts[i][j]));
            count(&mut it)
        })
        .collect();
    let concept_cells: Vec<QualityCell> = per_concept.iter().map(|(_, c)| c.clone()).collect();
    Ok(AnnotationQuality {
        concept_mean: mean_cells(&concept_cells),
        image_mean: mean_cells(&per_image),
        per_concept,
    })
}

/// Class-level majority vote (strictly more than half), then drop concepts
/// positive in fewer than `min_classes` classes.
pub fn consolidate_class_level(
    matrix: &AnnotationMatrix,
    manifest: &DatasetManifest,
    min_classes: usize,
) -> Result<AnnotationMatrix> {
    let class_of: HashMap<&str, usize> = manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.class_label))
        .collect();
    let labels: Vec<usize> = matrix
        .image_ids
        .iter()
        .map(|id| {
            class_of
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Precondition(format!("image `{id}` has no class label")))
        })
        .collect::<Result<_>>()?;
    let l = manifest.num_classes();
    let m = matrix.cols();
    let mut positives = vec![vec![0usize; m]; l];
    let mut sizes = vec![0usize; l];
    for (row, &c) in matrix.bits.iter().zip(&labels) {
        sizes[c] += 1;
        for (j, &b) in row.iter().enumerate() {
            positives[c][j] += b as usize;
        }
    }
    let class_bit: Vec<Vec<u8>> = (0..l)
        .map(|c| (0..m).map(|j| u8::from(2 * positives[c][j] > sizes[c])).collect())
        .collect();
    let keep: Vec<usize> = (0..m)
        .filter(|&j| (0..l).filter(|&c| class_bit[c][j] == 1).count() >= min_classes)
        .collect();
    let mut out = AnnotationMatrix::zeros(
        matrix.image_ids.clone(),
        keep.iter().map(|&j| matrix.concept_phrases[j].clone()).collect(),
        MatrixSource::Consolidated,
    );
    for (i, &c) in labels.iter().enumerate() {
        for (k, &j) in keep.iter().enumerate() {
            out.bits[i][k] = class_bit[c][j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectPrediction {
    pub answers: Vec<String>,
    pub predictions: Vec<Option<usize>>,
    pub metrics: GroupMetrics,
}

/// Earliest-occurring answer substring (case-insensitive) decides the class.
pub fn map_answer(answer: &str, answer_map: &[(String, usize)]) -> Option<usize> {
    let lower = answer.to_lowercase();
    answer_map
        .iter()
        .filter_map(|(needle, c)| lower.find(&needle.to_lowercase()).map(|pos| (pos, *c)))
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, c)| c)
}

/// Ask the vision-language model for the label directly.
pub fn predict_direct(
    manifest: &DatasetManifest,
    image_refs: &[ImageRef],
    gw: &Gateway,
    backend: &str,
    question: &str,
    answer_map: &[(String, usize)],
    train_weights: Option<&BTreeMap<usize, f64>>,
) -> Result<DirectPrediction> {
    let answers: Vec<String> = image_refs
        .par_iter()
        .map(|img| {
            let req = ModelRequest::new(backend, Capability::VlQuery, question)
                .with_image(img.clone())
                .greedy();
            gw.query_text(&req)
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<Option<usize>> = answers.iter().map(|a| map_answer(a, answer_map)).collect();
    let metrics = group_metrics(&predictions, manifest, train_weights)?;
    Ok(DirectPrediction {
        answers,
        predictions,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageRecord, ManifestHeader};

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes, the object has a sharp blade."), YesNo::Yes);
        assert_eq!(parse_yes_no("No."), YesNo::No);
        assert_eq!(parse_yes_no("  \"yes\""), YesNo::Yes);
        assert_eq!(parse_yes_no("The object appears metallic."), YesNo::Abstain);
        assert_eq!(parse_yes_no("I cannot tell."), YesNo::Abstain);
        assert_eq!(parse_yes_no("The answer is no, it has none."), YesNo::No);
        assert_eq!(parse_yes_no("Hard to say. But yes."), YesNo::Abstain);
        assert_eq!(parse_yes_no("Nothing here"), YesNo::Abstain);
    }

    #[test]
    fn template_rendering() {
        let t = PromptTemplate::new(DEFAULT_TEMPLATE)
            .unwrap()
            .with_override("metal material", "Is the object made of {attribute}?");
        assert_eq!(t.render("a sharp blade"), "Does the object have a sharp blade?");
        assert_eq!(t.render("metal material"), "Is the object made of metal material?");
        assert!(PromptTemplate::new("Does it have this?").is_err());
    }

    fn manifest(labels: &[usize], gt: Option<Vec<Vec<u8>>>) -> DatasetManifest {
        DatasetManifest {
            header: ManifestHeader {
                class_names: vec!["a".into(), "b".into(), "c".into()],
                feature_dim: None,
                split: Default::default(),
                group_table: vec![],
                eval_mode: Default::default(),
            },
            records: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let mut r = ImageRecord::new(format!("i{i}"), l);
                    r.gt_concepts = gt.as_ref().map(|g| g[i].clone());
                    r
                })
                .collect(),
            base_dir: None,
        }
    }

    fn matrix(cols: &[&[u8]]) -> AnnotationMatrix {
        let n = cols[0].len();
        let mut m = AnnotationMatrix::zeros(
            (0..n).map(|i| format!("i{i}")).collect(),
            (0..cols.len()).map(|j| format!("c{j}")).collect(),
            MatrixSource::Raw,
        );
        for (j, col) in cols.iter().enumerate() {
            for (i, &b) in col.iter().enumerate() {
                m.bits[i][j] = b;
            }
        }
        m
    }

    #[test]
    fn quality_hand_cases() {
        let gt = vec![vec![1], vec![0], vec![1], vec![0]];
        let man = manifest(&[0, 0, 1, 1], Some(gt));
        let q = evaluate_against_gt(&matrix(&[&[1, 1, 1, 1]]), &man).unwrap();
        let c = &q.per_concept[0].1;
        assert_eq!(c.recall, Some(1.0));
        assert_eq!(c.precision, Some(0.5));
        assert!((c.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let perfect = evaluate_against_gt(&matrix(&[&[1, 0, 1, 0]]), &man).unwrap();
        assert_eq!(perfect.concept_mean.recall, Some(1.0));
        assert_eq!(perfect.concept_mean.precision, Some(1.0));
        assert_eq!(perfect.concept_mean.f1, Some(1.0));

        let no_gt = manifest(&[0, 0, 1, 1], None);
        assert!(evaluate_against_gt(&matrix(&[&[1, 0, 1, 0]]), &no_gt).is_err());
    }

    #[test]
    fn consolidation_majority_and_sparsity() {
        let man = manifest(&[0, 0, 0, 1, 1, 2], None);
        let m = matrix(&[&[1, 1, 0, 1, 0, 1], &[1, 0, 0, 0, 0, 0]]);
        let c = consolidate_class_level(&m, &man, 1).unwrap();
        // class 0: [1,1,0] -> 1; class 1: [1,0] tie -> 0; class 2: [1] -> 1
        assert_eq!(c.column(0), vec![1, 1, 1, 0, 0, 1]);
        assert_eq!(c.cols(), 1, "second concept has no class majority");
        let c2 = consolidate_class_level(&m, &man, 2).unwrap();
        assert_eq!(c2.cols(), 1);
        let c3 = consolidate_class_level(&m, &man, 3).unwrap();
        assert_eq!(c3.cols(), 0);
        assert_eq!(consolidate_class_level(&c, &man, 1).unwrap(), c);
    }

    #[test]
    fn answer_mapping() {
        let map = vec![("waterbird".to_string(), 1), ("landbird".to_string(), 0)];
        assert_eq!(map_answer("It is a landbird.", &map), Some(0));
        assert_eq!(map_answer("Waterbird", &map), Some(1));
        assert_eq!(map_answer("A bird.", &map), None);
    }
}
