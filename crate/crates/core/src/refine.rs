//! Annotation refinement: a fixed tool chain isolates the main object, then
//! selected concepts are asked again against the background-removed image.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::annotate::{parse_yes_no, PromptTemplate, YesNo};
use crate::data::{canonicalize, AnnotationMatrix, DatasetManifest, MatrixSource};
use crate::error::{Error, Result};
use crate::gateway::{Capability, Gateway, ImageRef, ModelRequest};

pub const MAIN_OBJECT_PROMPT: &str = "Identify the main object in the image.";
pub const DEFAULT_INSTRUCTION: &str = "Ignore the background.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPlan {
    pub target_concepts: Vec<String>,
    /// Tool order; the default is VQA, then grounding, then segmentation.
    pub chain: Vec<Capability>,
    pub instruction: String,
}

impl RefinementPlan {
    pub fn new<S: AsRef<str>>(targets: &[S]) -> Self {
        RefinementPlan {
            target_concepts: targets.iter().map(|t| canonicalize(t.as_ref())).collect(),
            chain: vec![Capability::Vqa, Capability::Ground, Capability::Segment],
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }

    /// Checks the chain and that every target is a column of `matrix`.
    pub fn validate(&self, matrix: &AnnotationMatrix) -> Result<Vec<usize>> {
        if self.chain.is_empty() {
            return Err(Error::Invalid("refinement chain is empty".into()));
        }
        if let Some(c) = self
            .chain
            .iter()
            .find(|c| !matches!(c, Capability::Vqa | Capability::Ground | Capability::Segment))
        {
            return Err(Error::Invalid(format!("capability `{c}` cannot appear in a refinement chain")));
        }
        if self.target_concepts.is_empty() {
            return Err(Error::Invalid("refinement needs at least one target concept".into()));
        }
        self.target_concepts
            .iter()
            .map(|t| {
                matrix
                    .column_index(t)
                    .ok_or_else(|| Error::Invalid(format!("target concept `{t}` is not an active pool concept")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    pub class_label: usize,
    pub class_name: String,
    pub concept: String,
    /// `None` when the class has no images.
    pub rate_before: Option<f64>,
    pub rate_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub rows: Vec<FlipRow>,
    /// Images whose chain failed and kept their raw bits.
    pub flagged: Vec<String>,
}

impl FlipReport {
    pub fn row(&self, class_label: usize, concept: &str) -> Option<&FlipRow> {
        let c = canonicalize(concept);
        self.rows.iter().find(|r| r.class_label == class_label && r.concept == c)
    }
}

/// Per-class positive rates of `concepts` before and after.
pub fn flip_report<S: AsRef<str>>(
    before: &AnnotationMatrix,
    after: &AnnotationMatrix,
    manifest: &DatasetManifest,
    concepts: &[S],
) -> Result<Vec<FlipRow>> {
    if before.rows() != after.rows() || before.cols() != after.cols() {
        return Err(Error::Dimension(format!(
            "matrices differ in shape: {}x{} vs {}x{}",
            before.rows(),
            before.cols(),
            after.rows(),
            after.cols()
        )));
    }
    let class_of: HashMap<&str, usize> = manifest.records.iter().map(|r| (r.id.as_str(), r.class_label)).collect();
    let labels = before
        .image_ids
        .iter()
        .map(|id| {
            class_of
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("image `{id}` is not in the manifest")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut rows = Vec::new();
    for concept in concepts {
        let name = canonicalize(concept.as_ref());
        let j = before
            .column_index(&name)
            .ok_or_else(|| Error::Invalid(format!("unknown concept `{name}`")))?;
        for (c, class_name) in manifest.class_names().iter().enumerate() {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let rate = |m: &AnnotationMatrix| {
                (!idx.is_empty())
                    .then(|| idx.iter().filter(|&&i| m.bits[i][j] == 1).count() as f64 / idx.len() as f64)
            };
            rows.push(FlipRow {
                class_label: c,
                class_name: class_name.clone(),
                concept: name.clone(),
                rate_before: rate(before),
                rate_after: rate(after),
            });
        }
    }
    Ok(rows)
}

enum ChainResult {
    Refined(ImageRef),
    Failed(String),
}

fn run_chain(gw: &Gateway, backend: &str, plan: &RefinementPlan, image: &ImageRef) -> Result<ChainResult> {
    let mut current = image.clone();
    let mut object = String::from("object");
    for cap in &plan.chain {
        let req = match cap {
            Capability::Vqa => ModelRequest::new(backend, *cap, MAIN_OBJECT_PROMPT),
            _ => ModelRequest::new(backend, *cap, object.clone()).with_param("instruction", plan.instruction.clone()),
        }
        .with_image(current.clone())
        .greedy();
        let resp = match gw.query(&req) {
            Ok(r) => r,
            Err(e) if e.halts_stage() => return Err(e),
            Err(e) => return Ok(ChainResult::Failed(format!("{cap}: {e}"))),
        };
        match cap {
            Capability::Vqa => match resp.text.as_deref().map(str::trim).filter(|t| !t.is_empty()) {
                Some(t) => object = t.to_string(),
                None => return Ok(ChainResult::Failed("vqa returned no object".into())),
            },
            Capability::Ground => {
                if resp.boxes.as_ref().is_none_or(|b| b.is_empty()) {
                    return Ok(ChainResult::Failed(format!("grounding found no `{object}`")));
                }
            }
            Capability::Segment => match resp.mask_ref {
                Some(r) => current = r,
                None => return Ok(ChainResult::Failed("segmentation returned no image".into())),
            },
            _ => unreachable!("validated"),
        }
    }
    Ok(ChainResult::Refined(current))
}

#[derive(Debug, Clone)]
pub struct RefinementOutcome {
    pub matrix: AnnotationMatrix,
    pub report: FlipReport,
}

/// Re-annotate the plan's target concepts on background-removed images.
/// Other columns are copied unchanged; images whose chain fails keep their
/// raw target bits and are flagged.
#[allow(clippy::too_many_arguments)]
pub fn refine_annotations(
    matrix: &AnnotationMatrix,
    manifest: &DatasetManifest,
    image_refs: &[ImageRef],
    plan: &RefinementPlan,
    gw: &Gateway,
    tool_backend: &str,
    annotator_backend: &str,
    template: &PromptTemplate,
) -> Result<RefinementOutcome> {
    let targets = plan.validate(matrix)?;
    template.validate()?;
    if image_refs.len() != matrix.rows() {
        return Err(Error::Dimension(format!(
            "{} image refs for {} matrix rows",
            image_refs.len(),
            matrix.rows()
        )));
    }
    let per_image: Vec<Result<(Option<String>, Vec<Option<YesNo>>)>> = image_refs
        .par_iter()
        .map(|img| {
            let refined = match run_chain(gw, tool_backend, plan, img)? {
                ChainResult::Refined(r) => r,
                ChainResult::Failed(why) => return Ok((Some(why), Vec::new())),
            };
            let mut answers = Vec::with_capacity(targets.len());
            for &j in &targets {
                let req = ModelRequest::new(
                    annotator_backend,
                    Capability::VlQuery,
                    template.render(&matrix.concept_phrases[j]),
                )
                .with_image(refined.clone())
                .greedy();
                match gw.query(&req) {
                    Ok(r) => answers.push(Some(parse_yes_no(r.text.as_deref().unwrap_or_default()))),
                    Err(e) if e.halts_stage() => return Err(e),
                    Err(e) => {
                        log::warn!("refined query failed: {e}");
                        answers.push(None);
                    }
                }
            }
            Ok((None, answers))
        })
        .collect();
    let mut out = matrix.clone();
    out.source = MatrixSource::Refined;
    let mut flagged = Vec::new();
    for (i, res) in per_image.into_iter().enumerate() {
        let (failure, answers) = res?;
        if let Some(why) = failure {
            log::warn!("refinement chain failed for `{}`: {why}", matrix.image_ids[i]);
            flagged.push(matrix.image_ids[i].clone());
            continue;
        }
        for (&j, a) in targets.iter().zip(answers) {
            let (bit, abstain) = match a {
                Some(YesNo::Yes) => (1, false),
                Some(YesNo::No) => (0, false),
                Some(YesNo::Abstain) | None => (0, true),
            };
            out.bits[i][j] = bit;
            out.abstain[i][j] = abstain;
        }
    }
    let rows = flip_report(matrix, &out, manifest, &plan.target_concepts)?;
    Ok(RefinementOutcome {
        matrix: out,
        report: FlipReport { rows, flagged },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{annotate_phrases, DEFAULT_TEMPLATE};
    use crate::data::{ImageRecord, ManifestHeader};
    use crate::gateway::{mock_backend, BehaviorRule, BehaviorTable};
    use std::sync::Arc;

    fn manifest(tags: &[&[&str]]) -> DatasetManifest {
        DatasetManifest {
            header: ManifestHeader {
                class_names: vec!["can opener".into(), "letter opener".into()],
                ..Default::default()
            },
            records: tags
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut r = ImageRecord::new(format!("img{i}"), 0);
                    r.tags = Some(t.iter().map(|s| s.to_string()).collect());
                    r
                })
                .collect(),
            base_dir: None,
        }
    }

    fn setup(remove_background: bool, tags: &[&[&str]]) -> (Gateway, DatasetManifest, Vec<ImageRef>, AnnotationMatrix) {
        let m = manifest(tags);
        let mut gw = Gateway::in_memory();
        let table = BehaviorTable {
            rules: vec![BehaviorRule::new("wood material", "Yes, it is wooden.").with_tag("bg_wooden_table")],
            remove_background,
            ..Default::default()
        };
        gw.register(Arc::new(mock_backend("mock", 1, table).unwrap()));
        let refs = gw.images().register_manifest(&m).unwrap();
        let ids: Vec<String> = m.records.iter().map(|r| r.id.clone()).collect();
        let phrases = vec!["wood material".to_string(), "metal material".to_string()];
        let t = PromptTemplate::new(DEFAULT_TEMPLATE).unwrap();
        let raw = annotate_phrases(&ids, &refs, &phrases, &gw, "mock", &t).unwrap().matrix;
        (gw, m, refs, raw)
    }

    #[test]
    fn confound_removed_and_other_columns_copied() {
        let tags: &[&[&str]] = &[&["bg_wooden_table", "has_metal_material", "obj_can_opener"], &["has_metal_material"]];
        let (gw, m, refs, raw) = setup(true, tags);
        assert_eq!(raw.bits, vec![vec![1, 1], vec![0, 1]]);
        let plan = RefinementPlan::new(&["wood material"]);
        let t = PromptTemplate::new(DEFAULT_TEMPLATE).unwrap();
        let out = refine_annotations(&raw, &m, &refs, &plan, &gw, "mock", "mock", &t).unwrap();
        assert_eq!(out.matrix.bits, vec![vec![0, 1], vec![0, 1]]);
        assert_eq!(out.matrix.source, MatrixSource::Refined);
        let row = out.report.row(0, "wood material").unwrap();
        assert_eq!((row.rate_before, row.rate_after), (Some(0.5), Some(0.0)));
        assert_eq!(out.report.row(1, "wood material").unwrap().rate_before, None);
    }

    #[test]
    fn identity_segmenter_preserves_bits() {
        let tags: &[&[&str]] = &[&["bg_wooden_table"], &["has_wood_material"], &[]];
        let (gw, m, refs, raw) = setup(false, tags);
        let plan = RefinementPlan::new(&["wood material"]);
        let t = PromptTemplate::new(DEFAULT_TEMPLATE).unwrap();
        let out = refine_annotations(&raw, &m, &refs, &plan, &gw, "mock", "mock", &t).unwrap();
        assert_eq!(out.matrix.bits, raw.bits);
    }

    #[test]
    fn failing_chain_keeps_raw_bits() {
        let tags: &[&[&str]] = &[&["bg_wooden_table", "fail_segment"]];
        let (gw, m, refs, raw) = setup(true, tags);
        let plan = RefinementPlan::new(&["wood material"]);
        let t = PromptTemplate::new(DEFAULT_TEMPLATE).unwrap();
        let out = refine_annotations(&raw, &m, &refs, &plan, &gw, "mock", "mock", &t).unwrap();
        assert_eq!(out.matrix.bits, raw.bits);
        assert_eq!(out.report.flagged, vec!["img0".to_string()]);
    }

    #[test]
    fn plan_validation() {
        let raw = AnnotationMatrix::zeros(vec![], vec!["a b".into()], MatrixSource::Raw);
        assert!(RefinementPlan::new(&["zzz"]).validate(&raw).is_err());
        let mut p = RefinementPlan::new(&["a b"]);
        p.chain.clear();
        assert!(p.validate(&raw).is_err());
    }

    #[test]
    fn flip_hand_case() {
        let m = manifest(&[&[], &[], &[], &[]]);
        let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
        let mut before = AnnotationMatrix::zeros(ids.clone(), vec!["c".into()], MatrixSource::Raw);
        let mut after = before.clone();
        for (i, b) in [1, 1, 1, 0].into_iter().enumerate() {
            before.bits[i][0] = b;
        }
        for (i, b) in [1, 0, 1, 0].into_iter().enumerate() {
            after.bits[i][0] = b;
        }
        let rows = flip_report(&before, &after, &m, &["c"]).unwrap();
        assert_eq!((rows[0].rate_before, rows[0].rate_after), (Some(0.75), Some(0.5)));
        let same = flip_report(&before, &before, &m, &["c"]).unwrap();
        assert!(same.iter().all(|r| r.rate_before == r.rate_after));
    }
}
