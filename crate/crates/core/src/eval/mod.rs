//! Group-aware evaluation, attribute consensus, and run reports.

mod report;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::data::{DatasetManifest, EvalMode};
use crate::error::{Error, Result};

pub use report::{emit_report, render_markdown, ReportBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub per_group: Vec<GroupAccuracy>,
    /// Minimum group accuracy.
    pub worst_group: f64,
    /// Worst-group figure under the manifest's evaluation mode.
    pub reported_worst_group: f64,
    pub adjusted_average: Option<f64>,
    pub plain_average: f64,
    /// Average under the manifest's evaluation mode.
    pub reported_average: f64,
    pub mode: EvalMode,
}

pub fn worst_group(accuracies: &[f64]) -> Option<f64> {
    accuracies.iter().copied().reduce(f64::min)
}

/// Σ_g w_g · acc_g with weights normalised to sum to one.
pub fn adjusted_average(accuracies: &[f64], weights: &[f64]) -> Result<f64> {
    if accuracies.len() != weights.len() || accuracies.is_empty() {
        return Err(Error::Dimension(format!(
            "{} accuracies for {} weights",
            accuracies.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Invalid("group weights must be non-negative with positive sum".into()));
    }
    Ok(accuracies.iter().zip(weights).map(|(a, w)| a * w / total).sum())
}

/// Record counts per group of a (training) manifest.
pub fn group_sizes(manifest: &DatasetManifest) -> Result<BTreeMap<usize, f64>> {
    let mut sizes = BTreeMap::new();
    for r in &manifest.records {
        let g = manifest
            .group_of(r)
            .ok_or_else(|| Error::Precondition(format!("record `{}` maps to no group", r.id)))?;
        *sizes.entry(g).or_insert(0.0) += 1.0;
    }
    Ok(sizes)
}

/// Per-group accuracy plus worst-group and average figures.
///
/// `None` predictions (abstains) count as wrong. Every group in the table
/// must be non-empty; groups absent from the table but present on records are
/// included under a generated name.
pub fn group_metrics(
    predictions: &[Option<usize>],
    manifest: &DatasetManifest,
    train_weights: Option<&BTreeMap<usize, f64>>,
) -> Result<GroupMetrics> {
    if predictions.len() != manifest.records.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} records",
            predictions.len(),
            manifest.records.len()
        )));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = manifest
        .header
        .group_table
        .iter()
        .map(|g| (g.id, (0, 0)))
        .collect();
    let mut correct_total = 0;
    for (r, p) in manifest.records.iter().zip(predictions) {
        let g = manifest
            .group_of(r)
            .ok_or_else(|| Error::Precondition(format!("record `{}` maps to no group", r.id)))?;
        let e = counts.entry(g).or_insert((0, 0));
        e.1 += 1;
        if *p == Some(r.class_label) {
            e.0 += 1;
            correct_total += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Precondition("no groups to evaluate".into()));
    }
    let mut per_group = Vec::new();
    for (&g, &(correct, total)) in &counts {
        if total == 0 {
            return Err(Error::Invalid(format!(
                "group `{}` ({g}) has no records",
                manifest.group_name(g)
            )));
        }
        per_group.push(GroupAccuracy {
            group: g,
            name: manifest.group_name(g),
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        });
    }
    let accs: Vec<f64> = per_group.iter().map(|g| g.accuracy).collect();
    let worst = worst_group(&accs).expect("non-empty");
    let plain = correct_total as f64 / predictions.len() as f64;
    let mode = manifest.header.eval_mode;
    let adjusted = match train_weights {
        Some(w) => {
            let weights = per_group
                .iter()
                .map(|g| {
                    w.get(&g.group)
                        .copied()
                        .ok_or_else(|| Error::Invalid(format!("no training weight for group `{}`", g.name)))
                })
                .collect::<Result<Vec<f64>>>()?;
            Some(adjusted_average(&accs, &weights)?)
        }
        None => None,
    };
    let (reported_worst, reported_average) = match mode {
        EvalMode::Adjusted => (
            worst,
            adjusted.ok_or_else(|| Error::Invalid("adjusted mode needs training-split group weights".into()))?,
        ),
        EvalMode::Plain => (worst, plain),
        EvalMode::SingleGroup { group } => {
            let g = per_group
                .iter()
                .find(|x| x.group == group)
                .ok_or_else(|| Error::Invalid(format!("configured worst group {group} is not evaluated")))?;
            (g.accuracy, plain)
        }
    };
    Ok(GroupMetrics {
        per_group,
        worst_group: worst,
        reported_worst_group: reported_worst,
        adjusted_average: adjusted,
        plain_average: plain,
        reported_average,
        mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConsensus {
    pub class_label: usize,
    pub correct: usize,
    /// Concept indices positive in every correctly predicted image of the class.
    pub shared: Vec<usize>,
    /// Shared concepts not shared by any other class.
    pub non_overlap: Vec<usize>,
    /// True when the class has no correct predictions.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub per_class: Vec<ClassConsensus>,
    /// (class a, class b, shared_a ∩ shared_b) for a < b.
    pub pairwise: Vec<(usize, usize, Vec<usize>)>,
}

pub fn attribute_consensus(
    concepts: &[Vec<u8>],
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ConsensusReport> {
    if concepts.len() != predictions.len() || labels.len() != predictions.len() {
        return Err(Error::Dimension("concepts, predictions and labels differ in length".into()));
    }
    let mut shared: Vec<Option<BTreeSet<usize>>> = vec![None; num_classes];
    let mut correct = vec![0usize; num_classes];
    for ((row, &p), &y) in concepts.iter().zip(predictions).zip(labels) {
        if p != y {
            continue;
        }
        if y >= num_classes {
            return Err(Error::Invalid(format!("label {y} out of range")));
        }
        correct[y] += 1;
        let pos: BTreeSet<usize> = row.iter().enumerate().filter(|(_, &b)| b == 1).map(|(j, _)| j).collect();
        shared[y] = Some(match shared[y].take() {
            None => pos,
            Some(s) => s.intersection(&pos).copied().collect(),
        });
    }
    let sets: Vec<BTreeSet<usize>> = shared.into_iter().map(Option::unwrap_or_default).collect();
    let per_class = (0..num_classes)
        .map(|c| {
            let others: BTreeSet<usize> = (0..num_classes)
                .filter(|&o| o != c)
                .flat_map(|o| sets[o].iter().copied())
                .collect();
            ClassConsensus {
                class_label: c,
                correct: correct[c],
                shared: sets[c].iter().copied().collect(),
                non_overlap: sets[c].difference(&others).copied().collect(),
                flagged: correct[c] == 0,
            }
        })
        .collect();
    let mut pairwise = Vec::new();
    for a in 0..num_classes {
        for b in (a + 1)..num_classes {
            pairwise.push((a, b, sets[a].intersection(&sets[b]).copied().collect()));
        }
    }
    Ok(ConsensusReport { per_class, pairwise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GroupDef, ImageRecord, ManifestHeader};

    #[test]
    fn worst_and_adjusted_hand_cases() {
        assert_eq!(worst_group(&[0.9, 0.7, 0.95, 0.72]), Some(0.7));
        let adj = adjusted_average(&[1.0, 0.5], &[0.8, 0.2]).unwrap();
        assert!((adj - 0.9).abs() < 1e-15);
        let uniform = adjusted_average(&[0.2, 0.4, 0.9], &[1.0, 1.0, 1.0]).unwrap();
        assert!((uniform - 0.5).abs() < 1e-15);
    }

    fn manifest(groups: usize, records: &[(usize, usize)]) -> DatasetManifest {
        DatasetManifest {
            header: ManifestHeader {
                class_names: vec!["x".into(), "y".into()],
                feature_dim: None,
                split: Default::default(),
                group_table: (0..groups)
                    .map(|g| GroupDef {
                        id: g,
                        name: format!("g{g}"),
                        class_label: None,
                        spurious_label: None,
                    })
                    .collect(),
                eval_mode: EvalMode::Plain,
            },
            records: records
                .iter()
                .enumerate()
                .map(|(i, &(c, g))| {
                    let mut r = ImageRecord::new(format!("r{i}"), c);
                    r.group_label = Some(g);
                    r
                })
                .collect(),
            base_dir: None,
        }
    }

    #[test]
    fn empty_group_is_named() {
        let m = manifest(3, &[(0, 0), (1, 1)]);
        let err = group_metrics(&[Some(0), Some(1)], &m, None).unwrap_err();
        assert!(err.to_string().contains("g2"), "{err}");
    }

    #[test]
    fn metrics_modes() {
        let mut m = manifest(2, &[(0, 0), (0, 0), (1, 1), (1, 1)]);
        let preds = [Some(0), Some(0), Some(1), None];
        let g = group_metrics(&preds, &m, None).unwrap();
        assert_eq!(g.worst_group, 0.5);
        assert_eq!(g.plain_average, 0.75);
        m.header.eval_mode = EvalMode::Adjusted;
        assert!(group_metrics(&preds, &m, None).is_err());
        let w = BTreeMap::from([(0, 0.8), (1, 0.2)]);
        let g = group_metrics(&preds, &m, Some(&w)).unwrap();
        assert!((g.reported_average - 0.9).abs() < 1e-15);
        m.header.eval_mode = EvalMode::SingleGroup { group: 0 };
        assert_eq!(group_metrics(&preds, &m, None).unwrap().reported_worst_group, 1.0);
    }

    #[test]
    fn consensus_intersection() {
        let c = attribute_consensus(&[vec![1, 1, 0], vec![1, 0, 0]], &[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(c.per_class[0].shared, vec![0]);
        assert!(c.per_class[1].flagged && c.per_class[1].shared.is_empty());
        let single = attribute_consensus(&[vec![0, 1, 1]], &[1], &[1], 2).unwrap();
        assert_eq!(single.per_class[1].shared, vec![1, 2]);
    }
}
