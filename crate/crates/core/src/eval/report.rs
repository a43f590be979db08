//! Human-readable run report plus a machine-readable summary.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ConsensusReport, GroupMetrics};
use crate::annotate::{AnnotationQuality, QualityCell};
use crate::data::{write_file, ConceptPool};
use crate::error::Result;
use crate::nn::LeakageResult;
use crate::refine::FlipReport;
use crate::spurious::{CorrelationReport, SweepRow};

/// Everything a report can show. Absent stages render as "skipped".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub title: String,
    pub correlation: Option<CorrelationReport>,
    pub sweep: Option<Vec<SweepRow>>,
    pub pool: Option<ConceptPool>,
    pub annotation_quality: Option<AnnotationQuality>,
    pub flips: Option<FlipReport>,
    /// Named metric tables, e.g. one per evaluated split or input kind.
    pub metrics: Vec<(String, GroupMetrics)>,
    pub leakage: Option<LeakageResult>,
    pub consensus: Option<ConsensusReport>,
    /// Concept names for the consensus indices.
    pub concept_names: Vec<String>,
    /// (stage, seconds).
    pub timings: Vec<(String, f64)>,
}

const COEFFICIENTS_SHOWN: usize = 20;

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "n/a".into())
}

fn skipped(out: &mut String) {
    out.push_str("_skipped_\n\n");
}

fn quality_row(out: &mut String, name: &str, c: &QualityCell) {
    let f = |v: f64| format!("{v:.2}");
    let _ = writeln!(
        out,
        "| {name} | {} | {} | {} |",
        opt(c.recall, f),
        opt(c.precision, f),
        opt(c.f1, f)
    );
}

pub fn render_markdown(b: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}\n", if b.title.is_empty() { "Run report" } else { &b.title });

    out.push_str("## Spurious correlation detection\n\n");
    match &b.correlation {
        Some(rep) => {
            for class in &rep.per_class {
                let shown: Vec<String> = class
                    .coefficients
                    .iter()
                    .take(COEFFICIENTS_SHOWN)
                    .map(|k| format!("{} ({:.2})", k.keyword, k.r))
                    .collect();
                let _ = writeln!(out, "**{}**: {}\n", class.class_name, shown.join(", "));
            }
            if !rep.merge_groups.is_empty() {
                out.push_str("Merged keywords:\n\n");
                for (rep_kw, members) in &rep.merge_groups {
                    let _ = writeln!(out, "- {rep_kw} <- {}", members.join(", "));
                }
                out.push('\n');
            }
            match rep.threshold {
                Some(tau) => {
                    let _ = writeln!(out, "Selected {} keywords at threshold {tau}:\n", rep.selected.len());
                    out.push_str("| keyword | class | r |\n|---|---|---|\n");
                    for s in &rep.selected {
                        let _ = writeln!(out, "| {} | {} | {:.4} |", s.keyword, rep.class_names[s.class_label], s.r);
                    }
                    out.push('\n');
                }
                None => out.push_str("No threshold applied.\n\n"),
            }
        }
        None => skipped(&mut out),
    }

    out.push_str("## Threshold sweep\n\n");
    match &b.sweep {
        Some(rows) => {
            out.push_str("| tau | selected | removed | removed concepts |\n|---|---|---|---|\n");
            for r in rows {
                let _ = writeln!(out, "| {} | {} | {} | {} |", r.tau, r.selected, r.removed, r.removed_phrases.join(", "));
            }
            out.push('\n');
        }
        None => skipped(&mut out),
    }

    out.push_str("## Concept pool ledger\n\n");
    match &b.pool {
        Some(pool) => {
            let _ = writeln!(out, "{} candidates, {} active.\n", pool.len(), pool.active_count());
            out.push_str("| concept | provenance | status |\n|---|---|---|\n");
            for e in &pool.entries {
                let _ = writeln!(out, "| {} | {} | {} |", e.phrase, e.provenance, e.status);
            }
            out.push('\n');
        }
        None => skipped(&mut out),
    }

    out.push_str("## Annotation quality\n\n");
    match &b.annotation_quality {
        Some(q) => {
            out.push_str("| scope | recall | precision | F1 |\n|---|---|---|---|\n");
            quality_row(&mut out, "concept mean", &q.concept_mean);
            quality_row(&mut out, "image mean", &q.image_mean);
            for (name, c) in &q.per_concept {
                quality_row(&mut out, name, c);
            }
            out.push('\n');
        }
        None => skipped(&mut out),
    }

    out.push_str("## Refinement\n\n");
    match &b.flips {
        Some(f) => {
            out.push_str("| class | concept | before | after |\n|---|---|---|---|\n");
            for r in &f.rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} |",
                    r.class_name,
                    r.concept,
                    opt(r.rate_before, pct),
                    opt(r.rate_after, pct)
                );
            }
            if !f.flagged.is_empty() {
                let _ = writeln!(out, "\nImages kept at raw bits: {}", f.flagged.join(", "));
            }
            out.push('\n');
        }
        None => skipped(&mut out),
    }

    out.push_str("## Metrics\n\n");
    if b.metrics.is_empty() {
        skipped(&mut out);
    }
    for (name, m) in &b.metrics {
        let _ = writeln!(out, "### {name}\n");
        out.push_str("| group | correct | total | accuracy |\n|---|---|---|---|\n");
        for g in &m.per_group {
            let _ = writeln!(out, "| {} | {} | {} | {} |", g.name, g.correct, g.total, pct(g.accuracy));
        }
        let _ = writeln!(
            out,
            "\nWorst group {}, average {} (plain {}, adjusted {}).\n",
            pct(m.reported_worst_group),
            pct(m.reported_average),
            pct(m.plain_average),
            opt(m.adjusted_average, pct)
        );
    }

    out.push_str("## Leakage audit\n\n");
    match &b.leakage {
        Some(l) => {
            let _ = writeln!(
                out,
                "Probe accuracy {} on {} held-out images (chance {}).\n",
                pct(l.accuracy),
                l.test_size,
                pct(l.chance)
            );
        }
        None => skipped(&mut out),
    }

    out.push_str("## Attribute consensus\n\n");
    match &b.consensus {
        Some(c) => {
            let name = |j: &usize| b.concept_names.get(*j).cloned().unwrap_or_else(|| format!("#{j}"));
            for cls in &c.per_class {
                let label = b
                    .correlation
                    .as_ref()
                    .and_then(|r| r.class_names.get(cls.class_label).cloned())
                    .unwrap_or_else(|| format!("class {}", cls.class_label));
                if cls.flagged {
                    let _ = writeln!(out, "- {label}: no correct predictions");
                    continue;
                }
                let shared: Vec<String> = cls.shared.iter().map(name).collect();
                let only: Vec<String> = cls.non_overlap.iter().map(name).collect();
                let _ = writeln!(
                    out,
                    "- {label}: {} shared ({}); {} unique ({})",
                    shared.len(),
                    shared.join(", "),
                    only.len(),
                    only.join(", ")
                );
            }
            for (a, bb, common) in &c.pairwise {
                let _ = writeln!(out, "- classes {a} and {bb} overlap on {}", common.len());
            }
            out.push('\n');
        }
        None => skipped(&mut out),
    }

    out.push_str("## Timing\n\n");
    if b.timings.is_empty() {
        skipped(&mut out);
    } else {
        out.push_str("| stage | seconds |\n|---|---|\n");
        for (stage, s) in &b.timings {
            let _ = writeln!(out, "| {stage} | {s:.3} |");
        }
        out.push('\n');
    }
    out
}

/// Write `report.md` and `summary.json` into `dir`.
pub fn emit_report(bundle: &ReportBundle, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let md = dir.join("report.md");
    let json = dir.join("summary.json");
    write_file(&md, render_markdown(bundle).as_bytes())?;
    let mut summary = serde_json::to_string_pretty(bundle)?;
    summary.push('\n');
    write_file(&json, summary.as_bytes())?;
    Ok((md, json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_stages_are_skipped_and_output_is_stable() {
        let b = ReportBundle {
            title: "t".into(),
            ..Default::default()
        };
        let a = render_markdown(&b);
        assert!(a.contains("## Refinement\n\n_skipped_"));
        assert_eq!(a, render_markdown(&b.clone()));
    }

    #[test]
    fn selected_keywords_listed() {
        let rep = CorrelationReport::from_binary_lists(["cat", "dog"], [&[("kitty", 0.96)], &[("puppy", 0.97)]]);
        let rep = crate::spurious::select_s2(&rep, 0.2).unwrap();
        let md = render_markdown(&ReportBundle {
            correlation: Some(rep),
            ..Default::default()
        });
        assert!(md.contains("Selected 2 keywords at threshold 0.2"));
        assert!(md.contains("| kitty | cat | 0.9600 |"));
    }
}
