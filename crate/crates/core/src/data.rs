//! Domain types, manifest ingestion, and artifact persistence.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
pub use crate::text::canonicalize;

/// One dataset row.
///
/// `image` points at an image file (relative paths resolve against the
/// manifest directory); `tags` describe a synthetic image for mock backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub class_label: usize,
    #[serde(default)]
    pub group_label: Option<usize>,
    #[serde(default)]
    pub spurious_label: Option<usize>,
    #[serde(default)]
    pub features: Option<Vec<f64>>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub gt_concepts: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, class_label: usize) -> Self {
        ImageRecord {
            id: id.into(),
            class_label,
            group_label: None,
            spurious_label: None,
            features: None,
            description: None,
            gt_concepts: None,
            image: None,
            tags: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Evaluation group: matches records by class and/or spurious label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDef {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub class_label: Option<usize>,
    #[serde(default)]
    pub spurious_label: Option<usize>,
}

impl GroupDef {
    pub fn matches(&self, r: &ImageRecord) -> bool {
        self.class_label.is_none_or(|c| c == r.class_label)
            && self
                .spurious_label
                .is_none_or(|s| Some(s) == r.spurious_label)
    }
}

/// How the headline "average" and "worst group" numbers are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Average weighted by training-split group sizes.
    #[default]
    Adjusted,
    /// Plain per-record average.
    Plain,
    /// Worst group is one configured group rather than the minimum.
    SingleGroup { group: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub group_table: Vec<GroupDef>,
    #[serde(default)]
    pub eval_mode: EvalMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ImageRecord>,
    /// Directory used to resolve relative `image` paths.
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.header.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.header.class_names
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.header.feature_dim.or_else(|| {
            self.records
                .iter()
                .find_map(|r| r.features.as_ref().map(Vec::len))
        })
    }

    /// Explicit group label, else the first matching predicate in the group table.
    pub fn group_of(&self, r: &ImageRecord) -> Option<usize> {
        r.group_label.or_else(|| {
            self.header
                .group_table
                .iter()
                .find(|g| g.matches(r))
                .map(|g| g.id)
        })
    }

    pub fn group_name(&self, id: usize) -> String {
        self.header
            .group_table
            .iter()
            .find(|g| g.id == id)
            .map(|g| g.name.clone())
            .unwrap_or_else(|| format!("group {id}"))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_label).collect()
    }

    /// Feature matrix; errors if any record lacks features.
    pub fn features(&self) -> Result<Vec<Vec<f64>>> {
        self.records
            .iter()
            .map(|r| {
                r.features
                    .clone()
                    .ok_or_else(|| Error::Precondition(format!("record `{}` has no features", r.id)))
            })
            .collect()
    }

    pub fn resolve_image_path(&self, image: &str) -> PathBuf {
        let p = Path::new(image);
        match (&self.base_dir, p.is_relative()) {
            (Some(base), true) => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Validate every structural invariant; line numbers are 1-based file lines.
    pub fn validate(&self) -> Result<()> {
        let l = self.num_classes();
        if l < 2 {
            return Err(Error::Invalid(format!("manifest needs at least 2 classes, found {l}")));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut feat_dim = self.header.feature_dim;
        let mut gt_len: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            if let Some(first) = seen.insert(r.id.as_str(), line) {
                return Err(Error::DuplicateId {
                    id: r.id.clone(),
                    first_line: first,
                    second_line: line,
                });
            }
            if r.class_label >= l {
                return Err(Error::UnknownClass {
                    line,
                    label: r.class_label,
                    num_classes: l,
                });
            }
            if let Some(f) = &r.features {
                match feat_dim {
                    Some(d) if d != f.len() => {
                        return Err(Error::FeatureLength {
                            line,
                            expected: d,
                            found: f.len(),
                        })
                    }
                    None => feat_dim = Some(f.len()),
                    _ => {}
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parse {
                        source_name: "manifest".into(),
                        line,
                        msg: "non-finite feature value".into(),
                    });
                }
            }
            if let Some(g) = r.group_label {
                if !self.header.group_table.iter().any(|d| d.id == g) {
                    return Err(Error::Parse {
                        source_name: "manifest".into(),
                        line,
                        msg: format!("group {g} is not in the group table"),
                    });
                }
            }
            if let Some(gt) = &r.gt_concepts {
                if gt.iter().any(|&b| b > 1) {
                    return Err(Error::Parse {
                        source_name: "manifest".into(),
                        line,
                        msg: "gt_concepts must be binary".into(),
                    });
                }
                match gt_len {
                    Some(n) if n != gt.len() => {
                        return Err(Error::Parse {
                            source_name: "manifest".into(),
                            line,
                            msg: format!("gt_concepts length {} differs from {n}", gt.len()),
                        })
                    }
                    None => gt_len = Some(gt.len()),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
            source_name: source_name.into(),
            line: 1,
            msg: "missing header line".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(header_line).map_err(|e| Error::Parse {
            source_name: source_name.into(),
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        let mut records = Vec::new();
        for (idx, line) in lines {
            let rec: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                source_name: source_name.into(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        let m = DatasetManifest {
            header,
            records,
            base_dir: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text()?.as_bytes())
    }
}

/// Read and validate a line-delimited manifest. Records keep file order.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_to_string(path)?;
    let mut m = DatasetManifest::parse(&text, &path.display().to_string())?;
    m.base_dir = path.parent().map(Path::to_path_buf);
    Ok(m)
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$variant),)+
                    other => Err(Error::Invalid(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ImportantFeatures,
    Superclass,
    SeenAround,
    Distinguished,
    Subclass,
    Manual,
}

string_enum!(Provenance {
    ImportantFeatures => "important-features",
    Superclass => "superclass",
    SeenAround => "seen-around",
    Distinguished => "distinguished",
    Subclass => "subclass",
    Manual => "manual",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptStatus {
    Active,
    RemovedDedup,
    RemovedSpurious,
}

string_enum!(ConceptStatus {
    Active => "active",
    RemovedDedup => "removed-dedup",
    RemovedSpurious => "removed-spurious",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub phrase: String,
    pub provenance: Provenance,
    pub status: ConceptStatus,
}

/// Ordered concept phrases with provenance and filter status.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConceptPool {
    pub entries: Vec<ConceptEntry>,
}

impl ConceptPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_phrases<S: AsRef<str>>(phrases: &[S], provenance: Provenance) -> Self {
        let mut pool = Self::new();
        for p in phrases {
            pool.insert(p.as_ref(), provenance);
        }
        pool
    }

    /// Insert a canonicalised phrase; returns false if already present.
    pub fn insert(&mut self, phrase: &str, provenance: Provenance) -> bool {
        let phrase = canonicalize(phrase);
        if phrase.is_empty() || self.entries.iter().any(|e| e.phrase == phrase) {
            return false;
        }
        self.entries.push(ConceptEntry {
            phrase,
            provenance,
            status: ConceptStatus::Active,
        });
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of active concepts (m).
    pub fn active_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == ConceptStatus::Active)
            .count()
    }

    pub fn active_phrases(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.status == ConceptStatus::Active)
            .map(|e| e.phrase.clone())
            .collect()
    }

    pub fn count_status(&self, status: ConceptStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.phrase, e.provenance, e.status));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pool = ConceptPool::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Parse {
                source_name: "pool".into(),
                line: i + 1,
                msg,
            };
            if parts.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", parts.len())));
            }
            let phrase = canonicalize(parts[0]);
            if pool.entries.iter().any(|e| e.phrase == phrase) {
                return Err(bad(format!("duplicate phrase `{phrase}`")));
            }
            pool.entries.push(ConceptEntry {
                phrase,
                provenance: parts[1].parse().map_err(|e: Error| bad(e.to_string()))?,
                status: parts[2].parse().map_err(|e: Error| bad(e.to_string()))?,
            });
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixSource {
    Raw,
    Refined,
    Consolidated,
}

string_enum!(MatrixSource {
    Raw => "raw",
    Refined => "refined",
    Consolidated => "consolidated",
});

/// Images × concepts binary matrix with abstain flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMatrix {
    pub image_ids: Vec<String>,
    pub concept_phrases: Vec<String>,
    pub bits: Vec<Vec<u8>>,
    pub abstain: Vec<Vec<bool>>,
    pub source: MatrixSource,
}

impl AnnotationMatrix {
    pub fn zeros(image_ids: Vec<String>, concept_phrases: Vec<String>, source: MatrixSource) -> Self {
        let (n, m) = (image_ids.len(), concept_phrases.len());
        AnnotationMatrix {
            image_ids,
            concept_phrases,
            bits: vec![vec![0; m]; n],
            abstain: vec![vec![false; m]; n],
            source,
        }
    }

    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.concept_phrases.len()
    }

    pub fn column_index(&self, phrase: &str) -> Option<usize> {
        let c = canonicalize(phrase);
        self.concept_phrases.iter().position(|p| *p == c)
    }

    pub fn column(&self, j: usize) -> Vec<u8> {
        self.bits.iter().map(|row| row[j]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.rows(), self.cols());
        if self.bits.len() != n || self.abstain.len() != n {
            return Err(Error::Dimension(format!(
                "{n} image ids but {} bit rows and {} abstain rows",
                self.bits.len(),
                self.abstain.len()
            )));
        }
        for (i, (b, a)) in self.bits.iter().zip(&self.abstain).enumerate() {
            if b.len() != m || a.len() != m {
                return Err(Error::Dimension(format!("row {i} does not have {m} columns")));
            }
            for (j, (&bit, &abs)) in b.iter().zip(a).enumerate() {
                if bit > 1 {
                    return Err(Error::NonBinaryCell {
                        row: i,
                        col: j,
                        value: bit.to_string(),
                    });
                }
                if abs && bit != 0 {
                    return Err(Error::Invalid(format!("row {i}, column {j}: abstain cell has bit 1")));
                }
            }
        }
        Ok(())
    }

    /// Path of the abstain sibling for a matrix file.
    pub fn abstain_path(path: &Path) -> PathBuf {
        path.with_extension("abstain")
    }

    fn write_csv<T: Copy>(
        &self,
        first: &str,
        cells: &[Vec<T>],
        render: impl Fn(T) -> &'static str,
    ) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec![first.to_string()];
        header.extend(self.concept_phrases.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.image_ids.iter().zip(cells) {
            let mut rec = vec![id.as_str()];
            rec.extend(row.iter().map(|&c| render(c)));
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Invalid(format!("csv flush: {e}")))
    }

    /// Encoded (matrix, abstain) file contents.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        self.validate()?;
        let main = self.write_csv("image_id", &self.bits, |b| if b == 1 { "1" } else { "0" })?;
        let abst = self.write_csv(&format!("source:{}", self.source), &self.abstain, |a| {
            if a {
                "1"
            } else {
                "0"
            }
        })?;
        Ok((main, abst))
    }

    pub fn decode(main: &[u8], abstain: Option<&[u8]>) -> Result<Self> {
        let (ids, phrases, bits, _) = read_binary_csv(main, "image_id")?;
        let (abstain, source) = match abstain {
            Some(bytes) => {
                let (aids, aphr, cells, first) = read_binary_csv(bytes, "source:")?;
                if aids != ids || aphr != phrases {
                    return Err(Error::Dimension("abstain file shape differs from matrix".into()));
                }
                let src: MatrixSource = first.trim_start_matches("source:").parse()?;
                (cells.into_iter().map(|r| r.into_iter().map(|c| c == 1).collect()).collect(), src)
            }
            None => (vec![vec![false; phrases.len()]; ids.len()], MatrixSource::Raw),
        };
        let m = AnnotationMatrix {
            image_ids: ids,
            concept_phrases: phrases,
            bits,
            abstain,
            source,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (main, abst) = self.encode()?;
        write_file(path, &main)?;
        write_file(&Self::abstain_path(path), &abst)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let main = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let apath = Self::abstain_path(path);
        let abst = if apath.exists() {
            Some(std::fs::read(&apath).map_err(|e| Error::io(&apath, e))?)
        } else {
            None
        };
        Self::decode(&main, abst.as_deref())
    }
}

type BinaryCsv = (Vec<String>, Vec<String>, Vec<Vec<u8>>, String);

fn read_binary_csv(bytes: &[u8], first_prefix: &str) -> Result<BinaryCsv> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = r.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(Error::Dimension("matrix file has no header row".into())),
    };
    let first = header.get(0).unwrap_or_default().to_string();
    if !first.starts_with(first_prefix) {
        return Err(Error::Invalid(format!(
            "header must start with `{first_prefix}`, found `{first}`"
        )));
    }
    let phrases: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut cells = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != phrases.len() + 1 {
            return Err(Error::Dimension(format!(
                "row {i} has {} cells, header declares {}",
                rec.len().saturating_sub(1),
                phrases.len()
            )));
        }
        ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, v)| match v {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::NonBinaryCell {
                    row: i,
                    col: j,
                    value: other.to_string(),
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        cells.push(row);
    }
    Ok((ids, phrases, cells, first))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"class_names":["cat","dog"],"feature_dim":null,"group_table":[]}"#;

    fn manifest_text(lines: &[&str]) -> String {
        let mut s = String::from(HEADER);
        for l in lines {
            s.push('\n');
            s.push_str(l);
        }
        s
    }

    #[test]
    fn loads_three_records_in_order() {
        let t = manifest_text(&[
            r#"{"id":"a","class_label":0}"#,
            r#"{"id":"b","class_label":1}"#,
            r#"{"id":"c","class_label":0}"#,
        ]);
        let m = DatasetManifest::parse(&t, "m").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.num_classes(), 2);
        assert_eq!(
            m.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(m.records[0].description, None);
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let t = manifest_text(&[r#"{"id":"a","class_label":0}"#, r#"{"id":"a","class_label":1}"#]);
        let err = DatasetManifest::parse(&t, "m").unwrap_err();
        match &err {
            Error::DuplicateId {
                id,
                first_line,
                second_line,
            } => assert_eq!((id.as_str(), *first_line, *second_line), ("a", 2, 3)),
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn feature_length_mismatch() {
        let t = manifest_text(&[
            r#"{"id":"a","class_label":0,"features":[1,2,3,4]}"#,
            r#"{"id":"b","class_label":1,"features":[1,2,3,4,5]}"#,
        ]);
        assert!(matches!(
            DatasetManifest::parse(&t, "m"),
            Err(Error::FeatureLength {
                line: 3,
                expected: 4,
                found: 5
            })
        ));
    }

    #[test]
    fn unknown_class_and_parse_errors() {
        let t = manifest_text(&[r#"{"id":"a","class_label":2}"#]);
        assert!(matches!(DatasetManifest::parse(&t, "m"), Err(Error::UnknownClass { .. })));
        let t = manifest_text(&[r#"{"id":"a","class_label":0}"#, "{not json"]);
        assert!(matches!(DatasetManifest::parse(&t, "m"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn group_references_must_exist() {
        let t = manifest_text(&[r#"{"id":"a","class_label":0,"group_label":4}"#]);
        assert!(DatasetManifest::parse(&t, "m").is_err());
    }

    #[test]
    fn missing_optionals_serialize_as_null() {
        let r = ImageRecord::new("x", 1);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains(r#""description":null"#));
        assert!(!s.contains("\"\""));
    }

    #[test]
    fn matrix_round_trip_is_byte_identical() {
        let mut m = AnnotationMatrix::zeros(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "a long, thin blade".into()],
            MatrixSource::Raw,
        );
        m.bits = vec![vec![1, 0], vec![0, 1]];
        let (main, abst) = m.encode().unwrap();
        let back = AnnotationMatrix::decode(&main, Some(&abst)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode().unwrap(), (main, abst));
    }

    #[test]
    fn non_binary_cell_reports_position() {
        let err = AnnotationMatrix::decode(b"image_id,x,y\na,0,2\n", None).unwrap_err();
        assert!(matches!(err, Error::NonBinaryCell { row: 0, col: 1, .. }), "{err}");
    }

    #[test]
    fn header_row_mismatch() {
        let err = AnnotationMatrix::decode(b"image_id,x,y\na,0\n", None).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let m = AnnotationMatrix::zeros(vec![], vec!["x".into()], MatrixSource::Refined);
        let (main, abst) = m.encode().unwrap();
        assert_eq!(main, b"image_id,x\n");
        let back = AnnotationMatrix::decode(&main, Some(&abst)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pool_round_trip() {
        let mut p = ConceptPool::from_phrases(&["A  Pen", "a long, thin blade"], Provenance::Manual);
        assert!(!p.insert("a pen", Provenance::Superclass));
        p.entries[1].status = ConceptStatus::RemovedSpurious;
        let back = ConceptPool::parse(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.active_count(), 1);
    }
}
