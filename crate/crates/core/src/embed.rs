//! Canonical embedding files.
//!
//! An embedding file is UTF-8 text with LF line endings and tab separated
//! columns:
//!
//! ```text
//! #dim=4
//! image_id  subject_id  class_id  model_id  tta_tag  v0  v1  v2  v3
//! img-001   pat-001     D0001     r100      orig     1.00000000e0  ...
//! ```
//!
//! Line 1 declares the vector dimension. Optional provenance metadata follows
//! on the same line as extra `key=value` columns, sorted by key. Line 2 is the
//! fixed header, then one record per line. Values are written with nine
//! significant digits, which round-trips every `f32` exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of metadata columns preceding the vector values.
pub const META_COLUMNS: usize = 5;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("malformed header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate key {key} at line {line}")]
    DuplicateKey { line: usize, key: String },
    #[error("cannot write record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("invalid metadata entry {key:?}: {reason}")]
    InvalidMetadata { key: String, reason: String },
    #[error("DimensionMismatch: expected dimension {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
}

/// Test-time augmentation applied to the source photo before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TtaTag {
    #[serde(rename = "orig")]
    Orig,
    #[serde(rename = "flip")]
    Flip,
    #[serde(rename = "gray")]
    Gray,
    #[serde(rename = "gray-flip")]
    GrayFlip,
}

impl TtaTag {
    pub const ALL: [TtaTag; 4] = [TtaTag::Orig, TtaTag::Flip, TtaTag::Gray, TtaTag::GrayFlip];

    pub fn as_str(self) -> &'static str {
        match self {
            TtaTag::Orig => "orig",
            TtaTag::Flip => "flip",
            TtaTag::Gray => "gray",
            TtaTag::GrayFlip => "gray-flip",
        }
    }
}

impl fmt::Display for TtaTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TtaTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orig" => Ok(TtaTag::Orig),
            "flip" => Ok(TtaTag::Flip),
            "gray" => Ok(TtaTag::Gray),
            "gray-flip" => Ok(TtaTag::GrayFlip),
            other => Err(format!("unknown tta tag {other:?}")),
        }
    }
}

/// One ensemble channel: a model paired with a test-time augmentation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariantKey {
    pub model_id: String,
    pub tta_tag: TtaTag,
}

impl VariantKey {
    pub fn new(model_id: impl Into<String>, tta_tag: TtaTag) -> Self {
        Self { model_id: model_id.into(), tta_tag }
    }

    /// Every (model, tag) combination, models outermost.
    pub fn product<S: AsRef<str>>(models: &[S], tags: &[TtaTag]) -> Vec<VariantKey> {
        models
            .iter()
            .flat_map(|m| tags.iter().map(move |&t| VariantKey::new(m.as_ref(), t)))
            .collect()
    }
}

impl fmt::Display for VariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.model_id, self.tta_tag)
    }
}

impl FromStr for VariantKey {
    type Err = String;

    /// Parses `model:tag`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (model, tag) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("variant {s:?} is not of the form model:tag"))?;
        if model.is_empty() {
            return Err(format!("variant {s:?} has an empty model id"));
        }
        Ok(VariantKey::new(model, tag.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub subject_id: String,
    pub class_id: String,
    pub model_id: String,
    pub tta_tag: TtaTag,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn variant(&self) -> VariantKey {
        VariantKey::new(self.model_id.clone(), self.tta_tag)
    }
}

/// A collection of records sharing one dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub dimension: usize,
    pub records: Vec<EmbeddingRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl EmbeddingSet {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, records: Vec::new(), metadata: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct model ids in first-appearance order.
    pub fn model_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.model_id.as_str()))
            .map(|r| r.model_id.clone())
            .collect()
    }

    /// Keeps records for which `keep` holds; metadata is carried over.
    pub fn filtered(&self, mut keep: impl FnMut(&EmbeddingRecord) -> bool) -> EmbeddingSet {
        EmbeddingSet {
            dimension: self.dimension,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Concatenates sets of equal dimension, rejecting repeated keys.
    ///
    /// Metadata of later sets never overrides earlier entries.
    pub fn merge<'a>(sets: impl IntoIterator<Item = &'a EmbeddingSet>) -> Result<EmbeddingSet, EmbedError> {
        let mut out: Option<EmbeddingSet> = None;
        let mut keys = HashSet::new();
        for set in sets {
            let acc = out.get_or_insert_with(|| EmbeddingSet::new(set.dimension));
            if acc.dimension != set.dimension {
                return Err(EmbedError::DimensionMismatch { expected: acc.dimension, found: set.dimension });
            }
            for (k, v) in &set.metadata {
                acc.metadata.entry(k.clone()).or_insert_with(|| v.clone());
            }
            for r in &set.records {
                if !keys.insert((r.image_id.clone(), r.model_id.clone(), r.tta_tag)) {
                    return Err(EmbedError::DuplicateKey {
                        line: 0,
                        key: format!("{}/{}/{}", r.image_id, r.model_id, r.tta_tag),
                    });
                }
                acc.records.push(r.clone());
            }
        }
        Ok(out.unwrap_or_default())
    }
}

fn header_line(dimension: usize) -> String {
    let mut s = String::from("image_id\tsubject_id\tclass_id\tmodel_id\ttta_tag");
    for i in 0..dimension {
        s.push_str("\tv");
        s.push_str(&i.to_string());
    }
    s
}

/// Nine significant digits in scientific notation.
pub fn format_value(x: f64) -> String {
    format!("{x:.8e}")
}

fn parse_header(line: &str) -> Result<(usize, BTreeMap<String, String>), EmbedError> {
    let bad = |reason: String| EmbedError::MalformedHeader { line: 1, reason };
    let mut fields = line.split('\t');
    let first = fields.next().unwrap_or_default();
    let dim_text = first
        .strip_prefix("#dim=")
        .ok_or_else(|| bad(format!("expected `#dim=<D>`, found {first:?}")))?;
    let dimension: usize = dim_text
        .parse()
        .map_err(|_| bad(format!("dimension {dim_text:?} is not a positive integer")))?;
    if dimension == 0 {
        return Err(bad("dimension must be positive".into()));
    }
    let mut metadata = BTreeMap::new();
    for field in fields {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("metadata field {field:?} is not key=value")))?;
        if k.is_empty() {
            return Err(bad("metadata key is empty".into()));
        }
        if metadata.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(format!("metadata key {k:?} repeated")));
        }
    }
    Ok((dimension, metadata))
}

fn parse_row(line: &str, line_no: usize, dimension: usize) -> Result<EmbeddingRecord, EmbedError> {
    let bad = |reason: String| EmbedError::MalformedRow { line: line_no, reason };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != META_COLUMNS + dimension {
        return Err(bad(format!(
            "expected {} columns, found {}",
            META_COLUMNS + dimension,
            fields.len()
        )));
    }
    for (name, value) in ["image_id", "subject_id", "class_id", "model_id"].iter().zip(&fields) {
        if value.is_empty() {
            return Err(bad(format!("{name} is empty")));
        }
    }
    let tta_tag: TtaTag = fields[4].parse().map_err(bad)?;
    let vector = fields[META_COLUMNS..]
        .iter()
        .enumerate()
        .map(|(i, text)| match text.parse::<f32>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(bad(format!("value v{i} = {text:?} is not a finite number"))),
        })
        .collect::<Result<Vec<f32>, _>>()?;
    Ok(EmbeddingRecord {
        image_id: fields[0].to_string(),
        subject_id: fields[1].to_string(),
        class_id: fields[2].to_string(),
        model_id: fields[3].to_string(),
        tta_tag,
        vector,
    })
}

/// Parses a canonical embedding stream, preserving record order.
pub fn parse_embedding_file<R: Read>(stream: R) -> Result<EmbeddingSet, EmbedError> {
    let mut lines = BufReader::new(stream).lines();
    let first = lines.next().transpose()?.ok_or(EmbedError::MalformedHeader {
        line: 1,
        reason: "empty input".into(),
    })?;
    let (dimension, metadata) = parse_header(&first)?;
    let header = lines.next().transpose()?.ok_or(EmbedError::MalformedHeader {
        line: 2,
        reason: "missing column header".into(),
    })?;
    if header != header_line(dimension) {
        return Err(EmbedError::MalformedHeader {
            line: 2,
            reason: format!("column header does not match dimension {dimension}"),
        });
    }

    let mut set = EmbeddingSet { dimension, records: Vec::new(), metadata };
    let mut seen: HashMap<(String, String, TtaTag), usize> = HashMap::new();
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 3;
        let record = parse_row(&line?, line_no, dimension)?;
        let key = (record.image_id.clone(), record.model_id.clone(), record.tta_tag);
        if let Some(first_line) = seen.insert(key, line_no) {
            return Err(EmbedError::DuplicateKey {
                line: line_no,
                key: format!(
                    "{}/{}/{} (first seen at line {first_line})",
                    record.image_id, record.model_id, record.tta_tag
                ),
            });
        }
        set.records.push(record);
    }
    Ok(set)
}

fn check_metadata(metadata: &BTreeMap<String, String>) -> Result<(), EmbedError> {
    for (k, v) in metadata {
        let bad = |reason: &str| EmbedError::InvalidMetadata { key: k.clone(), reason: reason.into() };
        if k.is_empty() || k.contains(['=', '\t', '\n', '\r']) {
            return Err(bad("keys must be non-empty and free of '=', tabs and newlines"));
        }
        if v.contains(['\t', '\n', '\r']) {
            return Err(bad("values must be free of tabs and newlines"));
        }
    }
    Ok(())
}

/// Writes `set` in canonical form. Output bytes depend only on the set.
pub fn write_embedding_file<W: Write>(set: &EmbeddingSet, stream: W) -> Result<(), EmbedError> {
    check_metadata(&set.metadata)?;
    let mut out = BufWriter::new(stream);
    let mut first = format!("#dim={}", set.dimension);
    for (k, v) in &set.metadata {
        first.push('\t');
        first.push_str(k);
        first.push('=');
        first.push_str(v);
    }
    writeln!(out, "{first}")?;
    writeln!(out, "{}", header_line(set.dimension))?;

    let mut line = String::new();
    for (index, r) in set.records.iter().enumerate() {
        if r.vector.len() != set.dimension {
            return Err(EmbedError::InvalidRecord {
                index,
                reason: format!("vector length {} != dimension {}", r.vector.len(), set.dimension),
            });
        }
        let ids = [&r.image_id, &r.subject_id, &r.class_id, &r.model_id];
        if ids.iter().any(|s| s.is_empty() || s.contains(['\t', '\n', '\r'])) {
            return Err(EmbedError::InvalidRecord {
                index,
                reason: "identifier fields must be non-empty and free of tabs and newlines".into(),
            });
        }
        line.clear();
        for id in ids {
            line.push_str(id);
            line.push('\t');
        }
        line.push_str(r.tta_tag.as_str());
        for &v in &r.vector {
            if !v.is_finite() {
                return Err(EmbedError::InvalidRecord { index, reason: "non-finite value".into() });
            }
            line.push('\t');
            line.push_str(&format!("{v:.8e}"));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embedding_path(path: &Path) -> Result<EmbeddingSet, EmbedError> {
    parse_embedding_file(File::open(path)?)
}

pub fn write_embedding_path(set: &EmbeddingSet, path: &Path) -> Result<(), EmbedError> {
    write_embedding_file(set, File::create(path)?)
}

/// Where a validation issue was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Locator {
    Set,
    Record { index: usize, image_id: String, model_id: String, tta_tag: TtaTag },
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locator::Set => f.write_str("set"),
            Locator::Record { index, image_id, model_id, tta_tag } => {
                write!(f, "record {index} ({image_id}/{model_id}/{tta_tag})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroDimension,
    EmptyVector,
    DimensionMismatch { expected: usize, found: usize },
    NonFinite { position: usize },
    EmptyField(&'static str),
    DuplicateKey { first_index: usize },
    /// The same image carries different subject or class ids across records.
    InconsistentImage { field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub locator: Locator,
    pub violation: Violation,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    /// Variants present per image, expected or not.
    pub variant_coverage: BTreeMap<String, BTreeSet<VariantKey>>,
    /// Expected variants absent per image; images with full coverage are omitted.
    pub missing: BTreeMap<String, Vec<VariantKey>>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Checks every record and set invariant and reports coverage of
/// `expected_variants`. Never fails; problems are collected in the report.
pub fn validate_set(set: &EmbeddingSet, expected_variants: &[VariantKey]) -> ValidationReport {
    let mut report = ValidationReport::default();
    if set.dimension == 0 {
        report.errors.push(ValidationIssue { locator: Locator::Set, violation: Violation::ZeroDimension });
    }

    let mut first_index: HashMap<(&str, &str, TtaTag), usize> = HashMap::new();
    let mut identity: HashMap<&str, (&str, &str)> = HashMap::new();
    for (index, r) in set.records.iter().enumerate() {
        let locator = || Locator::Record {
            index,
            image_id: r.image_id.clone(),
            model_id: r.model_id.clone(),
            tta_tag: r.tta_tag,
        };
        let mut push = |violation| report.errors.push(ValidationIssue { locator: locator(), violation });

        for (name, value) in [
            ("image_id", &r.image_id),
            ("subject_id", &r.subject_id),
            ("class_id", &r.class_id),
            ("model_id", &r.model_id),
        ] {
            if value.is_empty() {
                push(Violation::EmptyField(name));
            }
        }
        if r.vector.is_empty() {
            push(Violation::EmptyVector);
        } else if r.vector.len() != set.dimension {
            push(Violation::DimensionMismatch { expected: set.dimension, found: r.vector.len() });
        }
        if let Some(position) = r.vector.iter().position(|v| !v.is_finite()) {
            push(Violation::NonFinite { position });
        }
        match first_index.get(&(r.image_id.as_str(), r.model_id.as_str(), r.tta_tag)) {
            Some(&first) => push(Violation::DuplicateKey { first_index: first }),
            None => {
                first_index.insert((&r.image_id, &r.model_id, r.tta_tag), index);
            }
        }
        match identity.get(r.image_id.as_str()) {
            Some(&(subject, class)) => {
                if subject != r.subject_id {
                    push(Violation::InconsistentImage { field: "subject_id" });
                }
                if class != r.class_id {
                    push(Violation::InconsistentImage { field: "class_id" });
                }
            }
            None => {
                identity.insert(&r.image_id, (&r.subject_id, &r.class_id));
            }
        }

        report.variant_coverage.entry(r.image_id.clone()).or_default().insert(r.variant());
    }

    for (image_id, present) in &report.variant_coverage {
        let absent: Vec<VariantKey> =
            expected_variants.iter().filter(|v| !present.contains(*v)).cloned().collect();
        if !absent.is_empty() {
            report.missing.insert(image_id.clone(), absent);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(image: &str, model: &str, tag: TtaTag, vector: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            image_id: image.into(),
            subject_id: format!("s-{image}"),
            class_id: "D1".into(),
            model_id: model.into(),
            tta_tag: tag,
            vector,
        }
    }

    fn to_string(set: &EmbeddingSet) -> String {
        let mut buf = Vec::new();
        write_embedding_file(set, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn parses_two_rows() {
        let text = format!(
            "#dim=4\n{}\na\tp1\tD1\tm\torig\t1\t0\t0\t0\nb\tp2\tD2\tm\tflip\t0\t1\t0.5\t-2e-3\n",
            header_line(4)
        );
        let set = parse_embedding_file(text.as_bytes()).unwrap();
        assert_eq!(set.dimension, 4);
        assert_eq!(set.records.len(), 2);
        assert_eq!(set.records[1].tta_tag, TtaTag::Flip);
        assert_eq!(set.records[1].vector, vec![0.0, 1.0, 0.5, -2e-3]);
    }

    #[test]
    fn short_row_reports_its_line() {
        let text = format!("#dim=4\n{}\na\tp\tD\tm\torig\t1\t2\t3\n", header_line(4));
        match parse_embedding_file(text.as_bytes()) {
            Err(EmbedError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_headers() {
        for text in ["", "#dim=0\n", "dim=3\n", "#dim=2\nimage_id\n", "#dim=x\n"] {
            assert!(
                matches!(parse_embedding_file(text.as_bytes()), Err(EmbedError::MalformedHeader { .. })),
                "{text:?}"
            );
        }
    }

    #[test]
    fn rejects_non_numeric_and_unknown_tag() {
        let h = header_line(2);
        for row in ["a\tp\tD\tm\torig\t1\tx", "a\tp\tD\tm\tsepia\t1\t2", "a\tp\tD\tm\torig\t1\tNaN"] {
            let text = format!("#dim=2\n{h}\n{row}\n");
            assert!(matches!(
                parse_embedding_file(text.as_bytes()),
                Err(EmbedError::MalformedRow { line: 3, .. })
            ));
        }
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let h = header_line(1);
        let text = format!("#dim=1\n{h}\na\tp\tD\tm\torig\t1\nb\tp\tD\tm\torig\t1\na\tp\tD\tm\torig\t2\n");
        match parse_embedding_file(text.as_bytes()) {
            Err(EmbedError::DuplicateKey { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_set_writes_header_only() {
        let text = to_string(&EmbeddingSet::new(8));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "#dim=8");
        assert!(lines[1].ends_with("\tv7"));
    }

    #[test]
    fn one_record_writes_one_row() {
        let mut set = EmbeddingSet::new(8);
        set.records.push(record("a", "m", TtaTag::Gray, vec![0.25; 8]));
        let text = to_string(&set);
        let rows: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].split('\t').count(), 5 + 8);
        assert_eq!(to_string(&set), text);
    }

    #[test]
    fn metadata_rides_on_the_dimension_line() {
        let mut set = EmbeddingSet::new(2);
        set.metadata.insert("seed".into(), "7".into());
        set.metadata.insert("dataset".into(), "synthetic".into());
        let text = to_string(&set);
        assert!(text.starts_with("#dim=2\tdataset=synthetic\tseed=7\n"));
        assert_eq!(parse_embedding_file(text.as_bytes()).unwrap(), set);

        set.metadata.insert("bad\tkey".into(), "x".into());
        assert!(matches!(
            write_embedding_file(&set, Vec::new()),
            Err(EmbedError::InvalidMetadata { .. })
        ));
    }

    #[test]
    fn validation_reports_full_coverage() {
        let variants = VariantKey::product(&["m0", "m1", "m2"], &TtaTag::ALL);
        let mut set = EmbeddingSet::new(2);
        for v in &variants {
            set.records.push(record("a", &v.model_id, v.tta_tag, vec![1.0, 0.0]));
        }
        let report = validate_set(&set, &variants);
        assert!(report.is_valid());
        assert!(report.is_complete());
        assert_eq!(report.variant_coverage["a"].len(), 12);
    }

    #[test]
    fn validation_lists_missing_tag() {
        let variants = VariantKey::product(&["m"], &TtaTag::ALL);
        let mut set = EmbeddingSet::new(2);
        for tag in [TtaTag::Orig, TtaTag::Flip, TtaTag::GrayFlip] {
            set.records.push(record("a", "m", tag, vec![1.0, 0.0]));
        }
        let report = validate_set(&set, &variants);
        assert!(report.is_valid());
        assert_eq!(report.variant_coverage["a"].len(), 3);
        assert_eq!(report.missing["a"], vec![VariantKey::new("m", TtaTag::Gray)]);
    }

    #[test]
    fn validation_flags_zero_length_vector() {
        let mut set = EmbeddingSet::new(2);
        set.records.push(record("a", "m", TtaTag::Orig, vec![1.0, 0.0]));
        set.records.push(record("b", "m", TtaTag::Orig, vec![]));
        let report = validate_set(&set, &[]);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].violation, Violation::EmptyVector);
        assert!(matches!(report.errors[0].locator, Locator::Record { index: 1, .. }));
    }

    #[test]
    fn validation_collects_every_violation() {
        let mut set = EmbeddingSet::new(2);
        set.records.push(record("a", "m", TtaTag::Orig, vec![1.0, f32::NAN]));
        set.records.push(record("a", "m", TtaTag::Orig, vec![1.0, 0.0, 0.0]));
        let mut other = record("a", "m", TtaTag::Flip, vec![1.0, 0.0]);
        other.class_id = "D2".into();
        set.records.push(other);
        let violations: Vec<Violation> =
            validate_set(&set, &[]).errors.into_iter().map(|e| e.violation).collect();
        assert!(violations.contains(&Violation::NonFinite { position: 1 }));
        assert!(violations.contains(&Violation::DimensionMismatch { expected: 2, found: 3 }));
        assert!(violations.contains(&Violation::DuplicateKey { first_index: 0 }));
        assert!(violations.contains(&Violation::InconsistentImage { field: "class_id" }));
    }

    #[test]
    fn variant_key_parsing() {
        let v: VariantKey = "r100:gray-flip".parse().unwrap();
        assert_eq!(v, VariantKey::new("r100", TtaTag::GrayFlip));
        assert_eq!(v.to_string(), "r100:gray-flip");
        assert!("r100".parse::<VariantKey>().is_err());
        assert!(":orig".parse::<VariantKey>().is_err());
    }

    #[test]
    fn merge_checks_dimension_and_keys() {
        let mut a = EmbeddingSet::new(2);
        a.records.push(record("a", "m", TtaTag::Orig, vec![1.0, 0.0]));
        let b = EmbeddingSet::new(3);
        assert!(matches!(EmbeddingSet::merge([&a, &b]), Err(EmbedError::DimensionMismatch { .. })));
        assert!(matches!(EmbeddingSet::merge([&a, &a]), Err(EmbedError::DuplicateKey { .. })));
        assert_eq!(EmbeddingSet::merge([&a]).unwrap(), a);
    }
}
