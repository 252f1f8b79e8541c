//! Meme records, the line-delimited manifest format, stratified splitting
//! and class statistics.
//!
//! A manifest holds one JSON object per line:
//!
//! ```text
//! {"id":"m-001","text":"...","label":"Hate","language":"bengali","image_path":"img/001.png"}
//! {"id":"m-002","text":"...","label":"Benign","language":"code-mixed","features":{"text_vec":[[0.1,0.2]],"image_vec":"feats/002.txt"}}
//! ```
//!
//! Exactly one of `image_path` or `features` must be present. Feature entries
//! are either inline (a flat array is one row, an array of arrays is `L x d`)
//! or a path to a feature file (see [`crate::encoders::read_feature_file`]).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

/// Class label. The discriminant order (Hate, Inflammatory, Benign) is the
/// fixed row/column order of every confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Hate,
    Inflammatory,
    Benign,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Hate, Label::Inflammatory, Label::Benign];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hate => "Hate",
            Label::Inflammatory => "Inflammatory",
            Label::Benign => "Benign",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown label `{s}`; allowed {{Hate, Inflammatory, Benign}}"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Language {
    Bengali,
    CodeSwitched,
    CodeMixed,
}

impl Language {
    pub const ALL: [Language; 3] = [Language::Bengali, Language::CodeSwitched, Language::CodeMixed];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Language::Bengali => "bengali",
            Language::CodeSwitched => "code-switched",
            Language::CodeMixed => "code-mixed",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Language::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown language `{s}`; allowed {{bengali, code-mixed, code-switched}}"
                ))
            })
    }
}

/// Where a modality's precomputed features live.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FeatureRef {
    /// `L x d` rows.
    Inline(Vec<Vec<f64>>),
    /// Path to a feature file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeaturePair {
    pub text_vec: FeatureRef,
    pub image_vec: FeatureRef,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    /// Raw image on disk, encoded end to end.
    Path(PathBuf),
    /// Precomputed features for both modalities.
    Features(FeaturePair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemeRecord {
    pub id: String,
    pub text: String,
    pub image_source: ImageSource,
    pub label: Label,
    pub language: Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    #[default]
    Unsplit,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<MemeRecord>,
    pub split: SplitTag,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(records: Vec<MemeRecord>, split: SplitTag) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Dataset { records, split })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn field_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Manifest {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_rows(v: &Value, line: usize, field: &str) -> Result<FeatureRef> {
    let number = |x: &Value| {
        x.as_f64()
            .ok_or_else(|| field_err(line, field, format!("expected a number, got {x}")))
    };
    match v {
        Value::String(p) => Ok(FeatureRef::File(PathBuf::from(p))),
        Value::Array(items) if items.is_empty() => Err(field_err(line, field, "empty feature array")),
        Value::Array(items) if items[0].is_array() => {
            let mut rows = Vec::with_capacity(items.len());
            for item in items {
                let row = item
                    .as_array()
                    .ok_or_else(|| field_err(line, field, "mixed rows and scalars"))?;
                rows.push(row.iter().map(number).collect::<Result<Vec<_>>>()?);
            }
            let d = rows[0].len();
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(field_err(line, field, "rows must be non-empty and equally long"));
            }
            Ok(FeatureRef::Inline(rows))
        }
        Value::Array(items) => Ok(FeatureRef::Inline(vec![items
            .iter()
            .map(number)
            .collect::<Result<Vec<_>>>()?])),
        _ => Err(field_err(
            line,
            field,
            "expected an array of numbers, an array of rows, or a file path",
        )),
    }
}

fn parse_line(text: &str, line: usize) -> Result<MemeRecord> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| field_err(line, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| field_err(line, "<record>", "expected a JSON object"))?;
    let string = |key: &str| -> Result<&str> {
        obj.get(key)
            .ok_or_else(|| field_err(line, key, "missing"))?
            .as_str()
            .ok_or_else(|| field_err(line, key, "expected a string"))
    };

    let id = string("id")?;
    if id.is_empty() {
        return Err(field_err(line, "id", "must not be empty"));
    }
    let label: Label = string("label")?
        .parse()
        .map_err(|e: Error| field_err(line, "label", strip_kind(e)))?;
    let language: Language = string("language")?
        .parse()
        .map_err(|e: Error| field_err(line, "language", strip_kind(e)))?;

    let image_source = match (obj.get("image_path"), obj.get("features")) {
        (Some(_), Some(_)) => {
            return Err(field_err(
                line,
                "image_path",
                "exactly one of `image_path` or `features` may be present",
            ))
        }
        (None, None) => {
            return Err(field_err(
                line,
                "image_path",
                "one of `image_path` or `features` is required",
            ))
        }
        (Some(p), None) => ImageSource::Path(PathBuf::from(
            p.as_str()
                .ok_or_else(|| field_err(line, "image_path", "expected a string"))?,
        )),
        (None, Some(f)) => {
            let f = f
                .as_object()
                .ok_or_else(|| field_err(line, "features", "expected an object"))?;
            let get = |key: &str| {
                f.get(key)
                    .ok_or_else(|| field_err(line, &format!("features.{key}"), "missing"))
            };
            ImageSource::Features(FeaturePair {
                text_vec: parse_rows(get("text_vec")?, line, "features.text_vec")?,
                image_vec: parse_rows(get("image_vec")?, line, "features.image_vec")?,
            })
        }
    };

    Ok(MemeRecord {
        id: id.to_string(),
        text: string("text")?.to_string(),
        image_source,
        label,
        language,
    })
}

fn strip_kind(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

/// Parses a manifest, preserving record order. Blank lines are skipped.
pub fn parse_manifest<R: BufRead>(source: R) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| field_err(line_no, "<record>", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, line_no)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(Dataset {
        records,
        split: SplitTag::Unsplit,
    })
}

#[derive(Serialize)]
struct LineOut<'a> {
    id: &'a str,
    text: &'a str,
    label: &'static str,
    language: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_path: Option<&'a PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<&'a FeaturePair>,
}

/// Writes `d` in manifest format; [`parse_manifest`] reads it back unchanged.
pub fn write_manifest<W: Write>(d: &Dataset, mut out: W) -> Result<()> {
    for r in &d.records {
        let (image_path, features) = match &r.image_source {
            ImageSource::Path(p) => (Some(p), None),
            ImageSource::Features(f) => (None, Some(f)),
        };
        let line = LineOut {
            id: &r.id,
            text: &r.text,
            label: r.label.as_str(),
            language: r.language.as_str(),
            image_path,
            features,
        };
        let s = serde_json::to_string(&line).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{s}").map_err(|e| Error::io("<manifest>", e))?;
    }
    Ok(())
}

/// Per-label and per-language record counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassDistribution {
    pub by_label: [usize; NUM_CLASSES],
    pub by_language: [usize; 3],
}

impl ClassDistribution {
    pub fn total(&self) -> usize {
        self.by_label.iter().sum()
    }
}

pub fn class_distribution(d: &Dataset) -> ClassDistribution {
    let mut dist = ClassDistribution::default();
    for r in &d.records {
        dist.by_label[r.label.index()] += 1;
        dist.by_language[r.language.index()] += 1;
    }
    dist
}

/// Splits `n` items into integer parts proportional to `ratios` by the
/// largest-remainder method. Ties go to the earlier part.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n.saturating_sub(parts.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Stratified three-way split by class label.
///
/// Each class is shuffled with a generator seeded by `seed` and cut into
/// largest-remainder counts; records keep their original relative order
/// inside each split.
pub fn split_dataset(d: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if d.split != SplitTag::Unsplit {
        return Err(Error::InvalidArgument("dataset is already split".into()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; d.len()];
    for label in Label::ALL {
        let mut members: Vec<usize> = d
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::Data(format!("class {label} has no records")));
        }
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &ratios);
        let mut it = members.into_iter();
        for (part, &count) in counts.iter().enumerate() {
            for idx in it.by_ref().take(count) {
                assignment[idx] = part;
            }
        }
    }
    let pick = |part: usize, tag: SplitTag| Dataset {
        records: d
            .records
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == part)
            .map(|(r, _)| r.clone())
            .collect(),
        split: tag,
    };
    Ok((
        pick(0, SplitTag::Train),
        pick(1, SplitTag::Val),
        pick(2, SplitTag::Test),
    ))
}
