//! Data schema, JSONL ingestion, attribute vocabularies, and synthetic
//! corpus generation.
//!
//! One JSONL object per line:
//! `{"id", "title", "description", "summary", "regions": [{"feature",
//! "box", "class_dist"}], "attributes": [str]}`. Region areas are not
//! stored in the file; they are recomputed from the box on ingestion.

mod synth;

pub use synth::{generate_synthetic_dataset, SynthSpec};

use crate::tokenizer::words;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema error: {msg}")]
    Schema { line: usize, msg: String },
    #[error("line {line}: validation error: {msg}")]
    Validation { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
}

/// One detector region: RoI feature, normalized box, area, class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDescriptor {
    pub feature: Vec<f64>,
    /// `[x1, y1, x2, y2]`, corner coordinates normalized to `[0, 1]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Recomputed as `(x2-x1)*(y2-y1)`; never trusted from input.
    #[serde(skip)]
    pub area: f64,
    pub class_dist: Vec<f64>,
}

impl RegionDescriptor {
    pub fn zero(d_img: usize, k_cls: usize) -> Self {
        Self {
            feature: vec![0.0; d_img],
            bbox: [0.0; 4],
            area: 0.0,
            class_dist: vec![0.0; k_cls],
        }
    }

    pub fn recompute_area(&mut self) {
        self.area = (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1]);
    }

    fn validate(&self) -> Result<(), String> {
        let [x1, y1, x2, y2] = self.bbox;
        for (name, v) in [("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("box coordinate {name}={v} outside [0,1]"));
            }
        }
        if x1 > x2 || y1 > y2 {
            return Err(format!("degenerate box [{x1},{y1},{x2},{y2}]"));
        }
        let expected = (x2 - x1) * (y2 - y1);
        if (self.area - expected).abs() > 1e-6 {
            return Err(format!("area {} != box area {}", self.area, expected));
        }
        if self.class_dist.iter().any(|&p| p < 0.0) {
            return Err("class_dist has a negative entry".into());
        }
        let total: f64 = self.class_dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(format!("class_dist sums to {total}, not a simplex"));
        }
        Ok(())
    }
}

/// Fixed-capacity set of regions; slots `valid_count..capacity` are
/// zero-padded and flagged invalid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub regions: Vec<RegionDescriptor>,
    pub valid_count: usize,
}

impl RegionSet {
    /// Keep the first `capacity` regions in input order, then zero-pad.
    pub fn new(
        mut regions: Vec<RegionDescriptor>,
        capacity: usize,
        d_img: usize,
        k_cls: usize,
    ) -> Self {
        regions.truncate(capacity);
        let valid_count = regions.len();
        while regions.len() < capacity {
            regions.push(RegionDescriptor::zero(d_img, k_cls));
        }
        Self {
            regions,
            valid_count,
        }
    }

    pub fn capacity(&self) -> usize {
        self.regions.len()
    }

    pub fn valid(&self) -> &[RegionDescriptor] {
        &self.regions[..self.valid_count]
    }

    pub fn is_valid_slot(&self, i: usize) -> bool {
        i < self.valid_count
    }

    /// Re-pad (or truncate) to a different capacity.
    pub fn resize_capacity(&self, capacity: usize, d_img: usize, k_cls: usize) -> Self {
        Self::new(self.valid().to_vec(), capacity, d_img, k_cls)
    }
}

/// One product: text fields, region set, attribute multi-hot, reference
/// summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub id: String,
    pub title: String,
    pub description: String,
    pub summary: String,
    pub region_set: RegionSet,
    /// Multi-hot over the active attribute vocabulary; entries are 0 or 1.
    pub attributes: Vec<f64>,
}

/// Part-of-speech classes distinguished by the vocabulary builder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Adjective,
    Other,
}

/// Default tagger: classifies every token as a noun, so every token is a
/// vocabulary candidate. Desk-scale corpora are synthetic; a real tagger
/// can be injected where one exists.
pub fn accept_all_tagger(_token: &str) -> PosTag {
    PosTag::Noun
}

/// Ordered attribute vocabulary with a document-frequency cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    entries: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub threshold: usize,
}

impl AttributeVocabulary {
    pub fn from_entries(entries: Vec<String>, threshold: usize) -> Result<Self, DataError> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.chars().count() < 2 {
                return Err(DataError::Config(format!(
                    "attribute entry {e:?} shorter than 2 characters"
                )));
            }
            if index.insert(e.clone(), i).is_some() {
                return Err(DataError::Config(format!("duplicate attribute entry {e:?}")));
            }
        }
        Ok(Self {
            entries,
            index,
            threshold,
        })
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn position(&self, attr: &str) -> Option<usize> {
        self.index.get(attr).copied()
    }

    /// One entry per line, order significant.
    pub fn save_file(&self, path: &Path) -> Result<(), DataError> {
        let mut out = std::fs::File::create(path)?;
        for e in &self.entries {
            writeln!(out, "{e}")?;
        }
        Ok(())
    }

    /// Load from the one-entry-per-line format. The threshold is not part
    /// of the file format and is recorded as zero.
    pub fn load_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let entries: Vec<String> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.to_string())
            .collect();
        Self::from_entries(entries, 0)
    }
}

/// Document-frequency thresholds used by the three product categories of
/// the original corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductCategory {
    HomeAppliances,
    Clothing,
    CasesAndBags,
}

pub fn category_threshold(category: ProductCategory) -> usize {
    match category {
        ProductCategory::HomeAppliances => 5_000,
        ProductCategory::Clothing => 10_000,
        ProductCategory::CasesAndBags => 1_000,
    }
}

/// Build an attribute vocabulary from reference summaries.
///
/// Keeps tokens of at least two characters that the tagger classifies as
/// nouns or adjectives and that appear in strictly more than `threshold`
/// distinct summaries. Entries are ordered by descending document
/// frequency, ties broken lexicographically.
pub fn build_attribute_vocab<F>(
    summaries: &[String],
    tagger: F,
    threshold: usize,
) -> AttributeVocabulary
where
    F: Fn(&str) -> PosTag,
{
    let mut doc_freq: HashMap<&str, usize> = HashMap::new();
    for summary in summaries {
        let mut seen: HashSet<&str> = HashSet::new();
        for w in words(summary) {
            if seen.insert(w) {
                *doc_freq.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut keep: Vec<(&str, usize)> = doc_freq
        .into_iter()
        .filter(|(w, df)| {
            *df > threshold
                && w.chars().count() >= 2
                && matches!(tagger(w), PosTag::Noun | PosTag::Adjective)
        })
        .collect();
    keep.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let entries = keep.into_iter().map(|(w, _)| w.to_string()).collect();
    AttributeVocabulary::from_entries(entries, threshold)
        .expect("vocabulary built from filtered tokens is always well-formed")
}

/// Multi-hot encoding of a set of attribute strings. Unknown attributes
/// are dropped; the second return value counts the distinct dropped ones.
pub fn attributes_to_multihot(
    tokens: &[String],
    vocab: &AttributeVocabulary,
) -> (Vec<f64>, usize) {
    let mut vector = vec![0.0; vocab.len()];
    let mut dropped = 0;
    let mut seen: HashSet<&str> = HashSet::new();
    for t in tokens {
        if !seen.insert(t.as_str()) {
            continue;
        }
        match vocab.position(t) {
            Some(i) => vector[i] = 1.0,
            None => dropped += 1,
        }
    }
    (vector, dropped)
}

/// Length limits applied at ingestion time.
#[derive(Debug, Clone, Copy)]
pub struct Limits {
    /// Maximum combined token count of title + description.
    pub l_max: usize,
    /// Region capacity per record.
    pub m_max: usize,
}

#[derive(Deserialize)]
struct RawRegion {
    feature: Vec<f64>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_dist: Vec<f64>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    title: String,
    description: String,
    summary: String,
    regions: Vec<RawRegion>,
    attributes: Vec<String>,
}

#[derive(Serialize)]
struct RawRegionOut<'a> {
    feature: &'a [f64],
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_dist: &'a [f64],
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    id: &'a str,
    title: &'a str,
    description: &'a str,
    summary: &'a str,
    regions: Vec<RawRegionOut<'a>>,
    attributes: Vec<&'a str>,
}

/// Truncate so that `tokens(title) + tokens(description) <= l_max`.
/// Untouched strings are returned as-is when already within the limit.
fn truncate_texts(title: &str, description: &str, l_max: usize) -> (String, String) {
    let tw = words(title);
    let dw = words(description);
    if tw.len() + dw.len() <= l_max {
        return (title.to_string(), description.to_string());
    }
    if tw.len() >= l_max {
        return (tw[..l_max].join(" "), String::new());
    }
    let keep = l_max - tw.len();
    (title.to_string(), dw[..keep].join(" "))
}

/// Load CEPSUM-style JSONL. Records are validated, text truncated to
/// `limits.l_max` tokens, region sets padded or truncated to
/// `limits.m_max`, and areas recomputed from boxes.
pub fn load_jsonl(
    path: &Path,
    vocab: &AttributeVocabulary,
    limits: Limits,
) -> Result<Vec<ProductRecord>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut dims: Option<(usize, usize)> = None;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
            if e.classify() == serde_json::error::Category::Syntax {
                DataError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                }
            } else {
                DataError::Schema {
                    line: line_no,
                    msg: e.to_string(),
                }
            }
        })?;

        let mut regions = Vec::with_capacity(raw.regions.len());
        for rr in raw.regions {
            let mut region = RegionDescriptor {
                feature: rr.feature,
                bbox: rr.bbox,
                area: 0.0,
                class_dist: rr.class_dist,
            };
            region.recompute_area();
            region.validate().map_err(|msg| DataError::Validation {
                line: line_no,
                msg,
            })?;
            match dims {
                None => dims = Some((region.feature.len(), region.class_dist.len())),
                Some((d, k)) => {
                    if region.feature.len() != d || region.class_dist.len() != k {
                        return Err(DataError::Validation {
                            line: line_no,
                            msg: format!(
                                "inconsistent region dims: expected d_img={d}, K={k}"
                            ),
                        });
                    }
                }
            }
            regions.push(region);
        }
        let (d_img, k_cls) = dims.unwrap_or((0, 0));
        let region_set = RegionSet::new(regions, limits.m_max, d_img, k_cls);
        let (title, description) =
            truncate_texts(&raw.title, &raw.description, limits.l_max);
        let (attributes, _dropped) = attributes_to_multihot(&raw.attributes, vocab);
        records.push(ProductRecord {
            id: raw.id,
            title,
            description,
            summary: raw.summary,
            region_set,
            attributes,
        });
    }
    Ok(records)
}

/// Serialize records back to the JSONL schema. Attribute strings are
/// recovered from the multi-hot vector through the vocabulary.
pub fn save_jsonl(
    records: &[ProductRecord],
    vocab: &AttributeVocabulary,
    path: &Path,
) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        let attributes: Vec<&str> = rec
            .attributes
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| vocab.entries()[i].as_str())
            .collect();
        let raw = RawRecordOut {
            id: &rec.id,
            title: &rec.title,
            description: &rec.description,
            summary: &rec.summary,
            regions: rec
                .region_set
                .valid()
                .iter()
                .map(|r| RawRegionOut {
                    feature: &r.feature,
                    bbox: r.bbox,
                    class_dist: &r.class_dist,
                })
                .collect(),
            attributes,
        };
        serde_json::to_writer(&mut out, &raw).map_err(|e| DataError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region_json(d: usize, k: usize, seed: f64) -> String {
        let feature: Vec<String> = (0..d).map(|i| format!("{}", seed + i as f64)).collect();
        let dist: Vec<String> = (0..k)
            .map(|i| if i == 0 { "1.0".into() } else { "0.0".into() })
            .collect();
        format!(
            r#"{{"feature":[{}],"box":[0.1,0.2,0.5,0.6],"class_dist":[{}]}}"#,
            feature.join(","),
            dist.join(",")
        )
    }

    fn write_jsonl(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn small_vocab() -> AttributeVocabulary {
        AttributeVocabulary::from_entries(
            vec!["alpha".into(), "beta".into(), "gamma".into()],
            0,
        )
        .unwrap()
    }

    #[test]
    fn two_regions_pad_to_capacity_four() {
        let line = format!(
            r#"{{"id":"p1","title":"t","description":"d","summary":"s","regions":[{},{}],"attributes":[]}}"#,
            region_json(3, 2, 0.0).replace("[1.0,0.0]", "[1.0,0.0]"),
            region_json(3, 2, 10.0)
        );
        let f = write_jsonl(&[line]);
        let recs = load_jsonl(
            f.path(),
            &small_vocab(),
            Limits {
                l_max: 10,
                m_max: 4,
            },
        )
        .unwrap();
        let rs = &recs[0].region_set;
        assert_eq!(rs.capacity(), 4);
        assert_eq!(rs.valid_count, 2);
        for pad in &rs.regions[2..] {
            assert!(pad.feature.iter().all(|&v| v == 0.0));
            assert_eq!(pad.area, 0.0);
        }
        assert!(!rs.is_valid_slot(2));
        // area recomputed from the box
        assert!((rs.regions[0].area - 0.16).abs() < 1e-12);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = write_jsonl(&[]);
        let recs = load_jsonl(
            f.path(),
            &small_vocab(),
            Limits {
                l_max: 10,
                m_max: 4,
            },
        )
        .unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn over_capacity_keeps_first_in_input_order() {
        // oracle: manual truncation of a hand-written 50-region fixture
        let regions: Vec<String> = (0..50).map(|i| region_json(2, 2, i as f64)).collect();
        let line = format!(
            r#"{{"id":"p","title":"t","description":"d","summary":"s","regions":[{}],"attributes":[]}}"#,
            regions.join(",")
        );
        let f = write_jsonl(&[line]);
        let recs = load_jsonl(
            f.path(),
            &small_vocab(),
            Limits {
                l_max: 10,
                m_max: 36,
            },
        )
        .unwrap();
        let rs = &recs[0].region_set;
        assert_eq!(rs.valid_count, 36);
        for (i, r) in rs.valid().iter().enumerate() {
            assert_eq!(r.feature[0], i as f64); // first 36, original order
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let good = format!(
            r#"{{"id":"p","title":"t","description":"d","summary":"s","regions":[{}],"attributes":[]}}"#,
            region_json(2, 2, 0.0)
        );
        let f = write_jsonl(&[good, "{not json".into()]);
        let err = load_jsonl(
            f.path(),
            &small_vocab(),
            Limits {
                l_max: 10,
                m_max: 4,
            },
        )
        .unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_is_schema_error() {
        let f = write_jsonl(&[r#"{"id":"p","title":"t"}"#.into()]);
        let err = load_jsonl(
            f.path(),
            &small_vocab(),
            Limits {
                l_max: 10,
                m_max: 4,
            },
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Schema { line: 1, .. }));
    }

    #[test]
    fn non_simplex_class_dist_is_validation_error() {
        let line = format!(
            r#"{{"id":"p","title":"t","description":"d","summary":"s","regions":[{}],"attributes":[]}}"#,
            r#"{"feature":[1.0],"box":[0.0,0.0,1.0,1.0],"class_dist":[0.7,0.7]}"#
        );
        let f = write_jsonl(&[line]);
        let err = load_jsonl(
            f.path(),
            &small_vocab(),
            Limits {
                l_max: 10,
                m_max: 4,
            },
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Validation { line: 1, .. }));
    }

    #[test]
    fn text_truncated_to_l_tokens() {
        let line = format!(
            r#"{{"id":"p","title":"a b","description":"c d e f g","summary":"s","regions":[{}],"attributes":[]}}"#,
            region_json(2, 2, 0.0)
        );
        let f = write_jsonl(&[line]);
        let recs = load_jsonl(
            f.path(),
            &small_vocab(),
            Limits {
                l_max: 4,
                m_max: 2,
            },
        )
        .unwrap();
        assert_eq!(recs[0].title, "a b");
        assert_eq!(recs[0].description, "c d");
    }

    #[test]
    fn round_trip_reparses_to_equal_records() {
        let vocab = small_vocab();
        let line = format!(
            r#"{{"id":"p","title":"t x","description":"d y z","summary":"s","regions":[{},{}],"attributes":["gamma","alpha","zzz"]}}"#,
            region_json(3, 2, 1.0),
            region_json(3, 2, 4.0)
        );
        let f = write_jsonl(&[line]);
        let limits = Limits {
            l_max: 10,
            m_max: 4,
        };
        let recs = load_jsonl(f.path(), &vocab, limits).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(&recs, &vocab, out.path()).unwrap();
        let again = load_jsonl(out.path(), &vocab, limits).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn vocab_document_frequency_threshold_is_strict() {
        // oracle: brute-force document-frequency count
        let summaries: Vec<String> = vec![
            "waterproof zip".into(),
            "waterproof".into(),
            "waterproof liner".into(),
            "zip liner".into(),
            "plain".into(),
        ];
        let v = build_attribute_vocab(&summaries, accept_all_tagger, 2);
        assert_eq!(v.entries(), ["waterproof"]); // df 3 > 2; zip df 2 is out
    }

    #[test]
    fn vocab_empty_input_is_empty_not_error() {
        let v = build_attribute_vocab(&[], accept_all_tagger, 1);
        assert!(v.is_empty());
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let summaries: Vec<String> = vec![
            "bb aa".into(),
            "bb aa".into(),
            "bb cc".into(),
        ];
        let v = build_attribute_vocab(&summaries, accept_all_tagger, 0);
        assert_eq!(v.entries(), ["bb", "aa", "cc"]);
    }

    #[test]
    fn vocab_filters_short_tokens_and_tagger_rejects() {
        let summaries: Vec<String> = vec!["a verb noun".into(), "a verb noun".into()];
        let tagger = |w: &str| {
            if w == "verb" {
                PosTag::Other
            } else {
                PosTag::Noun
            }
        };
        let v = build_attribute_vocab(&summaries, tagger, 0);
        assert_eq!(v.entries(), ["noun"]); // "a" too short, "verb" rejected
    }

    #[test]
    fn vocab_is_permutation_invariant() {
        let mut summaries: Vec<String> = vec![
            "red shirt".into(),
            "blue shirt".into(),
            "red bag".into(),
            "green shirt red".into(),
        ];
        let v1 = build_attribute_vocab(&summaries, accept_all_tagger, 0);
        summaries.reverse();
        let v2 = build_attribute_vocab(&summaries, accept_all_tagger, 0);
        assert_eq!(v1.entries(), v2.entries());
    }

    #[test]
    fn category_thresholds_match_reference_values() {
        assert_eq!(category_threshold(ProductCategory::HomeAppliances), 5_000);
        assert_eq!(category_threshold(ProductCategory::Clothing), 10_000);
        assert_eq!(category_threshold(ProductCategory::CasesAndBags), 1_000);
    }

    #[test]
    fn multihot_empty_set_is_all_zeros() {
        let (v, dropped) = attributes_to_multihot(&[], &small_vocab());
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn multihot_positions_match_vocabulary() {
        // oracle: positional lookup; vocab order [alpha, beta, gamma]
        let (v, dropped) =
            attributes_to_multihot(&["gamma".into(), "alpha".into()], &small_vocab());
        assert_eq!(v, vec![1.0, 0.0, 1.0]);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn multihot_unknown_token_dropped_and_counted() {
        let (v, dropped) = attributes_to_multihot(&["unknown".into()], &small_vocab());
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn attribute_vocab_file_round_trip() {
        let v = small_vocab();
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save_file(f.path()).unwrap();
        let loaded = AttributeVocabulary::load_file(f.path()).unwrap();
        assert_eq!(loaded.entries(), v.entries());
        assert_eq!(loaded.position("beta"), Some(1));
    }

    #[test]
    fn vocab_rejects_duplicates_and_short_entries() {
        assert!(AttributeVocabulary::from_entries(
            vec!["aa".into(), "aa".into()],
            0
        )
        .is_err());
        assert!(AttributeVocabulary::from_entries(vec!["x".into()], 0).is_err());
    }
}
