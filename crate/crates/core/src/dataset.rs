//! VQA dataset ingestion.
//!
//! Every source schema is normalized into [`VqaSample`] records with exactly
//! ten ground-truth answers and a modal `canonical_answer`. The canonical
//! answer is what a demonstration displays as its answer and what SQA keys
//! are built from.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of ground-truth answers every sample carries after loading.
pub const NUM_GT_ANSWERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    YesNo,
    Number,
    Other,
    Unknown,
}

impl AnswerType {
    /// Maps the `answer_type` strings used by VQAv2 / VizWiz.
    pub fn from_source(raw: &str) -> Self {
        match raw.trim().to_ascii_lowercase().as_str() {
            "yes/no" | "yes_no" => AnswerType::YesNo,
            "number" => AnswerType::Number,
            "other" => AnswerType::Other,
            _ => AnswerType::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagCategory {
    Object,
    Attribute,
    Relation,
    Class,
    Interrogative,
}

impl TagCategory {
    pub const ALL: [TagCategory; 5] = [
        TagCategory::Object,
        TagCategory::Attribute,
        TagCategory::Relation,
        TagCategory::Class,
        TagCategory::Interrogative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TagCategory::Object => "object",
            TagCategory::Attribute => "attribute",
            TagCategory::Relation => "relation",
            TagCategory::Class => "class",
            TagCategory::Interrogative => "interrogative",
        }
    }
}

/// Discrete tags of one image or question, grouped by category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet(pub BTreeMap<TagCategory, BTreeSet<String>>);

impl TagSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, category: TagCategory, tag: impl Into<String>) {
        self.0.entry(category).or_default().insert(tag.into());
    }

    pub fn with(mut self, category: TagCategory, tags: &[&str]) -> Self {
        for t in tags {
            self.insert(category, *t);
        }
        self
    }

    pub fn get(&self, category: TagCategory) -> Option<&BTreeSet<String>> {
        self.0.get(&category)
    }

    pub fn has_category(&self, category: TagCategory) -> bool {
        self.0.contains_key(&category)
    }

    /// Restricts the set to the given categories.
    pub fn restrict(&self, categories: &[TagCategory]) -> TagSet {
        TagSet(
            self.0
                .iter()
                .filter(|(c, _)| categories.contains(c))
                .map(|(c, t)| (*c, t.clone()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All (category, tag) pairs, ordered by category then tag.
    pub fn pairs(&self) -> impl Iterator<Item = (TagCategory, &str)> {
        self.0
            .iter()
            .flat_map(|(c, tags)| tags.iter().map(move |t| (*c, t.as_str())))
    }
}

/// Tags attached to a sample: one set for the image, one for the question.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<TagSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<TagSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaSample {
    pub sample_id: u64,
    pub image_ref: String,
    pub question: String,
    pub gt_answers: Vec<String>,
    pub canonical_answer: String,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<SampleTags>,
}

impl VqaSample {
    /// Builds a sample, padding `answers` to ten by repetition and
    /// selecting the modal answer.
    pub fn new(
        sample_id: u64,
        image_ref: impl Into<String>,
        question: impl Into<String>,
        answers: Vec<String>,
        answer_type: AnswerType,
    ) -> Result<Self, String> {
        let gt_answers = pad_answers(answers)?;
        let canonical_answer = modal_answer(&gt_answers);
        Ok(Self {
            sample_id,
            image_ref: image_ref.into(),
            question: question.into(),
            gt_answers,
            canonical_answer,
            answer_type,
            tags: None,
        })
    }

    pub fn image_tags(&self) -> Option<&TagSet> {
        self.tags.as_ref().and_then(|t| t.image.as_ref())
    }

    pub fn question_tags(&self) -> Option<&TagSet> {
        self.tags.as_ref().and_then(|t| t.question.as_ref())
    }

    fn check(&self) -> Result<(), String> {
        if self.gt_answers.len() != NUM_GT_ANSWERS {
            return Err(format!(
                "expected {NUM_GT_ANSWERS} gt_answers, found {}",
                self.gt_answers.len()
            ));
        }
        if self.canonical_answer != modal_answer(&self.gt_answers) {
            return Err("canonical_answer is not the modal gt answer".into());
        }
        Ok(())
    }
}

fn pad_answers(answers: Vec<String>) -> Result<Vec<String>, String> {
    if answers.is_empty() {
        return Err("record has no answers".into());
    }
    if answers.len() > NUM_GT_ANSWERS {
        return Err(format!(
            "record has {} answers, at most {NUM_GT_ANSWERS} supported",
            answers.len()
        ));
    }
    Ok(answers.iter().cycle().take(NUM_GT_ANSWERS).cloned().collect())
}

/// Most frequent answer; ties go to the lexicographically smallest string.
pub fn modal_answer(answers: &[String]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    // BTreeMap iterates in lexicographic order, so strict `>` keeps the
    // smallest string among equally frequent ones.
    for (a, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.to_string()).unwrap_or_default()
}

/// Canonical answer form used for matching and copy detection.
///
/// Lowercases, strips punctuation (a `.` survives only between two digits),
/// drops the articles "a", "an" and "the", and collapses whitespace.
pub fn normalize_answer(raw: &str) -> String {
    let lower: Vec<char> = raw.to_lowercase().chars().collect();
    let mut stripped = String::with_capacity(lower.len());
    for (i, &c) in lower.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            stripped.push(c);
        } else if c == '.' {
            let prev_digit = i > 0 && lower[i - 1].is_ascii_digit();
            let next_digit = lower.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if prev_digit && next_digit {
                stripped.push(c);
            }
        }
    }
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Vqav2,
    Vizwiz,
    Okvqa,
    Synthetic,
}

/// File locations for one dataset split.
///
/// VQAv2 and OK-VQA use `questions` + `annotations`; VizWiz uses
/// `annotations` only; synthetic uses `samples` (the canonical JSONL dump).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
    /// Pattern producing an image ref from a COCO image id, e.g.
    /// `train2014/COCO_train2014_{image_id:012}.jpg`. Defaults to the bare id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_template: Option<String>,
}

impl DatasetPaths {
    pub fn files(&self) -> Vec<&Path> {
        [&self.questions, &self.annotations, &self.samples]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect()
    }
}

/// An immutable, id-addressable collection of samples.
#[derive(Debug, Clone)]
pub struct SupportSet {
    samples: Vec<VqaSample>,
    kind: DatasetKind,
    by_id: HashMap<u64, usize>,
}

impl SupportSet {
    pub fn new(kind: DatasetKind, samples: Vec<VqaSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut by_id = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if by_id.insert(s.sample_id, i).is_some() {
                return Err(Error::DuplicateId(s.sample_id));
            }
        }
        Ok(Self {
            samples,
            kind,
            by_id,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn samples(&self) -> &[VqaSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&VqaSample> {
        self.by_id.get(&id).map(|&i| &self.samples[i])
    }

    pub fn sample(&self, id: u64) -> Result<&VqaSample> {
        self.get(id).ok_or(Error::UnknownId(id))
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.sample_id)
    }

    /// Keeps samples matching `keep`; errors if nothing survives.
    pub fn filter(&self, keep: impl Fn(&VqaSample) -> bool) -> Result<SupportSet> {
        SupportSet::new(
            self.kind,
            self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        )
    }

    pub fn map_samples(&self, f: impl Fn(&VqaSample) -> Result<VqaSample>) -> Result<SupportSet> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        SupportSet::new(self.kind, samples)
    }

    pub fn into_samples(self) -> Vec<VqaSample> {
        self.samples
    }

    /// Attaches tags from a tag file; `image_side` selects image vs question
    /// tags. Unknown ids are rejected.
    pub fn attach_tags(&mut self, records: &[TagRecord], image_side: bool) -> Result<()> {
        for r in records {
            let idx = *self.by_id.get(&r.sample_id).ok_or(Error::UnknownId(r.sample_id))?;
            let tags = self.samples[idx].tags.get_or_insert_with(SampleTags::default);
            let set = if image_side {
                tags.image.get_or_insert_with(TagSet::default)
            } else {
                tags.question.get_or_insert_with(TagSet::default)
            };
            let entry = set.0.entry(r.category).or_default();
            entry.extend(r.tags.iter().cloned());
        }
        Ok(())
    }

    /// Writes the canonical newline-delimited JSON dump.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            let line = serde_json::to_string(s).expect("sample serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One line of a tag file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRecord {
    pub sample_id: u64,
    pub category: TagCategory,
    pub tags: Vec<String>,
}

pub fn read_tag_file(path: &Path) -> Result<Vec<TagRecord>> {
    read_jsonl(path)
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}", lineno + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::parse(path, "document", e))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str, kind: DatasetKind) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| {
        Error::Config(format!("{kind:?} dataset requires a `{what}` path"))
    })
}

pub fn load_vqa_dataset(paths: &DatasetPaths, kind: DatasetKind) -> Result<SupportSet> {
    let samples = match kind {
        DatasetKind::Vqav2 | DatasetKind::Okvqa => load_coco_style(paths, kind)?,
        DatasetKind::Vizwiz => load_vizwiz(require(&paths.annotations, "annotations", kind)?)?,
        DatasetKind::Synthetic => load_canonical(require(&paths.samples, "samples", kind)?)?,
    };
    SupportSet::new(kind, samples)
}

#[derive(Deserialize)]
struct CocoQuestion {
    question_id: u64,
    image_id: u64,
    question: String,
}

#[derive(Deserialize)]
struct CocoAnswer {
    answer: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    question_id: u64,
    answers: Vec<CocoAnswer>,
    #[serde(default)]
    answer_type: Option<String>,
}

#[derive(Deserialize)]
struct RecordList {
    #[serde(default)]
    questions: Vec<serde_json::Value>,
    #[serde(default)]
    annotations: Vec<serde_json::Value>,
}

fn record_name(v: &serde_json::Value, index: usize) -> String {
    match v.get("question_id") {
        Some(id) => format!("record {index} (question_id {id})"),
        None => format!("record {index}"),
    }
}

fn typed_records<T: DeserializeOwned>(
    path: &Path,
    values: Vec<serde_json::Value>,
) -> Result<Vec<T>> {
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let name = record_name(&v, i);
            serde_json::from_value(v).map_err(|e| Error::parse(path, name, e))
        })
        .collect()
}

pub fn format_image_ref(template: Option<&str>, image_id: u64) -> String {
    match template {
        None => image_id.to_string(),
        Some(t) => t
            .replace("{image_id:012}", &format!("{image_id:012}"))
            .replace("{image_id}", &image_id.to_string()),
    }
}

fn load_coco_style(paths: &DatasetPaths, kind: DatasetKind) -> Result<Vec<VqaSample>> {
    let qpath = require(&paths.questions, "questions", kind)?;
    let apath = require(&paths.annotations, "annotations", kind)?;
    let questions: Vec<CocoQuestion> = typed_records(qpath, read_json::<RecordList>(qpath)?.questions)?;
    let annotations: Vec<CocoAnnotation> =
        typed_records(apath, read_json::<RecordList>(apath)?.annotations)?;

    let mut by_qid: HashMap<u64, CocoAnnotation> = HashMap::with_capacity(annotations.len());
    for a in annotations {
        let qid = a.question_id;
        if by_qid.insert(qid, a).is_some() {
            return Err(Error::parse(apath, format!("question_id {qid}"), "duplicate annotation"));
        }
    }

    let mut samples = Vec::with_capacity(questions.len());
    for (i, q) in questions.into_iter().enumerate() {
        let ann = by_qid.remove(&q.question_id).ok_or_else(|| {
            Error::parse(
                apath,
                format!("record {i} (question_id {})", q.question_id),
                "no annotation for question",
            )
        })?;
        let answers = ann.answers.into_iter().map(|a| a.answer).collect();
        let answer_type = ann
            .answer_type
            .as_deref()
            .map(AnswerType::from_source)
            .unwrap_or(AnswerType::Unknown);
        let image_ref = format_image_ref(paths.image_template.as_deref(), q.image_id);
        let sample = VqaSample::new(q.question_id, image_ref, q.question, answers, answer_type)
            .map_err(|m| Error::parse(apath, format!("question_id {}", q.question_id), m))?;
        samples.push(sample);
    }
    Ok(samples)
}

#[derive(Deserialize)]
struct VizwizRecord {
    #[serde(default)]
    image: Option<String>,
    question: String,
    answers: Vec<CocoAnswer>,
    #[serde(default)]
    answer_type: Option<String>,
}

fn load_vizwiz(path: &Path) -> Result<Vec<VqaSample>> {
    let values: Vec<serde_json::Value> = read_json(path)?;
    let records: Vec<VizwizRecord> = typed_records(path, values)?;
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let image_ref = match r.image {
            Some(img) if !img.is_empty() => img,
            _ => {
                log::warn!("{}: record {i} has no image reference", path.display());
                String::new()
            }
        };
        let answers = r.answers.into_iter().map(|a| a.answer).collect();
        let answer_type = r
            .answer_type
            .as_deref()
            .map(AnswerType::from_source)
            .unwrap_or(AnswerType::Unknown);
        let sample = VqaSample::new(i as u64, image_ref, r.question, answers, answer_type)
            .map_err(|m| Error::parse(path, format!("record {i}"), m))?;
        samples.push(sample);
    }
    Ok(samples)
}

fn load_canonical(path: &Path) -> Result<Vec<VqaSample>> {
    let samples: Vec<VqaSample> = read_jsonl(path)?;
    for s in &samples {
        s.check()
            .map_err(|m| Error::parse(path, format!("sample_id {}", s.sample_id), m))?;
        if s.image_ref.is_empty() {
            log::warn!("{}: sample {} has no image reference", path.display(), s.sample_id);
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("The Dog."), "dog");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer(" 2 "), "2");
        assert_eq!(normalize_answer("3.5 meters"), "3.5 meters");
        assert_eq!(normalize_answer("yes!"), "yes");
        assert_eq!(normalize_answer("an  apple  tree"), "apple tree");
    }

    #[test]
    fn modal_answer_breaks_ties_lexicographically() {
        let a = strings(&["no", "yes", "no", "yes", "maybe"]);
        assert_eq!(modal_answer(&a), "no");
        let b = strings(&["2", "3", "3"]);
        assert_eq!(modal_answer(&b), "3");
    }

    #[test]
    fn okvqa_style_five_answers_pad_to_ten() {
        let s = VqaSample::new(
            1,
            "img",
            "q?",
            strings(&["a", "b", "c", "d", "e"]),
            AnswerType::Unknown,
        )
        .unwrap();
        assert_eq!(s.gt_answers.len(), 10);
        assert_eq!(&s.gt_answers[5..], &s.gt_answers[..5]);
        assert_eq!(s.canonical_answer, "a");
    }

    #[test]
    fn empty_synthetic_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        let paths = DatasetPaths {
            samples: Some(p),
            ..Default::default()
        };
        let err = load_vqa_dataset(&paths, DatasetKind::Synthetic).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn image_template_formats_coco_names() {
        assert_eq!(
            format_image_ref(Some("COCO_train2014_{image_id:012}.jpg"), 42),
            "COCO_train2014_000000000042.jpg"
        );
        assert_eq!(format_image_ref(None, 42), "42");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn normalize_is_idempotent_ascii(s in "[ a-zA-Z0-9.,!?'-]{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn modal_answer_is_permutation_invariant(
            answers in proptest::collection::vec("[abc]{1,2}", 10),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = answers.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(modal_answer(&answers), modal_answer(&shuffled));
        }
    }
}
