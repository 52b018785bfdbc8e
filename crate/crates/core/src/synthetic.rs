//! Deterministic synthetic VQA data for desk-scale experiments.
//!
//! Each sample describes a small scene (object, colour, count, relation)
//! with one templated question. Embeddings come from [`HashingEmbedder`]:
//! question and question+answer keys embed the exact text the retrieval
//! code would embed, images embed a textual scene description.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::dataset::{AnswerType, DatasetKind, SupportSet, TagCategory, TagRecord, VqaSample};
use crate::embed_index::{qa_key_text, EmbeddingTable, HashingEmbedder, Modality, SimilarityIndex};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::strategies::Corpus;

const OBJECTS: &[(&str, &str)] = &[
    ("dog", "animal"),
    ("cat", "animal"),
    ("horse", "animal"),
    ("bird", "animal"),
    ("bus", "vehicle"),
    ("car", "vehicle"),
    ("bicycle", "vehicle"),
    ("train", "vehicle"),
    ("pizza", "food"),
    ("banana", "food"),
    ("cake", "food"),
    ("apple", "food"),
];
const COLORS: &[&str] = &["red", "white", "black", "brown", "green", "yellow", "blue"];
const RELATIONS: &[&str] = &["on grass", "near water", "on table", "in street", "under tree"];
const NUMBERS: &[&str] = &["one", "two", "three", "four", "five"];

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 50,
            seed: 7,
            dim: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub support: SupportSet,
    pub image: EmbeddingTable,
    pub question: EmbeddingTable,
    pub qa: EmbeddingTable,
    pub image_tags: Vec<TagRecord>,
    pub question_tags: Vec<TagRecord>,
    pub dim: usize,
}

/// File names used by [`SyntheticData::write`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub samples: PathBuf,
    pub image_emb: PathBuf,
    pub question_emb: PathBuf,
    pub qa_emb: PathBuf,
    pub image_tags: PathBuf,
    pub question_tags: PathBuf,
}

impl SyntheticFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            samples: dir.join("samples.jsonl"),
            image_emb: dir.join("image.emb"),
            question_emb: dir.join("question.emb"),
            qa_emb: dir.join("question_answer.emb"),
            image_tags: dir.join("image_tags.jsonl"),
            question_tags: dir.join("question_tags.jsonl"),
        }
    }
}

fn plural(obj: &str) -> String {
    match obj {
        "bus" => "buses".into(),
        o => format!("{o}s"),
    }
}

fn tag(id: u64, category: TagCategory, tags: &[&str]) -> TagRecord {
    TagRecord {
        sample_id: id,
        category,
        tags: tags.iter().map(|t| t.to_string()).collect(),
    }
}

/// Generates `spec.n` samples with ids `1..=n`.
pub fn generate(spec: SyntheticSpec) -> Result<SyntheticData> {
    if spec.n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded(spec.seed);
    let embedder = HashingEmbedder::new(spec.dim);
    let mut samples = Vec::with_capacity(spec.n);
    let (mut img_rows, mut q_rows, mut qa_rows) = (Vec::new(), Vec::new(), Vec::new());
    let (mut image_tags, mut question_tags) = (Vec::new(), Vec::new());

    for i in 0..spec.n {
        let id = i as u64 + 1;
        let &(obj, class) = OBJECTS.choose(&mut rng).expect("non-empty");
        let color = *COLORS.choose(&mut rng).expect("non-empty");
        let relation = *RELATIONS.choose(&mut rng).expect("non-empty");
        let count = rng.random_range(0..NUMBERS.len());
        let number = NUMBERS[count];
        let other_color = loop {
            let c = *COLORS.choose(&mut rng).expect("non-empty");
            if c != color {
                break c;
            }
        };

        let (question, answer, answer_type, interrogative, attribute) = match rng.random_range(0..3) {
            0 => (
                format!("What color is the {obj}?"),
                color.to_string(),
                AnswerType::Other,
                "what color",
                color,
            ),
            1 => (
                format!("How many {} are there?", plural(obj)),
                (count + 1).to_string(),
                AnswerType::Number,
                "how many",
                number,
            ),
            _ => {
                let asked = if rng.random_bool(0.5) { color } else { other_color };
                let yes = asked == color;
                (
                    format!("Is the {obj} {asked}?"),
                    if yes { "yes" } else { "no" }.to_string(),
                    AnswerType::YesNo,
                    "is",
                    asked,
                )
            }
        };
        // Eight annotators agree; two give a plausible alternative.
        let alt = match answer_type {
            AnswerType::YesNo => if answer == "yes" { "no" } else { "yes" }.to_string(),
            AnswerType::Number => ((count + 1) % NUMBERS.len() + 1).to_string(),
            _ => other_color.to_string(),
        };
        let mut answers = vec![answer.clone(); 8];
        answers.extend([alt.clone(), alt]);

        let image_ref = format!("synthetic/img_{id:04}.png");
        let sample = VqaSample::new(id, image_ref, question.clone(), answers, answer_type)
            .map_err(|m| Error::Config(format!("synthetic sample {id}: {m}")))?;

        let scene = format!("scene {number} {color} {obj} {class} {relation}");
        img_rows.push((id, embedder.embed_one(&scene)));
        q_rows.push((id, embedder.embed_one(&question)));
        qa_rows.push((id, embedder.embed_one(&qa_key_text(&question, &sample.canonical_answer))));

        let (rel_word, rel_obj) = relation.split_once(' ').expect("two-word relation");
        image_tags.push(tag(id, TagCategory::Object, &[obj, rel_obj]));
        image_tags.push(tag(id, TagCategory::Attribute, &[color, number]));
        image_tags.push(tag(id, TagCategory::Relation, &[rel_word]));
        image_tags.push(tag(id, TagCategory::Class, &[class]));
        question_tags.push(tag(id, TagCategory::Object, &[obj]));
        question_tags.push(tag(id, TagCategory::Attribute, &[attribute]));
        question_tags.push(tag(id, TagCategory::Relation, &[rel_word]));
        question_tags.push(tag(id, TagCategory::Interrogative, &[interrogative]));
        samples.push(sample);
    }

    let mut support = SupportSet::new(DatasetKind::Synthetic, samples)?;
    support.attach_tags(&image_tags, true)?;
    support.attach_tags(&question_tags, false)?;
    Ok(SyntheticData {
        support,
        image: EmbeddingTable::from_rows(Modality::Image, spec.dim, img_rows)?,
        question: EmbeddingTable::from_rows(Modality::Question, spec.dim, q_rows)?,
        qa: EmbeddingTable::from_rows(Modality::QuestionAnswer, spec.dim, qa_rows)?,
        image_tags,
        question_tags,
        dim: spec.dim,
    })
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl SyntheticData {
    /// Writes samples (without inline tags), embeddings and tag files.
    pub fn write(&self, dir: &Path) -> Result<SyntheticFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SyntheticFiles::in_dir(dir);
        let bare = self.support.map_samples(|s| {
            let mut s = s.clone();
            s.tags = None;
            Ok(s)
        })?;
        bare.write_jsonl(&files.samples)?;
        self.image.write(&files.image_emb)?;
        self.question.write(&files.question_emb)?;
        self.qa.write(&files.qa_emb)?;
        write_jsonl(&files.image_tags, &self.image_tags)?;
        write_jsonl(&files.question_tags, &self.question_tags)?;
        Ok(files)
    }

    /// Corpus with all three embedding indexes and both tag indexes.
    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::new(self.support.clone())
            .with_index(SimilarityIndex::build(self.image.clone())?)?
            .with_index(SimilarityIndex::build(self.question.clone())?)?
            .with_index(SimilarityIndex::build(self.qa.clone())?)
    }
}

/// Experiment file for the RS/SI/SQ desk grid over files written by
/// [`SyntheticData::write`] into the same directory.
pub const DESK_EXPERIMENT: &str = r#"# RS / SI / SQ over the synthetic set, answered by the lookup oracle.
seed = 2024
shots = [4, 8, 16]
workers = 2
output_dir = "runs/desk"

[support]
kind = "synthetic"
samples = "samples.jsonl"
image_tags = "image_tags.jsonl"
question_tags = "question_tags.jsonl"

[support.embeddings]
image = "image.emb"
question = "question.emb"
question_answer = "question_answer.emb"

[oracle]
kind = "mock_lookup"

[[arms]]
strategy = { kind = "RS" }

[[arms]]
strategy = { kind = "SI" }

[[arms]]
strategy = { kind = "SQ" }
"#;
