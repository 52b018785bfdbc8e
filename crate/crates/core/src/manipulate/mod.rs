//! In-context sequences and the transforms applied to them after retrieval.
//!
//! Every transform returns a new sequence and appends exactly one entry to
//! its manipulation log.

mod declarative;
mod noise;
mod probe;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_jsonl, AnswerType, SupportSet, VqaSample};
use crate::embed_index::{rank_cmp, Hit, Modality};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::strategies::{Corpus, DemoOrder, DemonstrationList, StrategySpec};

pub use declarative::to_declarative;
pub use noise::{blur_file, blur_image, degrade_question, default_key_tokens, gaussian_kernel, RgbBuffer};
pub use probe::{apply_mismatch_probe, build_trtl_probe, ProbeMode, ProbeSpec};

pub const INSTRUCT1: &str =
    "According to the previous question and answer pair, answer the final question.";
pub const INSTRUCT2: &str = "Consider the semantic relationship between the question and the image.";
pub const INSTRUCT3: &str = "You will be engaged in a two-phase task. Phase 1: Absorb the information from a series of image-text pairs. Phase 2: Use that context, combined with an upcoming image and your own database of knowledge, to accurately answer a subsequent question.";

/// One (image, question, answer) triplet. The `*_source` ids record which
/// sample each component came from after mismatching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub sample_id: u64,
    pub image_ref: String,
    pub image_source: u64,
    pub question: String,
    pub question_source: u64,
    pub answer: String,
    pub answer_type: AnswerType,
}

impl Demonstration {
    pub fn from_sample(s: &VqaSample) -> Self {
        Self {
            sample_id: s.sample_id,
            image_ref: s.image_ref.clone(),
            image_source: s.sample_id,
            question: s.question.clone(),
            question_source: s.sample_id,
            answer: s.canonical_answer.clone(),
            answer_type: s.answer_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub sample_id: u64,
    pub image_ref: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: StrategySpec,
    pub log: Vec<String>,
}

/// Demonstrations in prompt order, followed by the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InContextSequence {
    pub demos: Vec<Demonstration>,
    pub query: QueryItem,
    pub instruction: Option<String>,
    pub provenance: Provenance,
}

impl InContextSequence {
    pub fn shots(&self) -> usize {
        self.demos.len()
    }

    fn logged(mut self, entry: impl Into<String>) -> Self {
        self.provenance.log.push(entry.into());
        self
    }
}

/// Materializes a ranked list into a sequence, placing demos per the
/// strategy's [`DemoOrder`]. Random sampling keeps draw order.
pub fn build_sequence(
    support: &SupportSet,
    query: &VqaSample,
    list: &DemonstrationList,
) -> Result<InContextSequence> {
    let mut demos = list
        .items
        .iter()
        .map(|h| support.sample(h.sample_id).map(Demonstration::from_sample))
        .collect::<Result<Vec<_>>>()?;
    let ranked = list.spec.kind != crate::strategies::StrategyKind::Rs;
    if ranked && list.spec.order == DemoOrder::Ascending {
        demos.reverse();
    }
    Ok(InContextSequence {
        demos,
        query: QueryItem {
            sample_id: query.sample_id,
            image_ref: query.image_ref.clone(),
            question: query.question.clone(),
        },
        instruction: None,
        provenance: Provenance {
            strategy: list.spec.clone(),
            log: Vec::new(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MismatchMode {
    #[serde(rename = "MI")]
    Image,
    #[serde(rename = "MA")]
    Answer,
    #[serde(rename = "MQA")]
    QuestionAnswer,
}

impl MismatchMode {
    pub fn label(self) -> &'static str {
        match self {
            MismatchMode::Image => "MI",
            MismatchMode::Answer => "MA",
            MismatchMode::QuestionAnswer => "MQA",
        }
    }
}

/// Admissible replacement answers for MA.
///
/// Answers are grouped by `answer_type` when the dataset provides one;
/// samples of unknown type draw from every answer in the set.
#[derive(Debug, Clone, Default)]
pub struct LabelSpace {
    by_type: BTreeMap<AnswerType, Vec<String>>,
    all: Vec<String>,
}

impl LabelSpace {
    pub fn from_support(support: &SupportSet) -> Self {
        let mut by_type: BTreeMap<AnswerType, BTreeSet<String>> = BTreeMap::new();
        let mut all = BTreeSet::new();
        for s in support.samples() {
            all.insert(s.canonical_answer.clone());
            if s.answer_type != AnswerType::Unknown {
                by_type
                    .entry(s.answer_type)
                    .or_default()
                    .insert(s.canonical_answer.clone());
            }
        }
        Self {
            by_type: by_type
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            all: all.into_iter().collect(),
        }
    }

    pub fn answers_for(&self, answer_type: AnswerType) -> &[String] {
        match self.by_type.get(&answer_type) {
            Some(v) if answer_type != AnswerType::Unknown => v,
            _ => &self.all,
        }
    }
}

fn random_other_sample<'a>(
    pool: &'a SupportSet,
    avoid: &[u64],
    rng: &mut StreamRng,
) -> Result<&'a VqaSample> {
    let samples = pool.samples();
    if samples.iter().all(|s| avoid.contains(&s.sample_id)) {
        return Err(Error::NotEnoughSamples {
            requested: 1,
            available: 0,
        });
    }
    loop {
        let s = &samples[rng.random_range(0..samples.len())];
        if !avoid.contains(&s.sample_id) {
            return Ok(s);
        }
    }
}

/// MI / MA / MQA.
pub fn mismatch(
    seq: &InContextSequence,
    mode: MismatchMode,
    pool: &SupportSet,
    labels: &LabelSpace,
    rng: &mut StreamRng,
) -> Result<InContextSequence> {
    let mut out = seq.clone();
    let query_id = seq.query.sample_id;
    for d in &mut out.demos {
        match mode {
            MismatchMode::Image => {
                let s = random_other_sample(pool, &[d.image_source, query_id], rng)?;
                d.image_ref = s.image_ref.clone();
                d.image_source = s.sample_id;
            }
            MismatchMode::Answer => {
                let candidates: Vec<&String> = labels
                    .answers_for(d.answer_type)
                    .iter()
                    .filter(|a| **a != d.answer)
                    .collect();
                let pick = candidates
                    .choose(rng)
                    .ok_or_else(|| Error::NoAlternativeAnswer(d.answer.clone()))?;
                d.answer = (*pick).clone();
            }
            MismatchMode::QuestionAnswer => {
                let s = random_other_sample(pool, &[d.question_source, query_id], rng)?;
                d.question = s.question.clone();
                d.answer = s.canonical_answer.clone();
                d.answer_type = s.answer_type;
                d.question_source = s.sample_id;
            }
        }
    }
    Ok(out.logged(format!("mismatch:{}", mode.label())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderBy {
    Question,
    Image,
}

/// Re-sorts demos by similarity to the query in another modality (SI-Q,
/// SQ-I). Ranking ties go to the smaller sample_id; `order` then places
/// the ranked list as in retrieval.
pub fn reorder_cross_modal(
    seq: &InContextSequence,
    by: ReorderBy,
    support: &Corpus,
    queries: &Corpus,
    order: DemoOrder,
) -> Result<InContextSequence> {
    let modality = match by {
        ReorderBy::Question => Modality::Question,
        ReorderBy::Image => Modality::Image,
    };
    let q = queries.embedding(modality, seq.query.sample_id)?;
    let mut scored = Vec::with_capacity(seq.demos.len());
    for d in &seq.demos {
        let source = match by {
            ReorderBy::Question => d.question_source,
            ReorderBy::Image => d.image_source,
        };
        let row = support.embedding(modality, source)?;
        let score: f64 = row.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
        scored.push((
            Hit {
                sample_id: d.sample_id,
                score,
            },
            d.clone(),
        ));
    }
    scored.sort_by(|a, b| rank_cmp(&a.0, &b.0));
    let mut out = seq.clone();
    out.demos = scored.into_iter().map(|(_, d)| d).collect();
    if order == DemoOrder::Ascending {
        out.demos.reverse();
    }
    let label = match by {
        ReorderBy::Question => "reorder:question",
        ReorderBy::Image => "reorder:image",
    };
    Ok(out.logged(label))
}

pub fn reverse(seq: &InContextSequence) -> InContextSequence {
    let mut out = seq.clone();
    out.demos.reverse();
    out.logged("reverse")
}

pub fn prepend_instruction(seq: &InContextSequence, inst: &str) -> Result<InContextSequence> {
    if inst.trim().is_empty() {
        return Err(Error::Template("instruction must be non-empty".into()));
    }
    let mut out = seq.clone();
    out.instruction = Some(inst.to_string());
    Ok(out.logged("instruction"))
}

/// Rewrites demo and query questions into masked declarative sentences;
/// questions outside the rule table keep their question form.
pub fn declarative(seq: &InContextSequence) -> InContextSequence {
    let mut out = seq.clone();
    let rewrite = |q: &mut String| {
        if let Ok(d) = to_declarative(q) {
            *q = d;
        }
    };
    for d in &mut out.demos {
        rewrite(&mut d.question);
    }
    rewrite(&mut out.query.question);
    out.logged("declarative")
}

/// Key-token annotations: `sample_id -> tokens to strip`.
#[derive(Debug, Clone, Default)]
pub struct KeyTokens(HashMap<u64, Vec<String>>);

#[derive(Deserialize)]
struct KeyTokenRecord {
    sample_id: u64,
    key_tokens: Vec<String>,
}

impl KeyTokens {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<KeyTokenRecord> = read_jsonl(path)?;
        Ok(Self(
            records
                .into_iter()
                .map(|r| (r.sample_id, r.key_tokens))
                .collect(),
        ))
    }

    pub fn insert(&mut self, id: u64, tokens: Vec<String>) {
        self.0.insert(id, tokens);
    }

    /// Annotated tokens, else the default content-word heuristic.
    pub fn for_question(&self, id: u64, question: &str) -> Vec<String> {
        self.0
            .get(&id)
            .cloned()
            .unwrap_or_else(|| default_key_tokens(question))
    }
}

pub fn degrade_query(seq: &InContextSequence, keys: &KeyTokens) -> InContextSequence {
    let mut out = seq.clone();
    let tokens = keys.for_question(seq.query.sample_id, &seq.query.question);
    out.query.question = degrade_question(&seq.query.question, &tokens);
    out.logged("degrade_question")
}

fn default_sigma() -> f64 {
    5.0
}

/// A configured transform, as written in experiment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Manipulation {
    Mismatch {
        mode: MismatchMode,
    },
    Reorder {
        by: ReorderBy,
    },
    Reverse,
    Instruction {
        text: String,
    },
    Declarative,
    DegradeQuestion,
    BlurQuery {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
}

/// Shared inputs for applying [`Manipulation`]s.
pub struct ManipulationContext<'a> {
    pub support: &'a Corpus,
    pub queries: &'a Corpus,
    pub labels: &'a LabelSpace,
    pub key_tokens: &'a KeyTokens,
    /// Root for resolving relative image refs when blurring.
    pub image_root: Option<&'a Path>,
    /// Where blurred query images are written.
    pub blur_dir: Option<&'a Path>,
}

impl Manipulation {
    pub fn apply(
        &self,
        seq: &InContextSequence,
        ctx: &ManipulationContext<'_>,
        rng: &mut StreamRng,
    ) -> Result<InContextSequence> {
        match self {
            Manipulation::Mismatch { mode } => mismatch(seq, *mode, &ctx.support.samples, ctx.labels, rng),
            Manipulation::Reorder { by } => {
                reorder_cross_modal(seq, *by, ctx.support, ctx.queries, seq.provenance.strategy.order)
            }
            Manipulation::Reverse => Ok(reverse(seq)),
            Manipulation::Instruction { text } => prepend_instruction(seq, instruction_text(text)),
            Manipulation::Declarative => Ok(declarative(seq)),
            Manipulation::DegradeQuestion => Ok(degrade_query(seq, ctx.key_tokens)),
            Manipulation::BlurQuery { sigma } => {
                let dir = ctx
                    .blur_dir
                    .ok_or_else(|| Error::Config("blur_query needs an output directory".into()))?;
                let src = resolve_image(ctx.image_root, &seq.query.image_ref);
                let dst = dir.join(format!("query_{}_sigma{}.png", seq.query.sample_id, sigma));
                if !dst.exists() {
                    blur_file(&src, &dst, *sigma)?;
                }
                let mut out = seq.clone();
                out.query.image_ref = dst.to_string_lossy().into_owned();
                Ok(out.logged(format!("blur_query:{sigma}")))
            }
        }
    }

    pub fn needs_modality(&self) -> Option<Modality> {
        match self {
            Manipulation::Reorder { by: ReorderBy::Question } => Some(Modality::Question),
            Manipulation::Reorder { by: ReorderBy::Image } => Some(Modality::Image),
            _ => None,
        }
    }
}

/// Expands the `instruct1`..`instruct3` presets.
pub fn instruction_text(text: &str) -> &str {
    match text {
        "instruct1" => INSTRUCT1,
        "instruct2" => INSTRUCT2,
        "instruct3" => INSTRUCT3,
        other => other,
    }
}

fn resolve_image(root: Option<&Path>, image_ref: &str) -> PathBuf {
    let p = PathBuf::from(image_ref);
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p,
    }
}
