//! Demonstration retrieval strategies.
//!
//! Every strategy returns a [`DemonstrationList`] ranked best-first. The
//! left-to-right order inside the final prompt is applied later by
//! [`crate::manipulate::build_sequence`] according to [`DemoOrder`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{SupportSet, TagCategory, TagSet, VqaSample};
use crate::embed_index::{
    normalize, qa_key_text, Hit, Modality, SimilarityIndex, TagIndex, TextEmbedder,
};
use crate::error::{Error, Result};
use crate::manipulate::build_sequence;
use crate::oracle::{postprocess_answer, GenerationRequest, Oracle};
use crate::prompt::{serialize, PromptTemplate};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "RS")]
    Rs,
    #[serde(rename = "SI")]
    Si,
    #[serde(rename = "SQ")]
    Sq,
    #[serde(rename = "SQA")]
    Sqa,
    #[serde(rename = "SQPA")]
    Sqpa,
    #[serde(rename = "STI")]
    Sti,
    #[serde(rename = "STQ-2")]
    Stq2,
    #[serde(rename = "STQ-4")]
    Stq4,
    #[serde(rename = "DT-I")]
    DtI,
    #[serde(rename = "DC-I")]
    DcI,
    #[serde(rename = "DQ")]
    Dq,
    #[serde(rename = "I-SQ")]
    ISq,
    #[serde(rename = "I-SQA")]
    ISqa,
    #[serde(rename = "Q-SI")]
    QSi,
    #[serde(rename = "QA-SI")]
    QaSi,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Rs => "RS",
            StrategyKind::Si => "SI",
            StrategyKind::Sq => "SQ",
            StrategyKind::Sqa => "SQA",
            StrategyKind::Sqpa => "SQPA",
            StrategyKind::Sti => "STI",
            StrategyKind::Stq2 => "STQ-2",
            StrategyKind::Stq4 => "STQ-4",
            StrategyKind::DtI => "DT-I",
            StrategyKind::DcI => "DC-I",
            StrategyKind::Dq => "DQ",
            StrategyKind::ISq => "I-SQ",
            StrategyKind::ISqa => "I-SQA",
            StrategyKind::QSi => "Q-SI",
            StrategyKind::QaSi => "QA-SI",
        }
    }

    /// (query-side modality, indexed modality) for embedding strategies.
    pub fn similarity_route(self) -> Option<(Modality, Modality)> {
        use Modality::*;
        match self {
            StrategyKind::Si => Some((Image, Image)),
            StrategyKind::Sq => Some((Question, Question)),
            StrategyKind::Sqa => Some((QuestionAnswer, QuestionAnswer)),
            StrategyKind::ISq => Some((Question, Image)),
            StrategyKind::ISqa => Some((QuestionAnswer, Image)),
            StrategyKind::QSi => Some((Image, Question)),
            StrategyKind::QaSi => Some((Image, QuestionAnswer)),
            _ => None,
        }
    }

    /// Modalities whose embeddings (query side, support side) this kind reads.
    pub fn required_modalities(self) -> Vec<(Modality, Modality)> {
        match self {
            StrategyKind::Sqpa => vec![(Modality::QuestionAnswer, Modality::QuestionAnswer)],
            k => k.similarity_route().into_iter().collect(),
        }
    }

    pub fn uses_image_tags(self) -> bool {
        matches!(self, StrategyKind::Sti | StrategyKind::DtI | StrategyKind::DcI)
    }

    pub fn uses_question_tags(self) -> bool {
        matches!(self, StrategyKind::Stq2 | StrategyKind::Stq4 | StrategyKind::Dq)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Left-to-right placement of ranked demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    /// Least similar first; the best match sits next to the query.
    #[default]
    Ascending,
    /// Best match first.
    Descending,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
    /// First-round strategy for SQPA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<Box<StrategySpec>>,
    /// Skip candidates whose image already appears in the list (SI*).
    #[serde(default, skip_serializing_if = "is_default")]
    pub dedup_images: bool,
    #[serde(default, skip_serializing_if = "is_default")]
    pub order: DemoOrder,
    /// SQPA: keep round-1 demonstrations out of the round-2 list.
    #[serde(default, skip_serializing_if = "is_default")]
    pub exclude_round1: bool,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, shots: usize) -> Self {
        Self {
            kind,
            shots,
            seed: 0,
            inner: None,
            dedup_images: false,
            order: DemoOrder::default(),
            exclude_round1: false,
        }
    }

    pub fn sqpa(shots: usize, inner: StrategySpec) -> Self {
        Self {
            inner: Some(Box::new(inner)),
            ..Self::new(StrategyKind::Sqpa, shots)
        }
    }

    pub fn with_shots(&self, shots: usize) -> Self {
        Self {
            shots,
            ..self.clone()
        }
    }

    /// Short label such as `SQPA(SI-4)` or `SI*`.
    pub fn label(&self) -> String {
        let mut s = self.kind.label().to_string();
        if self.dedup_images {
            s.push('*');
        }
        if let Some(inner) = &self.inner {
            s = format!("{s}({}-{})", inner.label(), inner.shots);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::InvalidStrategy(format!("{}: shots must be positive", self.label())));
        }
        match (&self.kind, &self.inner) {
            (StrategyKind::Sqpa, None) => Err(Error::InvalidStrategy(
                "SQPA requires an inner (first-round) strategy".into(),
            )),
            (StrategyKind::Sqpa, Some(inner)) if inner.kind == StrategyKind::Sqpa => Err(
                Error::InvalidStrategy("SQPA is fixed to two rounds; inner cannot be SQPA".into()),
            ),
            (StrategyKind::Sqpa, Some(inner)) => inner.validate(),
            (_, Some(_)) => Err(Error::InvalidStrategy(format!(
                "{} does not take an inner strategy",
                self.kind
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationList {
    /// Ranked best-first.
    pub items: Vec<Hit>,
    pub spec: StrategySpec,
}

impl DemonstrationList {
    pub fn ids(&self) -> Vec<u64> {
        self.items.iter().map(|h| h.sample_id).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A dataset split with its embedding indexes and tag indexes.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: SupportSet,
    indexes: BTreeMap<Modality, Arc<SimilarityIndex>>,
    image_tags: TagIndex,
    question_tags: TagIndex,
}

impl Corpus {
    /// Builds tag indexes from the tags already attached to `samples`.
    pub fn new(samples: SupportSet) -> Self {
        let image_tags = TagIndex::build(samples.samples().iter().map(|s| (s.sample_id, s.image_tags())));
        let question_tags =
            TagIndex::build(samples.samples().iter().map(|s| (s.sample_id, s.question_tags())));
        Self {
            samples,
            indexes: BTreeMap::new(),
            image_tags,
            question_tags,
        }
    }

    pub fn with_index(self, index: SimilarityIndex) -> Result<Self> {
        self.with_shared_index(Arc::new(index))
    }

    /// Attaches an index without copying it; the ids must cover `samples`.
    pub fn with_shared_index(mut self, index: Arc<SimilarityIndex>) -> Result<Self> {
        index.table().check_ids(&self.samples)?;
        self.indexes.insert(index.modality(), index);
        Ok(self)
    }

    pub fn has_index(&self, m: Modality) -> bool {
        self.indexes.contains_key(&m)
    }

    pub fn index(&self, m: Modality) -> Result<&SimilarityIndex> {
        self.indexes.get(&m).map(|a| a.as_ref()).ok_or_else(|| Error::MissingEmbedding {
            modality: format!("{} (no table loaded)", m.as_str()),
            sample_id: u64::MAX,
        })
    }

    pub fn shared_index(&self, m: Modality) -> Result<Arc<SimilarityIndex>> {
        self.index(m)?;
        Ok(self.indexes[&m].clone())
    }

    pub fn embedding(&self, m: Modality, id: u64) -> Result<&[f32]> {
        self.index(m)?.require_row(id)
    }

    pub fn image_tags(&self) -> &TagIndex {
        &self.image_tags
    }

    pub fn question_tags(&self) -> &TagIndex {
        &self.question_tags
    }
}

/// Dependencies of SQPA's first round.
pub struct SqpaDeps<'a> {
    pub oracle: &'a dyn Oracle,
    pub template: &'a PromptTemplate,
    pub embedder: &'a dyn TextEmbedder,
}

pub struct RetrievalContext<'a> {
    pub support: &'a Corpus,
    pub queries: &'a Corpus,
    /// Exclude the query's own id; set when queries are drawn from the
    /// supporting set itself.
    pub exclude_self: bool,
    pub sqpa: Option<SqpaDeps<'a>>,
}

const IMAGE_TAG_CATEGORIES: [TagCategory; 3] =
    [TagCategory::Object, TagCategory::Attribute, TagCategory::Relation];
const DC_I_CATEGORIES: [TagCategory; 4] = [
    TagCategory::Object,
    TagCategory::Attribute,
    TagCategory::Relation,
    TagCategory::Class,
];
const STQ2_CATEGORIES: [TagCategory; 2] = [TagCategory::Object, TagCategory::Relation];
const QUESTION_TAG_CATEGORIES: [TagCategory; 4] = [
    TagCategory::Object,
    TagCategory::Relation,
    TagCategory::Attribute,
    TagCategory::Interrogative,
];

impl<'a> RetrievalContext<'a> {
    pub fn new(support: &'a Corpus, queries: &'a Corpus, exclude_self: bool) -> Self {
        Self {
            support,
            queries,
            exclude_self,
            sqpa: None,
        }
    }

    fn base_exclude(&self, query: &VqaSample) -> HashSet<u64> {
        let mut ex = HashSet::new();
        if self.exclude_self {
            ex.insert(query.sample_id);
        }
        ex
    }

    fn available(&self, query: &VqaSample) -> usize {
        let own = usize::from(self.exclude_self && self.support.samples.contains(query.sample_id));
        self.support.samples.len() - own
    }

    fn check_n(&self, query: &VqaSample, n: usize) -> Result<()> {
        let available = self.available(query);
        if n > available {
            return Err(Error::NotEnoughSamples {
                requested: n,
                available,
            });
        }
        Ok(())
    }

    /// Runs `spec` for `query`.
    pub fn retrieve(
        &self,
        query: &VqaSample,
        spec: &StrategySpec,
        rng: &mut StreamRng,
    ) -> Result<DemonstrationList> {
        spec.validate()?;
        self.check_n(query, spec.shots)?;
        let n = spec.shots;
        let items = match spec.kind {
            StrategyKind::Rs => self.retrieve_rs(query, n, rng)?,
            StrategyKind::Sqpa => self.retrieve_sqpa(query, spec, rng)?,
            StrategyKind::Sti | StrategyKind::Stq2 | StrategyKind::Stq4 => {
                self.retrieve_tagged(query, spec.kind, n)?
            }
            StrategyKind::DtI | StrategyKind::DcI | StrategyKind::Dq => {
                self.retrieve_diverse(query, spec.kind, n)?
            }
            kind => {
                let (qm, im) = kind.similarity_route().expect("similarity kind");
                let key = self.queries.embedding(qm, query.sample_id)?;
                self.retrieve_similar(key, im, n, self.base_exclude(query), spec.dedup_images)?
            }
        };
        if items.len() != n {
            return Err(Error::NotEnoughSamples {
                requested: n,
                available: items.len(),
            });
        }
        Ok(DemonstrationList {
            items,
            spec: spec.clone(),
        })
    }

    /// Uniform sampling without replacement.
    pub fn retrieve_rs(&self, query: &VqaSample, n: usize, rng: &mut StreamRng) -> Result<Vec<Hit>> {
        let exclude = self.base_exclude(query);
        let pool: Vec<u64> = self
            .support
            .samples
            .ids()
            .filter(|id| !exclude.contains(id))
            .collect();
        if n > pool.len() {
            return Err(Error::NotEnoughSamples {
                requested: n,
                available: pool.len(),
            });
        }
        Ok(index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| Hit {
                sample_id: pool[i],
                score: 0.0,
            })
            .collect())
    }

    /// Top-n over the `index_modality` table keyed by `key`.
    pub fn retrieve_similar(
        &self,
        key: &[f32],
        index_modality: Modality,
        n: usize,
        exclude: HashSet<u64>,
        dedup_images: bool,
    ) -> Result<Vec<Hit>> {
        let index = self.support.index(index_modality)?;
        if !dedup_images {
            return index.top_k(key, n, &exclude);
        }
        let mut k = n;
        loop {
            let hits = index.top_k(key, k, &exclude)?;
            let exhausted = hits.len() < k;
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(n);
            for h in hits {
                let img = &self.support.samples.sample(h.sample_id)?.image_ref;
                if seen.insert(img.clone()) {
                    out.push(h);
                    if out.len() == n {
                        return Ok(out);
                    }
                }
            }
            if exhausted {
                return Ok(out);
            }
            k = (k * 2).min(index.len());
        }
    }

    fn retrieve_sqpa(
        &self,
        query: &VqaSample,
        spec: &StrategySpec,
        rng: &mut StreamRng,
    ) -> Result<Vec<Hit>> {
        let deps = self.sqpa.as_ref().ok_or_else(|| {
            Error::InvalidStrategy("SQPA needs an oracle and embedder".into())
        })?;
        let inner = spec.inner.as_deref().expect("validated");
        let round1 = self.retrieve(query, inner, rng)?;
        let round1_ids = round1.ids();
        let attach = |e: Error| Error::Sqpa {
            round1_ids: round1_ids.clone(),
            source: Box::new(e),
        };

        let seq = build_sequence(&self.support.samples, query, &round1).map_err(attach)?;
        let prompt = serialize(&seq, deps.template).map_err(attach)?;
        let answer = deps
            .oracle
            .generate(&GenerationRequest {
                query_id: query.sample_id,
                prompt: &prompt,
                sequence: &seq,
            })
            .map_err(attach)?;
        let pseudo = postprocess_answer(&answer.text, &deps.template.stop_tokens());

        let key_text = qa_key_text(&query.question, &pseudo);
        let raw = deps
            .embedder
            .embed_texts(std::slice::from_ref(&key_text))
            .map_err(attach)?
            .pop()
            .ok_or_else(|| attach(Error::EmbeddingService("no vector returned".into())))?;
        let key = normalize(&raw).map_err(attach)?;

        let mut exclude = self.base_exclude(query);
        if spec.exclude_round1 {
            exclude.extend(round1_ids.iter().copied());
        }
        self.retrieve_similar(&key, Modality::QuestionAnswer, spec.shots, exclude, spec.dedup_images)
    }

    fn query_tags(&self, query: &VqaSample, image_side: bool, cats: &[TagCategory]) -> Result<TagSet> {
        let tags = if image_side {
            query.image_tags()
        } else {
            query.question_tags()
        };
        match tags {
            Some(t) => Ok(t.restrict(cats)),
            None => Err(Error::MissingTags {
                sample_id: query.sample_id,
                categories: cats.iter().map(|c| c.as_str().to_string()).collect(),
            }),
        }
    }

    fn tag_index(&self, image_side: bool) -> &TagIndex {
        if image_side {
            self.support.image_tags()
        } else {
            self.support.question_tags()
        }
    }

    /// STI / STQ-2 / STQ-4: overlap ranking over the configured categories.
    pub fn retrieve_tagged(&self, query: &VqaSample, kind: StrategyKind, n: usize) -> Result<Vec<Hit>> {
        let (image_side, cats): (bool, &[TagCategory]) = match kind {
            StrategyKind::Sti => (true, &IMAGE_TAG_CATEGORIES),
            StrategyKind::Stq2 => (false, &STQ2_CATEGORIES),
            StrategyKind::Stq4 => (false, &QUESTION_TAG_CATEGORIES),
            other => return Err(Error::InvalidStrategy(format!("{other} is not a tag strategy"))),
        };
        let q = self.query_tags(query, image_side, cats)?;
        Ok(self
            .tag_index(image_side)
            .top_k(&q, cats, n, &self.base_exclude(query))
            .into_iter()
            .map(tag_hit)
            .collect())
    }

    /// DT-I / DC-I / DQ: one tag cluster per slot (DT-I) or per category
    /// (DC-I, DQ), best unused match per cluster.
    pub fn retrieve_diverse(&self, query: &VqaSample, kind: StrategyKind, n: usize) -> Result<Vec<Hit>> {
        match kind {
            StrategyKind::DtI => self.retrieve_dt_i(query, n),
            StrategyKind::DcI => self.retrieve_by_category(query, true, &DC_I_CATEGORIES, n),
            StrategyKind::Dq => self.retrieve_by_category(query, false, &QUESTION_TAG_CATEGORIES, n),
            other => Err(Error::InvalidStrategy(format!("{other} is not a diversity strategy"))),
        }
    }

    fn retrieve_dt_i(&self, query: &VqaSample, n: usize) -> Result<Vec<Hit>> {
        let tags = self.query_tags(query, true, &IMAGE_TAG_CATEGORIES)?;
        let mut pairs: Vec<(&str, TagCategory)> = tags.pairs().map(|(c, t)| (t, c)).collect();
        pairs.sort();
        if pairs.len() < n {
            return Err(Error::TooFewTags {
                tags: pairs.len(),
                clusters: n,
            });
        }
        let clusters = dt_i_clusters(&pairs, n);
        let index = self.tag_index(true);
        let mut exclude = self.base_exclude(query);
        let mut out = Vec::with_capacity(n);
        for cluster in clusters {
            if let Some(best) = index.top_k(&cluster, &IMAGE_TAG_CATEGORIES, 1, &exclude).pop() {
                exclude.insert(best.sample_id);
                out.push(tag_hit(best));
            }
        }
        Ok(out)
    }

    fn retrieve_by_category(
        &self,
        query: &VqaSample,
        image_side: bool,
        cats: &[TagCategory],
        n: usize,
    ) -> Result<Vec<Hit>> {
        let tags = self.query_tags(query, image_side, cats)?;
        let index = self.tag_index(image_side);
        let quota = n.div_ceil(cats.len());
        let mut exclude = self.base_exclude(query);
        let mut out = Vec::with_capacity(quota * cats.len());
        for cat in cats {
            let cluster = tags.restrict(std::slice::from_ref(cat));
            for h in index.top_k(&cluster, std::slice::from_ref(cat), quota, &exclude) {
                exclude.insert(h.sample_id);
                out.push(tag_hit(h));
            }
        }
        if out.len() > n {
            // Truncate by overlap across all categories, keeping cluster order.
            let global: BTreeMap<u64, u32> = index
                .overlaps(&tags, cats)
                .into_iter()
                .map(|h| (h.sample_id, h.overlap))
                .collect();
            let mut ranked: Vec<(u32, u64)> = out.iter().map(|h| (global[&h.sample_id], h.sample_id)).collect();
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let keep: HashSet<u64> = ranked.into_iter().take(n).map(|(_, id)| id).collect();
            out.retain(|h| keep.contains(&h.sample_id));
        }
        Ok(out)
    }
}

/// Round-robin assignment of lexicographically sorted tags to `n` clusters.
pub fn dt_i_clusters(sorted_pairs: &[(&str, TagCategory)], n: usize) -> Vec<TagSet> {
    let mut clusters = vec![TagSet::new(); n];
    for (i, (tag, cat)) in sorted_pairs.iter().enumerate() {
        clusters[i % n].insert(*cat, *tag);
    }
    clusters
}

fn tag_hit(h: crate::embed_index::TagHit) -> Hit {
    Hit {
        sample_id: h.sample_id,
        score: h.overlap as f64,
    }
}
