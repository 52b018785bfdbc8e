use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{TagCategory, TagSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagHit {
    pub sample_id: u64,
    pub overlap: u32,
}

#[derive(Debug, Clone, Default)]
struct CategoryBits {
    vocab: BTreeMap<String, usize>,
    words: usize,
    // row-major: one `words`-long bitset per indexed sample
    bits: Vec<u64>,
}

impl CategoryBits {
    fn encode(&self, tags: Option<&std::collections::BTreeSet<String>>) -> Vec<u64> {
        let mut out = vec![0u64; self.words];
        for tag in tags.into_iter().flatten() {
            if let Some(&b) = self.vocab.get(tag) {
                out[b / 64] |= 1 << (b % 64);
            }
        }
        out
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }
}

/// One-hot tag vocabularies with a bitset per sample and category.
///
/// Overlap between two samples is the popcount of the bitwise AND, summed
/// over the requested categories.
#[derive(Debug, Clone, Default)]
pub struct TagIndex {
    ids: Vec<u64>,
    categories: BTreeMap<TagCategory, CategoryBits>,
    present: HashSet<u64>,
}

impl TagIndex {
    /// Builds the index over `(sample_id, tags)` pairs; samples without tags
    /// get empty rows. The vocabulary is frozen afterwards.
    pub fn build<'a>(entries: impl IntoIterator<Item = (u64, Option<&'a TagSet>)>) -> Self {
        let mut entries: Vec<(u64, Option<&TagSet>)> = entries.into_iter().collect();
        entries.sort_by_key(|(id, _)| *id);

        let mut vocab: BTreeMap<TagCategory, BTreeMap<String, usize>> = BTreeMap::new();
        for (_, tags) in &entries {
            for (cat, tag) in tags.iter().flat_map(|t| t.pairs()) {
                let v = vocab.entry(cat).or_default();
                let next = v.len();
                v.entry(tag.to_string()).or_insert(next);
            }
        }

        let mut categories = BTreeMap::new();
        for (cat, v) in vocab {
            let words = v.len().div_ceil(64).max(1);
            let mut cb = CategoryBits {
                vocab: v,
                words,
                bits: Vec::with_capacity(words * entries.len()),
            };
            for (_, tags) in &entries {
                let row = cb.encode(tags.and_then(|t| t.get(cat)));
                cb.bits.extend_from_slice(&row);
            }
            categories.insert(cat, cb);
        }

        Self {
            present: entries
                .iter()
                .filter(|(_, t)| t.is_some())
                .map(|(id, _)| *id)
                .collect(),
            ids: entries.into_iter().map(|(id, _)| id).collect(),
            categories,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self, category: TagCategory) -> usize {
        self.categories.get(&category).map_or(0, |c| c.vocab.len())
    }

    pub fn has_tags(&self, id: u64) -> bool {
        self.present.contains(&id)
    }

    /// Overlap of every indexed sample with `query`, restricted to
    /// `categories`, in id order.
    pub fn overlaps(&self, query: &TagSet, categories: &[TagCategory]) -> Vec<TagHit> {
        let mut scores = vec![0u32; self.ids.len()];
        for cat in categories {
            let Some(cb) = self.categories.get(cat) else {
                continue;
            };
            let q = cb.encode(query.get(*cat));
            if q.iter().all(|w| *w == 0) {
                continue;
            }
            for (i, s) in scores.iter_mut().enumerate() {
                *s += cb
                    .row(i)
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| (a & b).count_ones())
                    .sum::<u32>();
            }
        }
        self.ids
            .iter()
            .zip(scores)
            .map(|(&sample_id, overlap)| TagHit { sample_id, overlap })
            .collect()
    }

    /// Top-k by tag overlap; ties go to the smaller sample_id.
    pub fn top_k(
        &self,
        query: &TagSet,
        categories: &[TagCategory],
        k: usize,
        exclude: &HashSet<u64>,
    ) -> Vec<TagHit> {
        let mut hits: Vec<TagHit> = self
            .overlaps(query, categories)
            .into_iter()
            .filter(|h| !exclude.contains(&h.sample_id))
            .collect();
        hits.sort_by(|a, b| b.overlap.cmp(&a.overlap).then(a.sample_id.cmp(&b.sample_id)));
        hits.truncate(k);
        hits
    }
}

/// Set-intersection overlap of two tag sets over `categories`.
pub fn tag_overlap(a: &TagSet, b: &TagSet, categories: &[TagCategory]) -> u32 {
    categories
        .iter()
        .map(|c| match (a.get(*c), b.get(*c)) {
            (Some(x), Some(y)) => x.intersection(y).count() as u32,
            _ => 0,
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const IMG: [TagCategory; 3] = [TagCategory::Object, TagCategory::Attribute, TagCategory::Relation];

    fn dog_white_drink() -> (TagSet, TagSet, TagSet) {
        let q = TagSet::new()
            .with(TagCategory::Object, &["dog"])
            .with(TagCategory::Attribute, &["white"])
            .with(TagCategory::Relation, &["drink"]);
        let a = TagSet::new()
            .with(TagCategory::Object, &["cat"])
            .with(TagCategory::Attribute, &["white"])
            .with(TagCategory::Relation, &["sit"]);
        let b = TagSet::new()
            .with(TagCategory::Object, &["dog"])
            .with(TagCategory::Attribute, &["brown"])
            .with(TagCategory::Relation, &["drink"]);
        (q, a, b)
    }

    #[test]
    fn overlap_prefers_image_b() {
        let (q, a, b) = dog_white_drink();
        let idx = TagIndex::build([(1, Some(&a)), (2, Some(&b))]);
        let hits = idx.top_k(&q, &IMG, 2, &HashSet::new());
        assert_eq!(hits, vec![
            TagHit { sample_id: 2, overlap: 2 },
            TagHit { sample_id: 1, overlap: 1 },
        ]);
    }

    #[test]
    fn empty_query_orders_by_id() {
        let (_, a, b) = dog_white_drink();
        let idx = TagIndex::build([(5, Some(&a)), (2, Some(&b)), (9, None)]);
        let hits = idx.top_k(&TagSet::new(), &IMG, 3, &HashSet::new());
        assert_eq!(hits.iter().map(|h| h.sample_id).collect::<Vec<_>>(), vec![2, 5, 9]);
        assert!(hits.iter().all(|h| h.overlap == 0));
    }

    #[test]
    fn out_of_vocabulary_tags_count_zero() {
        let (_, a, _) = dog_white_drink();
        let idx = TagIndex::build([(1, Some(&a))]);
        let q = TagSet::new().with(TagCategory::Object, &["zebra"]);
        assert_eq!(idx.top_k(&q, &IMG, 1, &HashSet::new())[0].overlap, 0);
    }

    #[test]
    fn wide_vocabulary_spans_words() {
        let sets: Vec<TagSet> = (0..200)
            .map(|i| TagSet::new().with(TagCategory::Object, &[&format!("t{i}"), "common"]))
            .collect();
        let idx = TagIndex::build(sets.iter().enumerate().map(|(i, s)| (i as u64, Some(s))));
        assert_eq!(idx.vocab_size(TagCategory::Object), 201);
        let q = TagSet::new().with(TagCategory::Object, &["t150", "common"]);
        let hits = idx.top_k(&q, &IMG, 2, &HashSet::new());
        assert_eq!(hits[0], TagHit { sample_id: 150, overlap: 2 });
        assert_eq!(hits[1], TagHit { sample_id: 0, overlap: 1 });
    }

    fn arb_tagset() -> impl Strategy<Value = TagSet> {
        proptest::collection::vec((0usize..3, "[a-e]"), 0..6).prop_map(|pairs| {
            let mut t = TagSet::new();
            for (c, tag) in pairs {
                t.insert(IMG[c], tag);
            }
            t
        })
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric(a in arb_tagset(), b in arb_tagset()) {
            prop_assert_eq!(tag_overlap(&a, &b, &IMG), tag_overlap(&b, &a, &IMG));
            let ia = TagIndex::build([(0, Some(&a))]);
            let ib = TagIndex::build([(0, Some(&b))]);
            prop_assert_eq!(ia.overlaps(&b, &IMG)[0].overlap, ib.overlaps(&a, &IMG)[0].overlap);
        }

        #[test]
        fn index_matches_set_intersection(
            sets in proptest::collection::vec(arb_tagset(), 1..50),
            q in arb_tagset(),
        ) {
            let idx = TagIndex::build(sets.iter().enumerate().map(|(i, s)| (i as u64, Some(s))));
            for h in idx.overlaps(&q, &IMG) {
                prop_assert_eq!(h.overlap, tag_overlap(&q, &sets[h.sample_id as usize], &IMG));
            }
        }
    }
}
