//! Embedding tables and exact top-k cosine retrieval.
//!
//! Retrieval is a flat scan over L2-normalized `f32` rows. Dot products are
//! accumulated in `f64`, which makes scores reproducible to well below the
//! gap between distinct neighbors, so rankings can be checked against a
//! brute-force oracle without tolerance games.

mod embedder;
mod tags;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SupportSet;
use crate::error::{Error, Result};

pub use embedder::{
    qa_key_text, EmbedRequest, EmbedResponse, EmbeddingClient, HashingEmbedder, TextEmbedder,
};
pub use tags::{tag_overlap, TagHit, TagIndex};

pub const MAGIC: &[u8; 4] = b"ICLE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Question,
    QuestionAnswer,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Question => 1,
            Modality::QuestionAnswer => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Question),
            2 => Some(Modality::QuestionAnswer),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Question => "question",
            Modality::QuestionAnswer => "question_answer",
        }
    }
}

/// Row-major embedding storage for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    modality: Modality,
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(modality: Modality, dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self {
            modality,
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_rows(
        modality: Modality,
        dim: usize,
        rows: impl IntoIterator<Item = (u64, Vec<f32>)>,
    ) -> Result<Self> {
        let mut t = Self::new(modality, dim);
        for (id, v) in rows {
            t.push(id, &v)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, id: u64, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    /// Keeps only rows whose id satisfies `keep`.
    pub fn retain(&mut self, keep: impl Fn(u64) -> bool) {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, row) in self.rows() {
            if keep(id) {
                ids.push(id);
                data.extend_from_slice(row);
            }
        }
        self.ids = ids;
        self.data = data;
    }

    /// Errors listing every id absent from `dataset`.
    pub fn check_ids(&self, dataset: &SupportSet) -> Result<()> {
        let orphans: Vec<u64> = self
            .ids
            .iter()
            .copied()
            .filter(|id| !dataset.contains(*id))
            .collect();
        if orphans.is_empty() {
            Ok(())
        } else {
            Err(Error::OrphanEmbeddings(orphans))
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.modality.code()])?;
        for (id, row) in self.rows() {
            w.write_all(&id.to_le_bytes())?;
            for x in row {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, expected: Modality) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        read_exact(r, &mut header)?;
        if &header[0..4] != MAGIC {
            return Err(Error::EmbeddingFormat("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::EmbeddingFormat(format!("unsupported version {version}")));
        }
        let count = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        if count == 0 || dim == 0 {
            return Err(Error::EmbeddingFormat("count and dim must be positive".into()));
        }
        let modality = Modality::from_code(header[16])
            .ok_or_else(|| Error::EmbeddingFormat(format!("unknown modality code {}", header[16])))?;
        if modality != expected {
            return Err(Error::EmbeddingFormat(format!(
                "file holds {} embeddings, expected {}",
                modality.as_str(),
                expected.as_str()
            )));
        }

        let mut table = Self::new(modality, dim);
        table.ids.reserve(count);
        table.data.reserve(count * dim);
        let mut record = vec![0u8; 8 + 4 * dim];
        let mut seen = HashSet::with_capacity(count);
        for _ in 0..count {
            read_exact(r, &mut record)?;
            let id = u64::from_le_bytes(record[0..8].try_into().unwrap());
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
            table.ids.push(id);
            table.data.extend(
                record[8..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|e| Error::EmbeddingFormat(e.to_string()))? != 0 {
            return Err(Error::EmbeddingFormat("trailing bytes after last record".into()));
        }
        Ok(table)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedEmbeddingFile,
        _ => Error::EmbeddingFormat(e.to_string()),
    })
}

/// Reads an embedding file and, if a dataset is given, checks every id
/// belongs to it.
pub fn load_embeddings(
    path: &Path,
    modality: Modality,
    dataset: Option<&SupportSet>,
) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let table = EmbeddingTable::read_from(&mut BufReader::new(file), modality)?;
    if let Some(ds) = dataset {
        table.check_ids(ds)?;
    }
    Ok(table)
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (mut uv, mut uu, mut vv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Returns `v / ‖v‖` in `f32`.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|&x| ((x as f64) / norm) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub sample_id: u64,
    pub score: f64,
}

/// Ranking order: score descending, then sample_id ascending.
pub fn rank_cmp(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

struct Ranked(Hit);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        rank_cmp(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    // Worse hits compare greater, so the max-heap top is the current cut-off.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(&self.0, &other.0)
    }
}

/// Bounded selection of the best `k` hits.
struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn would_accept(&self, hit: &Hit) -> bool {
        if self.k == 0 {
            return false;
        }
        self.heap.len() < self.k
            || self
                .heap
                .peek()
                .is_some_and(|worst| rank_cmp(hit, &worst.0) == Ordering::Less)
    }

    #[inline]
    fn push(&mut self, hit: Hit) {
        self.heap.push(Ranked(hit));
        if self.heap.len() > self.k {
            self.heap.pop();
        }
    }

    fn into_sorted(self) -> Vec<Hit> {
        self.heap.into_sorted_vec().into_iter().map(|r| r.0).collect()
    }
}

#[inline]
fn dot_f64(row: &[f32], q: &[f64]) -> f64 {
    let mut acc = [0f64; 8];
    let rc = row.chunks_exact(8);
    let qc = q.chunks_exact(8);
    let (rr, qr) = (rc.remainder(), qc.remainder());
    for (r, qq) in rc.zip(qc) {
        for i in 0..8 {
            acc[i] += r[i] as f64 * qq[i];
        }
    }
    let mut tail = 0f64;
    for (&r, &qq) in rr.iter().zip(qr) {
        tail += r as f64 * qq;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Immutable, normalized embedding table supporting exact top-k queries.
#[derive(Debug, Clone)]
pub struct SimilarityIndex {
    table: EmbeddingTable,
    pos: HashMap<u64, usize>,
}

impl SimilarityIndex {
    /// Sorts rows by sample_id and L2-normalizes each one. Tables already
    /// in ascending id order are normalized in place.
    pub fn build(table: EmbeddingTable) -> Result<Self> {
        let dim = table.dim;
        let mut t = if table.ids.windows(2).all(|w| w[0] < w[1]) {
            table
        } else {
            let mut order: Vec<usize> = (0..table.len()).collect();
            order.sort_by_key(|&i| table.ids[i]);
            let mut sorted = EmbeddingTable::new(table.modality, dim);
            sorted.ids.reserve(table.len());
            sorted.data.reserve(table.data.len());
            for i in order {
                sorted.ids.push(table.ids[i]);
                sorted.data.extend_from_slice(&table.data[i * dim..(i + 1) * dim]);
            }
            sorted
        };
        let mut pos = HashMap::with_capacity(t.len());
        for (i, &id) in t.ids.iter().enumerate() {
            if pos.insert(id, i).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        let modality = t.modality;
        for (row, &id) in t.data.chunks_exact_mut(dim).zip(&t.ids) {
            let unit = normalize(row).map_err(|_| Error::MissingEmbedding {
                modality: format!("{} (zero-norm)", modality.as_str()),
                sample_id: id,
            })?;
            row.copy_from_slice(&unit);
        }
        Ok(Self { table: t, pos })
    }

    pub fn modality(&self) -> Modality {
        self.table.modality
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Sample ids in iteration order (ascending).
    pub fn ids(&self) -> &[u64] {
        &self.table.ids
    }

    pub fn contains(&self, id: u64) -> bool {
        self.pos.contains_key(&id)
    }

    /// Normalized row for `id`.
    pub fn row(&self, id: u64) -> Option<&[f32]> {
        let dim = self.table.dim;
        self.pos.get(&id).map(|&i| &self.table.data[i * dim..(i + 1) * dim])
    }

    pub fn require_row(&self, id: u64) -> Result<&[f32]> {
        self.row(id).ok_or_else(|| Error::MissingEmbedding {
            modality: self.modality().as_str().into(),
            sample_id: id,
        })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    fn prepare_query(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        let norm = query.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(query.iter().map(|&x| x as f64 / norm).collect())
    }

    fn scan(&self, q: &[f64], rows: std::ops::Range<usize>, k: usize, exclude: &HashSet<u64>) -> TopK {
        let dim = self.dim();
        let mut top = TopK::new(k);
        if k == 0 {
            return top;
        }
        let data = &self.table.data[rows.start * dim..rows.end * dim];
        let ids = &self.table.ids[rows];
        for (row, &sample_id) in data.chunks_exact(dim).zip(ids) {
            let hit = Hit {
                sample_id,
                score: dot_f64(row, q),
            };
            if top.would_accept(&hit) && !exclude.contains(&sample_id) {
                top.push(hit);
            }
        }
        top
    }

    /// Exact top-k by cosine similarity; ties go to the smaller sample_id.
    pub fn top_k(&self, query: &[f32], k: usize, exclude: &HashSet<u64>) -> Result<Vec<Hit>> {
        let q = self.prepare_query(query)?;
        Ok(self.scan(&q, 0..self.len(), k, exclude).into_sorted())
    }

    /// Same result as [`top_k`](Self::top_k), scanning `threads` row chunks
    /// concurrently.
    pub fn top_k_parallel(
        &self,
        query: &[f32],
        k: usize,
        exclude: &HashSet<u64>,
        threads: usize,
    ) -> Result<Vec<Hit>> {
        let q = self.prepare_query(query)?;
        let threads = threads.max(1).min(self.len().max(1));
        let chunk = self.len().div_ceil(threads);
        let partials: Vec<TopK> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let start = (t * chunk).min(self.len());
                    let end = ((t + 1) * chunk).min(self.len());
                    let q = &q;
                    s.spawn(move || self.scan(q, start..end, k, exclude))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("scan thread")).collect()
        });
        let mut merged = TopK::new(k);
        for p in partials {
            for r in p.heap {
                if merged.would_accept(&r.0) {
                    merged.push(r.0);
                }
            }
        }
        Ok(merged.into_sorted())
    }

    /// Top-k keyed by another indexed sample's own row.
    pub fn top_k_by_id(&self, id: u64, k: usize, exclude: &HashSet<u64>) -> Result<Vec<Hit>> {
        let row = self.require_row(id)?.to_vec();
        self.top_k(&row, k, exclude)
    }
}
