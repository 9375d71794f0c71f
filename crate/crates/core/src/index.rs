//! Exact top-k cosine search over a packed row-major matrix.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::ClassId;
use crate::embedding::{dot, fast_dot, fast_dot_margin, Embedding, UNIT_TOLERANCE};
use crate::error::{Error, Result};
use crate::library::{LibrarySnapshot, Provenance};

/// Rows per parallel work unit. Results do not depend on this value.
const CHUNK_ROWS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub item_id: u64,
    pub class_id: Option<ClassId>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub item_id: u64,
    pub class_id: Option<ClassId>,
    pub provenance: Provenance,
    /// Cosine similarity.
    pub score: f64,
}

/// Search result ordered by descending score, ties by ascending item id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedHits {
    pub entries: Vec<Hit>,
}

impl RankedHits {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|h| h.item_id).collect()
    }

    pub fn first(&self) -> Option<&Hit> {
        self.entries.first()
    }
}

/// Immutable searchable view of one snapshot generation.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    generation: u64,
    dim: usize,
    matrix: Vec<f32>,
    rows: Vec<RowMeta>,
}

pub fn build_index(snapshot: &LibrarySnapshot) -> Result<VectorIndex> {
    VectorIndex::build(snapshot)
}

impl VectorIndex {
    pub fn build(snapshot: &LibrarySnapshot) -> Result<Self> {
        if snapshot.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        let dim = snapshot.dim();
        let mut matrix = Vec::with_capacity(snapshot.len() * dim);
        let mut rows = Vec::with_capacity(snapshot.len());
        for item in snapshot.items() {
            if item.embedding.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, found: item.embedding.dim() });
            }
            matrix.extend_from_slice(item.embedding.values());
            rows.push(RowMeta {
                item_id: item.item_id,
                class_id: item.class_id,
                provenance: item.provenance,
            });
        }
        Ok(Self { generation: snapshot.generation(), dim, matrix, rows })
    }

    /// Builds an index straight from a packed `rows.len() x dim` matrix,
    /// for libraries too large to hold twice in memory.
    pub fn from_packed(
        generation: u64,
        dim: usize,
        matrix: Vec<f32>,
        rows: Vec<RowMeta>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        if dim < 2 {
            return Err(Error::DimTooSmall(dim));
        }
        if matrix.len() != rows.len() * dim {
            return Err(Error::DimMismatch { expected: rows.len() * dim, found: matrix.len() });
        }
        let mut seen = HashSet::with_capacity(rows.len());
        for (meta, row) in rows.iter().zip(matrix.chunks_exact(dim)) {
            if !seen.insert(meta.item_id) {
                return Err(Error::IdCollision(meta.item_id));
            }
            let norm = dot(row, row).sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite);
            }
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::NotNormalized(norm));
            }
        }
        Ok(Self { generation, dim, matrix, rows })
    }

    /// Skips validation; callers guarantee unit rows and unique ids.
    pub(crate) fn from_trusted(generation: u64, dim: usize, matrix: Vec<f32>, rows: Vec<RowMeta>) -> Self {
        debug_assert_eq!(matrix.len(), rows.len() * dim);
        Self { generation, dim, matrix, rows }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_meta(&self, i: usize) -> &RowMeta {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[RowMeta] {
        &self.rows
    }

    /// True when every row carries a class id.
    pub fn is_labeled(&self) -> bool {
        self.rows.iter().all(|r| r.class_id.is_some())
    }

    fn check_query(&self, query: &Embedding, k: usize) -> Result<()> {
        if query.dim() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: query.dim() });
        }
        if !query.is_normalized() {
            return Err(Error::NotNormalized(query.norm()));
        }
        if k == 0 {
            return Err(Error::ZeroK);
        }
        Ok(())
    }

    /// Single-threaded exact top-k.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<RankedHits> {
        self.check_query(query, k)?;
        let mut top = TopK::new(k);
        self.scan(query.values(), 0..self.rows.len(), &mut top);
        Ok(self.finish(top))
    }

    /// Exact top-k with the scan split over the current rayon pool.
    ///
    /// Returns exactly what [`search`](Self::search) returns.
    pub fn par_search(&self, query: &Embedding, k: usize) -> Result<RankedHits> {
        self.check_query(query, k)?;
        let n = self.rows.len();
        let q = query.values();
        let top = (0..n.div_ceil(CHUNK_ROWS))
            .into_par_iter()
            .map(|c| {
                let mut top = TopK::new(k);
                self.scan(q, c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n), &mut top);
                top
            })
            .reduce(|| TopK::new(k), TopK::merge);
        Ok(self.finish(top))
    }

    /// Searches every query, in parallel across queries.
    ///
    /// Element `i` equals `search(&queries[i], k)`; a failing query does not
    /// affect the others.
    pub fn batch_search(&self, queries: &[Embedding], k: usize) -> Vec<Result<RankedHits>> {
        queries.par_iter().map(|q| self.search(q, k)).collect()
    }

    fn scan(&self, q: &[f32], rows: std::ops::Range<usize>, top: &mut TopK) {
        let dim = self.dim;
        let start = rows.start;
        let block = &self.matrix[rows.start * dim..rows.end * dim];
        let margin = fast_dot_margin(dim);
        for (offset, row) in block.chunks_exact(dim).enumerate() {
            // a row whose score provably stays below the current k-th best
            // cannot enter; skip the exact computation
            if let Some(worst) = top.worst_score() {
                if (fast_dot(q, row) as f64) + margin < worst {
                    continue;
                }
            }
            let i = start + offset;
            top.offer(dot(q, row), self.rows[i].item_id, i as u32);
        }
    }

    fn finish(&self, top: TopK) -> RankedHits {
        let entries = top
            .into_sorted()
            .into_iter()
            .map(|c| {
                let meta = &self.rows[c.row as usize];
                Hit {
                    item_id: meta.item_id,
                    class_id: meta.class_id,
                    provenance: meta.provenance,
                    score: c.score,
                }
            })
            .collect();
        RankedHits { entries }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    item_id: u64,
    row: u32,
}

impl Candidate {
    /// `Greater` means ranked earlier: higher score, then smaller id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.item_id.cmp(&self.item_id))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Bounded min-heap keeping the k best candidates seen so far.
struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Candidate>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    fn offer(&mut self, score: f64, item_id: u64, row: u32) {
        if self.heap.len() < self.k {
            self.heap.push(Reverse(Candidate { score, item_id, row }));
            return;
        }
        let worst = &self.heap.peek().expect("k >= 1").0;
        if score < worst.score {
            return;
        }
        let cand = Candidate { score, item_id, row };
        if cand > *worst {
            self.heap.pop();
            self.heap.push(Reverse(cand));
        }
    }

    /// Score of the k-th best candidate once k have been seen.
    #[inline]
    fn worst_score(&self) -> Option<f64> {
        if self.heap.len() < self.k {
            return None;
        }
        self.heap.peek().map(|c| c.0.score)
    }

    fn merge(mut self, other: TopK) -> TopK {
        for Reverse(c) in other.heap {
            self.offer(c.score, c.item_id, c.row);
        }
        self
    }

    fn into_sorted(self) -> Vec<Candidate> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::LabelCatalog;
    use crate::embedding::normalize;
    use crate::library::ReferenceItem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snapshot(vectors: &[(u64, Vec<f32>)]) -> LibrarySnapshot {
        let catalog = LabelCatalog::new(["a", "b"]).unwrap();
        let items = vectors
            .iter()
            .map(|(id, v)| {
                ReferenceItem::new(*id, normalize(v).unwrap(), Some((*id % 2) as u16), Provenance::Base, "t")
            })
            .collect();
        LibrarySnapshot::new(0, vectors[0].1.len(), catalog, items).unwrap()
    }

    fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> LibrarySnapshot {
        let vectors: Vec<(u64, Vec<f32>)> = (0..n)
            .map(|i| (i as u64 * 3 + 1, (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect();
        snapshot(&vectors)
    }

    #[test]
    fn rows_match_items() {
        let s = snapshot(&[(5, vec![1.0, 0.0, 0.0]), (2, vec![0.0, 1.0, 1.0]), (9, vec![1.0, 1.0, 1.0])]);
        let idx = build_index(&s).unwrap();
        assert_eq!(idx.len(), 3);
        for (i, item) in s.items().iter().enumerate() {
            assert_eq!(idx.row(i), item.embedding.values());
            assert_eq!(idx.row_meta(i).item_id, item.item_id);
        }
    }

    #[test]
    fn empty_library_is_rejected() {
        let s = LibrarySnapshot::empty(4, LabelCatalog::empty()).unwrap();
        assert!(matches!(build_index(&s), Err(Error::EmptyLibrary)));
    }

    #[test]
    fn orthogonal_basis() {
        let s = snapshot(&[(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]);
        let idx = build_index(&s).unwrap();
        let q = normalize(&[1.0, 0.0]).unwrap();
        let hits = idx.search(&q, 2).unwrap();
        assert_eq!(hits.ids(), vec![1, 2]);
        assert_eq!(hits.entries[0].score, 1.0);
        assert_eq!(hits.entries[1].score, 0.0);
    }

    #[test]
    fn ties_break_by_smaller_id_and_k_larger_than_n() {
        let s = snapshot(&[(9, vec![1.0, 0.0]), (4, vec![1.0, 0.0]), (6, vec![0.0, 1.0])]);
        let idx = build_index(&s).unwrap();
        let q = normalize(&[1.0, 0.0]).unwrap();
        let hits = idx.search(&q, 10).unwrap();
        assert_eq!(hits.ids(), vec![4, 9, 6]);
        assert_eq!(idx.search(&q, 1).unwrap().ids(), vec![4]);
    }

    #[test]
    fn query_errors() {
        let s = snapshot(&[(1, vec![1.0, 0.0])]);
        let idx = build_index(&s).unwrap();
        let wrong_dim = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(idx.search(&wrong_dim, 1), Err(Error::DimMismatch { .. })));
        let q = normalize(&[1.0, 0.0]).unwrap();
        assert!(matches!(idx.search(&q, 0), Err(Error::ZeroK)));
        let raw = Embedding::raw(vec![2.0, 0.0]).unwrap();
        assert!(matches!(idx.search(&raw, 1), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn self_match_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_snapshot(&mut rng, 200, 32);
        let idx = build_index(&s).unwrap();
        for item in s.items().iter().step_by(17) {
            let hits = idx.search(&item.embedding, 3).unwrap();
            assert_eq!(hits.entries[0].item_id, item.item_id);
            assert!((hits.entries[0].score - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn parallel_and_batch_match_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_snapshot(&mut rng, 20_000, 16);
        let idx = build_index(&s).unwrap();
        let queries: Vec<Embedding> = (0..64)
            .map(|_| normalize(&(0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let batch = idx.batch_search(&queries, 7);
        for (q, b) in queries.iter().zip(batch) {
            let seq = idx.search(q, 7).unwrap();
            assert_eq!(b.unwrap(), seq);
            assert_eq!(idx.par_search(q, 7).unwrap(), seq);
        }
    }

    #[test]
    fn batch_reports_errors_per_position() {
        let s = snapshot(&[(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0])]);
        let idx = build_index(&s).unwrap();
        let good = normalize(&[1.0, 1.0]).unwrap();
        let bad = normalize(&[1.0, 1.0, 1.0]).unwrap();
        let out = idx.batch_search(&[good.clone(), bad, good], 1);
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(Error::DimMismatch { .. })));
        assert!(out[2].is_ok());
    }

    #[test]
    fn from_packed_validates() {
        let rows = vec![
            RowMeta { item_id: 1, class_id: None, provenance: Provenance::Base },
            RowMeta { item_id: 1, class_id: None, provenance: Provenance::Base },
        ];
        let m = vec![1.0, 0.0, 0.0, 1.0];
        assert!(matches!(VectorIndex::from_packed(0, 2, m.clone(), rows), Err(Error::IdCollision(1))));
        let rows = vec![RowMeta { item_id: 1, class_id: None, provenance: Provenance::Base }];
        assert!(matches!(VectorIndex::from_packed(0, 2, vec![2.0, 0.0], rows.clone()), Err(Error::NotNormalized(_))));
        assert!(matches!(VectorIndex::from_packed(0, 2, m, rows), Err(Error::DimMismatch { .. })));
    }
}
