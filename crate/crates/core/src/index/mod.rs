//! Exact cosine top-k over unit-normalized preQ embeddings.
//!
//! Entries keep the pool's canonical order; equal scores rank by that
//! order. The scan splits entries into fixed blocks, keeps each block's
//! best `k` under the same total order, and merges, so parallel and
//! sequential scans return identical lists.

pub mod codec;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::EmbeddingVector;
use crate::preq::RetrievalPool;

pub const VECTORS_FILE: &str = "vectors.bin";
pub const IDS_FILE: &str = "ids.txt";

const SCAN_BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub preq_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorIndex {
    dimension: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    lookup: HashMap<String, usize>,
}

/// Cosine similarity of two unit vectors, accumulated in `f64`. A zero
/// result is always `+0.0`, so `total_cmp` sees every zero as one score.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum::<f64>() + 0.0
}

/// Best first; ties by lower position.
#[inline]
fn hit_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn keep_best(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if cands.len() > k {
        cands.select_nth_unstable_by(k, hit_order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(hit_order);
    cands
}

impl VectorIndex {
    /// Indexes every embedded preQ of `pool`, re-normalizing each vector.
    pub fn build(pool: &RetrievalPool) -> Result<Self> {
        let mut dimension = 0;
        let mut ids = Vec::with_capacity(pool.len());
        let mut data = Vec::new();
        for q in pool.preqs() {
            let emb = q
                .embedding
                .as_ref()
                .ok_or_else(|| Error::MissingEmbedding(q.id.clone()))?;
            if ids.is_empty() {
                dimension = emb.dimension();
                data.reserve(dimension * pool.len());
            } else if emb.dimension() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: emb.dimension(),
                });
            }
            let unit = EmbeddingVector::normalized(emb.values().to_vec())?;
            data.extend_from_slice(unit.values());
            ids.push(q.id.clone());
        }
        Self::from_parts(dimension, ids, data)
    }

    fn from_parts(dimension: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidCorpus(format!("duplicate index id `{id}`")));
            }
        }
        Ok(VectorIndex {
            dimension,
            ids,
            data,
            lookup,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.dimension..(pos + 1) * self.dimension]
    }

    /// A new index over the entries whose id passes `keep`, order preserved.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> VectorIndex {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            if keep(id) {
                ids.push(id.clone());
                data.extend_from_slice(self.vector(i));
            }
        }
        let dimension = if ids.is_empty() { 0 } else { self.dimension };
        Self::from_parts(dimension, ids, data).expect("subset ids are unique")
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<()> {
        if !self.is_empty() && query.dimension() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: query.dimension(),
            });
        }
        Ok(())
    }

    fn scan_block(&self, query: &[f32], block: usize, k: usize) -> Vec<(f64, usize)> {
        let start = block * SCAN_BLOCK;
        let end = (start + SCAN_BLOCK).min(self.len());
        let cands = (start..end).map(|i| (dot(self.vector(i), query), i)).collect();
        keep_best(cands, k)
    }

    fn to_hits(&self, best: Vec<(f64, usize)>) -> Vec<ScoredHit> {
        best.into_iter()
            .enumerate()
            .map(|(r, (score, pos))| ScoredHit {
                preq_id: self.ids[pos].clone(),
                score,
                rank: r + 1,
            })
            .collect()
    }

    /// The `min(k, len)` entries most similar to `query`, best first.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredHit>> {
        self.check_query(query)?;
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let blocks = self.len().div_ceil(SCAN_BLOCK);
        let per_block = crate::par::map_range(blocks, |b| self.scan_block(query.values(), b, k));
        Ok(self.to_hits(keep_best(per_block.concat(), k)))
    }

    /// Single-threaded scan, regardless of features.
    pub fn top_k_sequential(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredHit>> {
        self.check_query(query)?;
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let blocks = self.len().div_ceil(SCAN_BLOCK);
        let per_block: Vec<_> = (0..blocks).map(|b| self.scan_block(query.values(), b, k)).collect();
        Ok(self.to_hits(keep_best(per_block.concat(), k)))
    }

    /// Writes `vectors.bin` and `ids.txt` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        codec::write_vectors(&dir.join(VECTORS_FILE), self.dimension, &self.data)?;
        let path = dir.join(IDS_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for id in &self.ids {
            writeln!(out, "{id}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vectors = dir.join(VECTORS_FILE);
        let ids_path = dir.join(IDS_FILE);
        if !vectors.exists() || !ids_path.exists() {
            return Err(Error::MissingArtifact {
                artifact: "index",
                command: "index",
            });
        }
        let (dimension, data) = codec::read_vectors(&vectors)?;
        let file = File::open(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<String>>>()
            .map_err(|e| Error::io(&ids_path, e))?;
        let count = data.len().checked_div(dimension).unwrap_or(0);
        if ids.len() != count {
            return Err(Error::CorruptIndex {
                path: ids_path,
                message: format!("{} ids for {count} vectors", ids.len()),
            });
        }
        Self::from_parts(dimension, ids, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preq::{Modality, PreQ};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pool_of(vectors: &[Vec<f32>]) -> RetrievalPool {
        let preqs = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| PreQ {
                id: format!("q{i}"),
                text: format!("q{i}"),
                modality: Modality::T,
                source_passage_id: format!("p{}", i % 3),
                source_component_id: None,
                embedding: Some(EmbeddingVector::normalized(v.clone()).unwrap()),
            })
            .collect();
        RetrievalPool::from_preqs(preqs).unwrap()
    }

    fn unit(v: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::normalized(v).unwrap()
    }

    /// Exhaustive scan: score every entry, sort by (score desc, position asc).
    fn oracle(index: &VectorIndex, q: &[f32], k: usize) -> Vec<String> {
        let mut all: Vec<(f64, usize)> = (0..index.len())
            .map(|i| {
                let mut s = 0f64;
                for (a, b) in index.vector(i).iter().zip(q) {
                    s += f64::from(*a) * f64::from(*b);
                }
                (s, i)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| index.ids()[i].clone()).collect()
    }

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    #[test]
    fn orthonormal_basis() {
        let idx = VectorIndex::build(&pool_of(&[vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]])).unwrap();
        assert_eq!(idx.len(), 3);
        let hits = idx.top_k(&unit(vec![0., 1., 0.]), 1).unwrap();
        assert_eq!(
            hits,
            vec![ScoredHit {
                preq_id: "q1".into(),
                score: 1.0,
                rank: 1
            }]
        );
    }

    #[test]
    fn random_index_matches_full_scan() {
        let vs = random_vectors(200, 16, 7);
        let idx = VectorIndex::build(&pool_of(&vs)).unwrap();
        let q = unit(random_vectors(1, 16, 99).remove(0));
        let got: Vec<_> = idx.top_k(&q, 10).unwrap().into_iter().map(|h| h.preq_id).collect();
        assert_eq!(got, oracle(&idx, q.values(), 10));
    }

    #[test]
    fn identical_vectors_tie_by_position() {
        let idx = VectorIndex::build(&pool_of(&[vec![0., 1.], vec![1., 0.], vec![1., 0.]])).unwrap();
        let hits = idx.top_k(&unit(vec![1., 0.]), 2).unwrap();
        assert_eq!(hits[0].preq_id, "q1");
        assert_eq!(hits[1].preq_id, "q2");
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn missing_embedding_is_named() {
        let mut preqs = pool_of(&[vec![1., 0.]]).preqs().to_vec();
        preqs.push(PreQ {
            embedding: None,
            id: "bare".into(),
            ..preqs[0].clone()
        });
        let pool = RetrievalPool::from_preqs(preqs).unwrap();
        assert!(matches!(VectorIndex::build(&pool), Err(Error::MissingEmbedding(id)) if id == "bare"));
    }

    #[test]
    fn empty_index_is_searchable() {
        let idx = VectorIndex::build(&RetrievalPool::default()).unwrap();
        assert!(idx.top_k(&unit(vec![1.0, 2.0]), 5).unwrap().is_empty());
    }

    #[test]
    fn query_dimension_is_checked() {
        let idx = VectorIndex::build(&pool_of(&[vec![1., 0.]])).unwrap();
        assert!(matches!(
            idx.top_k(&unit(vec![1., 0., 0.]), 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = VectorIndex::build(&pool_of(&random_vectors(3, 5, 1))).unwrap();
        idx.persist(dir.path()).unwrap();
        assert_eq!(VectorIndex::load(dir.path()).unwrap(), idx);

        let empty = VectorIndex::build(&RetrievalPool::default()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        empty.persist(dir2.path()).unwrap();
        assert!(VectorIndex::load(dir2.path()).unwrap().is_empty());
    }

    #[test]
    fn truncated_index_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        VectorIndex::build(&pool_of(&random_vectors(3, 5, 1)))
            .unwrap()
            .persist(dir.path())
            .unwrap();
        let path = dir.path().join(VECTORS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(VectorIndex::load(dir.path()).is_err());

        let dir = tempfile::tempdir().unwrap();
        VectorIndex::build(&pool_of(&random_vectors(3, 5, 1)))
            .unwrap()
            .persist(dir.path())
            .unwrap();
        std::fs::write(dir.path().join(IDS_FILE), "q0\nq1\n").unwrap();
        assert!(matches!(VectorIndex::load(dir.path()), Err(Error::CorruptIndex { .. })));
    }

    #[test]
    fn load_without_files_names_index_command() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            VectorIndex::load(dir.path()).unwrap_err().to_string(),
            "index not found; run index"
        );
    }

    #[test]
    fn multi_block_scan_agrees_with_sequential() {
        let vs = random_vectors(SCAN_BLOCK * 2 + 17, 8, 3);
        let idx = VectorIndex::build(&pool_of(&vs)).unwrap();
        let q = unit(random_vectors(1, 8, 4).remove(0));
        assert_eq!(idx.top_k(&q, 50).unwrap(), idx.top_k_sequential(&q, 50).unwrap());
        assert_eq!(
            idx.top_k(&q, 50)
                .unwrap()
                .into_iter()
                .map(|h| h.preq_id)
                .collect::<Vec<_>>(),
            oracle(&idx, q.values(), 50)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn top_k_matches_oracle(n in 1usize..300, d in 1usize..32, k in 1usize..40, seed in any::<u64>(), dupes in 0usize..4) {
            let mut vs = random_vectors(n, d, seed);
            for i in 0..dupes.min(n - 1) {
                vs[i + 1] = vs[0].clone();
            }
            let idx = VectorIndex::build(&pool_of(&vs)).unwrap();
            let q = unit(random_vectors(1, d, seed ^ 0xabc).remove(0));
            let hits = idx.top_k(&q, k).unwrap();
            prop_assert_eq!(hits.len(), k.min(n));
            prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(hits.iter().enumerate().all(|(i, h)| h.rank == i + 1));
            prop_assert_eq!(hits.iter().map(|h| h.preq_id.clone()).collect::<Vec<_>>(), oracle(&idx, q.values(), k));

            let longer = idx.top_k(&q, k + 1).unwrap();
            prop_assert_eq!(&longer[..hits.len()], &hits[..]);

            let all = idx.top_k(&q, n).unwrap();
            let mut ids: Vec<_> = all.into_iter().map(|h| h.preq_id).collect();
            ids.sort();
            let mut expected = idx.ids().to_vec();
            expected.sort();
            prop_assert_eq!(ids, expected);
        }
    }
}
