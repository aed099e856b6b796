//! Similarity retrieval of error-related candidates.
//!
//! `find_sim` unions each source's cosine top-k over a pool and records which
//! sources selected each item. Hierarchical retrieval runs it twice: over
//! document abstracts (via the inverted-file index) and then over the
//! paragraphs of the selected documents.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use fixedbitset::FixedBitSet;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::CallCharge;
use crate::corpus::{sample_uniform_active, Corpus, DocIdx, KnowledgeBaseView, ParaIdx};
use crate::embedding::{EmbedError, Embedder, Embedding, EmbeddingCache, EmbeddingConfig};
use crate::index::AbstractIndex;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("no candidate documents: the error neighborhood is exhausted")]
    NeighborhoodExhausted,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Per-source paragraph top-k.
    pub k: usize,
    /// Per-source document top-k.
    pub k_doc: usize,
    pub batch_size: usize,
    pub n_probe: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 50,
            k_doc: 10,
            batch_size: 40,
            n_probe: 4,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("k", self.k),
            ("k_doc", self.k_doc),
            ("batch_size", self.batch_size),
            ("n_probe", self.n_probe),
        ] {
            if v == 0 {
                return Err(format!("retrieval.{name} must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<I = ParaIdx> {
    pub id: I,
    pub best_similarity: f64,
    /// Sources whose top-k contained this item, ascending.
    pub provenance: Vec<ParaIdx>,
}

/// Candidates ordered by ascending id.
pub type CandidateSet<I = ParaIdx> = Vec<Candidate<I>>;

fn rank_cmp<I: Ord>(a: &(I, f64), b: &(I, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Top-`k` of `pool` by cosine similarity to `query`, descending similarity
/// then ascending id.
pub fn top_k<I: Copy + Ord>(
    pool: &[(I, &Embedding)],
    query: &Embedding,
    k: usize,
) -> Vec<(I, f64)> {
    let mut scored: Vec<(I, f64)> = pool.iter().map(|(id, v)| (*id, v.cosine(query))).collect();
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_cmp);
        scored.truncate(k);
    }
    scored.sort_by(rank_cmp);
    scored
}

/// Union over sources of each source's top-`k` in `pool`.
pub fn find_sim<I>(
    pool: &[(I, &Embedding)],
    sources: &[(ParaIdx, &Embedding)],
    k: usize,
) -> CandidateSet<I>
where
    I: Copy + Ord + Send + Sync,
{
    let per_source: Vec<Vec<(I, f64)>> =
        sources.par_iter().map(|(_, q)| top_k(pool, q, k)).collect();
    let mut merged: BTreeMap<I, Candidate<I>> = BTreeMap::new();
    for ((source, _), hits) in sources.iter().zip(per_source) {
        for (id, sim) in hits {
            let entry = merged.entry(id).or_insert_with(|| Candidate {
                id,
                best_similarity: sim,
                provenance: Vec::new(),
            });
            entry.best_similarity = entry.best_similarity.max(sim);
            entry.provenance.push(*source);
        }
    }
    merged
        .into_values()
        .map(|mut c| {
            c.provenance.sort_unstable();
            c.provenance.dedup();
            c
        })
        .collect()
}

/// What a paragraph must satisfy to be retrieved: active and not yet evaluated.
pub struct Eligibility<'a> {
    pub view: &'a KnowledgeBaseView,
    pub evaluated: &'a FixedBitSet,
}

impl Eligibility<'_> {
    pub fn allows(&self, p: ParaIdx) -> bool {
        self.view.is_active(p) && !self.evaluated.contains(p.get())
    }

    fn doc_has_any(&self, corpus: &Corpus, doc: DocIdx) -> bool {
        corpus.doc_paragraphs(doc).iter().any(|p| self.allows(*p))
    }
}

/// Output of [`hierarchical_retrieve`].
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub candidates: CandidateSet,
    /// Documents selected by the abstract stage, ascending.
    pub documents: Vec<DocIdx>,
    pub charges: Vec<CallCharge>,
}

/// Where the document stage looks abstracts up.
pub enum DocumentSearch<'a> {
    Index {
        index: &'a AbstractIndex,
        n_probe: usize,
    },
    /// Exact search over precomputed abstract embeddings (by document index).
    Flat(&'a [Embedding]),
}

/// Two-stage retrieval: abstracts first, then paragraphs of the chosen
/// documents. Documents with no eligible paragraph left are skipped in the
/// abstract ranking, and ineligible paragraphs never enter the pool.
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_retrieve(
    corpus: &Corpus,
    eligible: &Eligibility<'_>,
    search: &DocumentSearch<'_>,
    cache: &EmbeddingCache,
    embedder: &dyn Embedder,
    embed_cfg: &EmbeddingConfig,
    sources: &[(ParaIdx, Arc<Embedding>)],
    cfg: &RetrievalConfig,
) -> Result<Retrieved, RetrievalError> {
    let src: Vec<(ParaIdx, &Embedding)> = sources.iter().map(|(p, e)| (*p, e.as_ref())).collect();
    let documents: Vec<DocIdx> = match search {
        DocumentSearch::Index { index, n_probe } => {
            let per_source: Vec<Vec<(String, f64)>> = src
                .par_iter()
                .map(|(_, q)| {
                    index.query_filtered(q, cfg.k_doc, *n_probe, |doc_id| {
                        corpus
                            .doc_idx(doc_id)
                            .is_some_and(|d| eligible.doc_has_any(corpus, d))
                    })
                })
                .collect();
            let mut docs: Vec<DocIdx> = per_source
                .into_iter()
                .flatten()
                .filter_map(|(id, _)| corpus.doc_idx(&id))
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            docs.sort_unstable();
            docs
        }
        DocumentSearch::Flat(abstracts) => {
            let pool: Vec<(DocIdx, &Embedding)> = abstracts
                .iter()
                .enumerate()
                .map(|(i, e)| (DocIdx(i as u32), e))
                .filter(|(d, _)| eligible.doc_has_any(corpus, *d))
                .collect();
            find_sim(&pool, &src, cfg.k_doc)
                .into_iter()
                .map(|c| c.id)
                .collect()
        }
    };
    if documents.is_empty() {
        return Err(RetrievalError::NeighborhoodExhausted);
    }
    let paras: Vec<ParaIdx> = documents
        .iter()
        .flat_map(|d| corpus.doc_paragraphs(*d).iter().copied())
        .filter(|p| eligible.allows(*p))
        .collect();
    let (vectors, charges) = cache.get_many(corpus, &paras, embedder, embed_cfg)?;
    let pool: Vec<(ParaIdx, &Embedding)> = paras
        .iter()
        .copied()
        .zip(vectors.iter().map(|v| v.as_ref()))
        .collect();
    Ok(Retrieved {
        candidates: find_sim(&pool, &src, cfg.k),
        documents,
        charges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub para: ParaIdx,
    /// Drawn uniformly instead of from the retrieved candidates.
    pub fallback: bool,
    pub provenance: Vec<ParaIdx>,
}

/// Subsample `batch_size` candidates uniformly; fill any shortfall with
/// uniformly drawn eligible paragraphs outside the candidate set. An empty
/// result means nothing eligible remains.
pub fn assemble_batch<R: Rng>(
    corpus: &Corpus,
    eligible: &Eligibility<'_>,
    cands: &CandidateSet,
    batch_size: usize,
    rng: &mut R,
) -> Vec<BatchEntry> {
    let take = batch_size.min(cands.len());
    let mut picked: Vec<usize> = index::sample(rng, cands.len(), take).into_vec();
    picked.sort_unstable();
    let mut batch: Vec<BatchEntry> = picked
        .into_iter()
        .map(|i| BatchEntry {
            para: cands[i].id,
            fallback: false,
            provenance: cands[i].provenance.clone(),
        })
        .collect();
    if batch.len() < batch_size {
        let mut exclude = eligible.evaluated.clone();
        exclude.grow(corpus.len());
        for c in cands {
            exclude.insert(c.id.get());
        }
        let mut fill = sample_uniform_active(
            corpus,
            eligible.view,
            &exclude,
            batch_size - batch.len(),
            rng,
        );
        fill.sort_unstable();
        batch.extend(fill.into_iter().map(|para| BatchEntry {
            para,
            fallback: true,
            provenance: Vec::new(),
        }));
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn self_match_k1() {
        let items = [e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[1.0, 1.0])];
        let pool: Vec<(u32, &Embedding)> = items
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32, v))
            .collect();
        let src = e(&[0.0, 1.0]);
        let got = find_sim(&pool, &[(ParaIdx(99), &src)], 1);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, 1);
        assert!((got[0].best_similarity - 1.0).abs() < 1e-9);
        assert_eq!(got[0].provenance, vec![ParaIdx(99)]);
    }

    #[test]
    fn disjoint_sources_union() {
        let items: Vec<Embedding> = (0..6)
            .map(|i| {
                if i < 3 {
                    e(&[1.0, 0.01 * i as f32])
                } else {
                    e(&[0.01 * i as f32, -1.0])
                }
            })
            .collect();
        let pool: Vec<(u32, &Embedding)> = items
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32, v))
            .collect();
        let a = e(&[1.0, 0.0]);
        let b = e(&[0.0, -1.0]);
        let got = find_sim(&pool, &[(ParaIdx(0), &a), (ParaIdx(1), &b)], 3);
        assert_eq!(got.len(), 6);
        assert!(got.iter().all(|c| c.provenance.len() == 1));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let items = [e(&[1.0, 0.0]), e(&[1.0, 0.0]), e(&[1.0, 0.0])];
        let pool: Vec<(u32, &Embedding)> = vec![(7, &items[0]), (3, &items[1]), (5, &items[2])];
        let got = top_k(&pool, &e(&[1.0, 0.0]), 2);
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 5]);
    }

    #[test]
    fn k_covering_pool_returns_everything() {
        let items: Vec<Embedding> = (0..10).map(|i| e(&[1.0, i as f32])).collect();
        let pool: Vec<(u32, &Embedding)> = items
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32, v))
            .collect();
        let got = find_sim(&pool, &[(ParaIdx(0), &items[0])], 10);
        assert_eq!(got.len(), 10);
    }

    #[test]
    fn empty_pool_yields_empty_set() {
        let pool: Vec<(u32, &Embedding)> = Vec::new();
        let s = e(&[1.0]);
        assert!(find_sim(&pool, &[(ParaIdx(0), &s)], 5).is_empty());
    }

    fn tiny_corpus(n: usize) -> Corpus {
        use crate::corpus::{Document, Paragraph};
        let entries = (0..n)
            .map(|i| {
                let doc_id = format!("d{i:03}");
                let para_id = format!("{doc_id}#0000");
                (
                    Document {
                        doc_id: doc_id.clone(),
                        title: doc_id.clone(),
                        abstract_text: "a".into(),
                        categories: vec!["c".into()],
                        paragraph_ids: vec![para_id.clone()],
                    },
                    vec![Paragraph {
                        para_id,
                        doc_id,
                        section_path: vec![],
                        text: "t".into(),
                        category: "c".into(),
                    }],
                )
            })
            .collect();
        Corpus::from_parts(entries)
    }

    fn cands(ids: impl Iterator<Item = u32>) -> CandidateSet {
        ids.map(|i| Candidate {
            id: ParaIdx(i),
            best_similarity: 0.5,
            provenance: vec![],
        })
        .collect()
    }

    #[test]
    fn batch_takes_all_when_exact() {
        let corpus = tiny_corpus(100);
        let view = KnowledgeBaseView::new(&corpus);
        let evaluated = FixedBitSet::with_capacity(100);
        let el = Eligibility {
            view: &view,
            evaluated: &evaluated,
        };
        let c = cands(0..40);
        let b = assemble_batch(&corpus, &el, &c, 40, &mut rng_for(1, &[]));
        assert_eq!(b.len(), 40);
        assert!(b.iter().all(|x| !x.fallback));
    }

    #[test]
    fn batch_subsample_is_reproducible() {
        let corpus = tiny_corpus(300);
        let view = KnowledgeBaseView::new(&corpus);
        let evaluated = FixedBitSet::with_capacity(300);
        let el = Eligibility {
            view: &view,
            evaluated: &evaluated,
        };
        let c = cands(0..200);
        let a = assemble_batch(&corpus, &el, &c, 40, &mut rng_for(5, &[]));
        let b = assemble_batch(&corpus, &el, &c, 40, &mut rng_for(5, &[]));
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn shortfall_is_filled_and_flagged() {
        let corpus = tiny_corpus(100);
        let view = KnowledgeBaseView::new(&corpus);
        let evaluated = FixedBitSet::with_capacity(100);
        let el = Eligibility {
            view: &view,
            evaluated: &evaluated,
        };
        let c = cands(0..10);
        let b = assemble_batch(&corpus, &el, &c, 40, &mut rng_for(2, &[]));
        assert_eq!(b.len(), 40);
        assert_eq!(b.iter().filter(|x| !x.fallback).count(), 10);
        assert_eq!(b.iter().filter(|x| x.fallback).count(), 30);
        let mut ids: Vec<_> = b.iter().map(|x| x.para).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn exhausted_corpus_gives_empty_batch() {
        let corpus = tiny_corpus(5);
        let mut view = KnowledgeBaseView::new(&corpus);
        view.remove(&(0..5).map(ParaIdx).collect::<Vec<_>>());
        let evaluated = FixedBitSet::with_capacity(5);
        let el = Eligibility {
            view: &view,
            evaluated: &evaluated,
        };
        assert!(assemble_batch(&corpus, &el, &Vec::new(), 40, &mut rng_for(2, &[])).is_empty());
    }
}
