//! Second-stage re-ranking by counting thresholded mutual nearest neighbours
//! between the query's local features and each candidate's.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::LocalFeature;
use crate::linalg::{self, ColumnBlock};
use crate::ranker::RankedList;

#[derive(Debug, Error, PartialEq)]
pub enum RerankError {
    #[error("descriptor pool is empty")]
    EmptyPool,
    #[error("descriptor dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("candidate {position} is gallery index {candidate}, first stage has {first_stage:?}")]
    CandidateMismatch {
        position: usize,
        candidate: usize,
        first_stage: Option<usize>,
    },
    #[error("{candidates} candidates supplied for {first_stage} first-stage entries")]
    CandidateCount { candidates: usize, first_stage: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub query_idx: usize,
    pub cand_idx: usize,
    pub similarity: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankEntry {
    pub gallery_index: usize,
    pub mnn_count: usize,
    /// Zero-based position in the first-stage list.
    pub first_stage_rank: usize,
    pub first_stage_similarity: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub order: Vec<RerankEntry>,
    /// Matched pairs per entry of `order`, when retention was requested.
    pub pairs: Option<Vec<Vec<MatchPair>>>,
}

/// Index of the pool vector with the largest dot product against
/// `descriptor`; the lowest index wins ties.
pub fn nearest(descriptor: &[f32], pool: &[&[f32]]) -> Result<(usize, f32), RerankError> {
    let mut best: Option<(usize, f32)> = None;
    for (i, v) in pool.iter().enumerate() {
        if v.len() != descriptor.len() {
            return Err(RerankError::DimensionMismatch {
                expected: descriptor.len(),
                found: v.len(),
            });
        }
        let s = linalg::dot(descriptor, v);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.ok_or(RerankError::EmptyPool)
}

fn check_dims(set: &[LocalFeature], d: usize) -> Result<(), RerankError> {
    match set.iter().find(|f| f.descriptor.len() != d) {
        Some(f) => Err(RerankError::DimensionMismatch {
            expected: d,
            found: f.descriptor.len(),
        }),
        None => Ok(()),
    }
}

/// Pairs `(i, j)` where `b[j]` is the nearest neighbour of `a[i]` in `b`,
/// `a[i]` is the nearest neighbour of `b[j]` in `a`, and `a[i]·b[j] > t2`.
/// Returned in ascending `i`.
///
/// The similarity matrix is computed once; both nearest-neighbour
/// directions are read from it.
pub fn mnn_pairs(
    a: &[LocalFeature],
    b: &[LocalFeature],
    t2: f32,
) -> Result<Vec<MatchPair>, RerankError> {
    let (Some(first_a), Some(_)) = (a.first(), b.first()) else {
        return Ok(Vec::new());
    };
    let d = first_a.descriptor.len();
    check_dims(a, d)?;
    check_dims(b, d)?;

    let (na, nb) = (a.len(), b.len());
    let mut row_best = vec![(0usize, f32::NEG_INFINITY); na];
    let mut col_best = vec![0usize; nb];
    let mut col_val = vec![f32::NEG_INFINITY; nb];
    let mut row = vec![0.0f32; nb];
    let mut block = ColumnBlock::new(b.iter().map(|f| f.descriptor.as_slice()), d);
    for (i, fa) in a.iter().enumerate() {
        block.dots(&fa.descriptor, &mut row);
        let mut best = (0, f32::NEG_INFINITY);
        for (j, &s) in row.iter().enumerate() {
            if s > best.1 {
                best = (j, s);
            }
            // Rows are visited in ascending i, so strict ">" keeps the
            // lowest index on ties.
            if s > col_val[j] {
                col_val[j] = s;
                col_best[j] = i;
            }
        }
        row_best[i] = best;
    }

    Ok(row_best
        .iter()
        .enumerate()
        .filter_map(|(i, &(j, s))| {
            (col_best[j] == i && s > t2).then_some(MatchPair {
                query_idx: i,
                cand_idx: j,
                similarity: s,
            })
        })
        .collect())
}

/// A first-stage candidate and its local features.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub gallery_index: usize,
    pub locals: &'a [LocalFeature],
}

/// Reorders the first-stage candidates by MNN count, descending. Equal
/// counts keep their first-stage order.
pub fn rerank(
    query_locals: &[LocalFeature],
    candidates: &[Candidate<'_>],
    t2: f32,
    first_stage: &RankedList,
) -> Result<RerankResult, RerankError> {
    rerank_with(query_locals, candidates, t2, first_stage, false)
}

/// [`rerank`], optionally keeping each candidate's matched pairs.
pub fn rerank_with(
    query_locals: &[LocalFeature],
    candidates: &[Candidate<'_>],
    t2: f32,
    first_stage: &RankedList,
    retain_pairs: bool,
) -> Result<RerankResult, RerankError> {
    if candidates.len() != first_stage.len() {
        return Err(RerankError::CandidateCount {
            candidates: candidates.len(),
            first_stage: first_stage.len(),
        });
    }
    for (position, (c, e)) in candidates.iter().zip(&first_stage.entries).enumerate() {
        if c.gallery_index != e.gallery_index {
            return Err(RerankError::CandidateMismatch {
                position,
                candidate: c.gallery_index,
                first_stage: Some(e.gallery_index),
            });
        }
    }

    // Each candidate is independent; collect preserves candidate order.
    let matched: Vec<Vec<MatchPair>> = candidates
        .par_iter()
        .map(|c| mnn_pairs(query_locals, c.locals, t2))
        .collect::<Result<_, _>>()?;

    let mut ranked: Vec<(RerankEntry, Vec<MatchPair>)> = first_stage
        .entries
        .iter()
        .zip(matched)
        .enumerate()
        .map(|(rank, (e, pairs))| {
            (
                RerankEntry {
                    gallery_index: e.gallery_index,
                    mnn_count: pairs.len(),
                    first_stage_rank: rank,
                    first_stage_similarity: e.similarity,
                },
                pairs,
            )
        })
        .collect();
    ranked.sort_by_key(|(r, _)| std::cmp::Reverse(r.mnn_count));

    let (order, pairs): (Vec<_>, Vec<_>) = ranked.into_iter().unzip();
    Ok(RerankResult {
        order,
        pairs: retain_pairs.then_some(pairs),
    })
}
