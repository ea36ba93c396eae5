//! First-stage global retrieval: exact cosine top-k over the gallery's
//! global descriptors, plus an optional PCA projection used for
//! reduced-dimension comparisons.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{FeatureSet, ImageRecord};
use crate::linalg::{self, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("query has dimension {found}, gallery expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Error, PartialEq)]
pub enum PcaError {
    #[error("PCA needs at least two gallery records, got {0}")]
    TooFewRecords(usize),
    #[error("requested {requested} components but at most {max} are available")]
    TooManyComponents { requested: usize, max: usize },
    #[error("requested zero components")]
    ZeroComponents,
    #[error("gallery global descriptors have zero variance")]
    Degenerate,
    #[error("input has dimension {found}, projection expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("input projects to the zero vector")]
    ZeroProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub gallery_index: usize,
    pub similarity: f32,
}

/// Candidates in descending similarity, ties by ascending gallery index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.gallery_index)
    }

    /// The first `k` entries.
    pub fn truncated(&self, k: usize) -> RankedList {
        RankedList {
            entries: self.entries.iter().take(k).copied().collect(),
        }
    }
}

/// Descending similarity, then ascending index. `total_cmp` keeps the order
/// total even if a NaN slips through.
fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.gallery_index.cmp(&b.gallery_index))
}

/// Returns the `min(k, |gallery|)` gallery records with the largest dot
/// product against `query`.
pub fn rank(query: &[f32], gallery: &FeatureSet, k: usize) -> Result<RankedList, RankError> {
    rank_records(query, &gallery.records, gallery.d_g, k)
}

pub fn rank_records(
    query: &[f32],
    records: &[ImageRecord],
    d_g: usize,
    k: usize,
) -> Result<RankedList, RankError> {
    if k == 0 {
        return Err(RankError::ZeroK);
    }
    if records.is_empty() {
        return Err(RankError::EmptyGallery);
    }
    if query.len() != d_g {
        return Err(RankError::DimensionMismatch {
            expected: d_g,
            found: query.len(),
        });
    }
    let mut scored: Vec<RankedEntry> = records
        .iter()
        .enumerate()
        .map(|(gallery_index, r)| RankedEntry {
            gallery_index,
            similarity: linalg::dot(query, &r.global),
        })
        .collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    Ok(RankedList { entries: scored })
}

/// Mean-centred orthonormal projection onto the top principal directions of
/// the gallery's global descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f32>,
    /// `d_out × d_g`, orthonormal rows in descending eigenvalue order.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl PcaProjection {
    pub fn d_in(&self) -> usize {
        self.mean.len()
    }

    pub fn d_out(&self) -> usize {
        self.components.rows()
    }
}

const VARIANCE_EPS: f64 = 1e-12;

/// Fits a PCA projection on the gallery's global descriptors.
///
/// Components are sign-normalized so that the first coefficient with
/// magnitude above `1e-9` is positive, making the fit deterministic.
pub fn fit_pca(gallery: &FeatureSet, d_out: usize) -> Result<PcaProjection, PcaError> {
    let n = gallery.len();
    let d = gallery.d_g;
    if n < 2 {
        return Err(PcaError::TooFewRecords(n));
    }
    if d_out == 0 {
        return Err(PcaError::ZeroComponents);
    }
    let max = d.min(n);
    if d_out > max {
        return Err(PcaError::TooManyComponents {
            requested: d_out,
            max,
        });
    }

    let mut mean = vec![0.0f64; d];
    for r in &gallery.records {
        for (m, &x) in mean.iter_mut().zip(&r.global) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = vec![0.0f64; d];
    for r in &gallery.records {
        for ((c, &x), m) in centred.iter_mut().zip(&r.global).zip(&mean) {
            *c = x as f64 - m;
        }
        for i in 0..d {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centred[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.trace() <= VARIANCE_EPS {
        return Err(PcaError::Degenerate);
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = Matrix::zeros(d_out, d);
    let mut eigenvalues = Vec::with_capacity(d_out);
    for (row, &col) in order.iter().take(d_out).enumerate() {
        let v = eig.eigenvectors.column(col);
        let sign = v
            .iter()
            .find(|x| x.abs() > 1e-9)
            .map_or(1.0, |x| x.signum());
        for (j, &x) in v.iter().enumerate() {
            components.set(row, j, (sign * x) as f32);
        }
        eigenvalues.push(eig.eigenvalues[col].max(0.0));
    }
    Ok(PcaProjection {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        components,
        eigenvalues,
    })
}

/// `normalize(components · (v − mean))`.
pub fn project(p: &PcaProjection, v: &[f32]) -> Result<Vec<f32>, PcaError> {
    if v.len() != p.d_in() {
        return Err(PcaError::DimensionMismatch {
            expected: p.d_in(),
            found: v.len(),
        });
    }
    let centred: Vec<f64> = v
        .iter()
        .zip(&p.mean)
        .map(|(&x, &m)| x as f64 - m as f64)
        .collect();
    let out: Vec<f64> = p
        .components
        .iter_rows()
        .map(|row| row.iter().zip(&centred).map(|(&c, &x)| c as f64 * x).sum())
        .collect();
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= f64::EPSILON || !norm.is_finite() {
        return Err(PcaError::ZeroProjection);
    }
    Ok(out.into_iter().map(|x| (x / norm) as f32).collect())
}

/// Projects every global descriptor of `set`, keeping ids, geo-tags and
/// locals. Fails on the first record that projects to zero.
pub fn project_set(p: &PcaProjection, set: &FeatureSet) -> Result<FeatureSet, PcaError> {
    let mut out = FeatureSet::new(p.d_out(), set.d_l, set.geo_kind);
    out.records.reserve(set.len());
    for r in &set.records {
        out.records.push(ImageRecord {
            id: r.id.clone(),
            geo: r.geo,
            global: project(p, &r.global)?,
            locals: r.locals.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{GeoKind, GeoTag};

    fn gallery(vectors: &[Vec<f32>]) -> FeatureSet {
        let mut set = FeatureSet::new(vectors[0].len(), 1, GeoKind::None);
        for (i, v) in vectors.iter().enumerate() {
            set.records.push(ImageRecord {
                id: format!("r{i}"),
                geo: GeoTag::None,
                global: v.clone(),
                locals: vec![],
            });
        }
        set
    }

    #[test]
    fn self_match_first() {
        let g = gallery(&[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = rank(&[1.0, 0.0], &g, 3).unwrap();
        assert_eq!(r.entries[0].gallery_index, 1);
        assert!((r.entries[0].similarity - 1.0).abs() < 1e-5);
    }

    #[test]
    fn orthogonal_pair() {
        let g = gallery(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = rank(&[1.0, 0.0], &g, 5).unwrap();
        assert_eq!(r.indices().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(r.entries[0].similarity, 1.0);
        assert_eq!(r.entries[1].similarity, 0.0);
    }

    #[test]
    fn ties_by_index() {
        let g = gallery(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let r = rank(&[1.0, 0.0], &g, 3).unwrap();
        assert_eq!(r.indices().collect::<Vec<_>>(), vec![1, 3, 0]);
    }

    #[test]
    fn errors() {
        let g = gallery(&[vec![1.0, 0.0]]);
        assert_eq!(rank(&[1.0], &g, 1), Err(RankError::DimensionMismatch { expected: 2, found: 1 }));
        assert_eq!(rank(&[1.0, 0.0], &g, 0), Err(RankError::ZeroK));
        let empty = FeatureSet::new(2, 1, GeoKind::None);
        assert_eq!(rank(&[1.0, 0.0], &empty, 1), Err(RankError::EmptyGallery));
    }

    #[test]
    fn pca_recovers_line() {
        let dir = [1.0f32 / 3.0f32.sqrt(); 3];
        let pts: Vec<Vec<f32>> = (0..10)
            .map(|i| {
                let t = i as f32 - 4.5;
                vec![0.1 + t * dir[0], -0.2 + t * dir[1], 0.3 + t * dir[2]]
            })
            .collect();
        let p = fit_pca(&gallery(&pts), 1).unwrap();
        let c = p.components.row(0);
        let cos: f32 = c.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!(cos.abs() > 0.999);
        assert!(c[0] > 0.0);
    }

    #[test]
    fn pca_errors() {
        let g = gallery(&[vec![1.0, 0.0]]);
        assert_eq!(fit_pca(&g, 1), Err(PcaError::TooFewRecords(1)));
        let g = gallery(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(fit_pca(&g, 1), Err(PcaError::Degenerate));
        let g = gallery(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(fit_pca(&g, 3), Err(PcaError::TooManyComponents { .. })));
        let p = fit_pca(&g, 1).unwrap();
        assert_eq!(project(&p, &p.mean.clone()), Err(PcaError::ZeroProjection));
    }

    #[test]
    fn project_basis_and_antipodes() {
        let g = gallery(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.6, 0.8, 0.0],
        ]);
        let p = fit_pca(&g, 2).unwrap();
        let along: Vec<f32> = p
            .mean
            .iter()
            .zip(p.components.row(0))
            .map(|(m, c)| m + c)
            .collect();
        let e0 = project(&p, &along).unwrap();
        assert!((e0[0] - 1.0).abs() < 1e-4 && e0[1].abs() < 1e-4);

        let delta = [0.3f32, -0.1, 0.2];
        let plus: Vec<f32> = p.mean.iter().zip(&delta).map(|(m, d)| m + d).collect();
        let minus: Vec<f32> = p.mean.iter().zip(&delta).map(|(m, d)| m - d).collect();
        let (a, b) = (project(&p, &plus).unwrap(), project(&p, &minus).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y).abs() < 1e-4);
        }
    }
}
