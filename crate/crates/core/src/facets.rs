//! Self-attention facets of a single transformer layer.
//!
//! Given the tokens entering one attention block (row 0 is the `[CLS]`
//! token, rows `1..=p` are patches) and that block's Q/K/V projections, this
//! module computes the facet matrices, the head-averaged `[CLS]` attention
//! score map over patches, and the thresholded keypoint set whose Value rows
//! become local descriptors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::LocalFeature;
use crate::linalg::{self, Matrix};

/// Default keypoint-selection threshold on the score map.
pub const DEFAULT_T1: f32 = 0.05;
/// Default cosine-similarity threshold for counted matches.
pub const DEFAULT_T2: f32 = 0.65;

#[derive(Debug, Error, PartialEq)]
pub enum FacetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("softmax of an empty vector")]
    EmptyInput,
    #[error("token matrix needs a [CLS] row and at least one patch, got {0} rows")]
    TooFewTokens(usize),
    #[error("head count {heads} must be positive and divide the facet width {width}")]
    InvalidHeads { heads: usize, width: usize },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
}

/// Tokens entering an attention block: `(p + 1) × d_model`, `[CLS]` first.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(Matrix);

impl TokenMatrix {
    pub fn new(tokens: Matrix) -> Result<Self, FacetError> {
        if tokens.rows() < 2 {
            return Err(FacetError::TooFewTokens(tokens.rows()));
        }
        if !tokens.is_finite() {
            return Err(FacetError::NonFinite("token matrix"));
        }
        Ok(Self(tokens))
    }

    pub fn patches(&self) -> usize {
        self.0.rows() - 1
    }

    pub fn d_model(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Q/K/V projection weights (`d_model × d`) with optional biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    b_q: Vec<f32>,
    b_k: Vec<f32>,
    b_v: Vec<f32>,
    heads: usize,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, heads: usize) -> Result<Self, FacetError> {
        let d = w_q.cols();
        Self::with_biases(w_q, w_k, w_v, vec![0.0; d], vec![0.0; d], vec![0.0; d], heads)
    }

    pub fn with_biases(
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        b_q: Vec<f32>,
        b_k: Vec<f32>,
        b_v: Vec<f32>,
        heads: usize,
    ) -> Result<Self, FacetError> {
        let shape = (w_q.rows(), w_q.cols());
        for (name, w) in [("W_K", &w_k), ("W_V", &w_v)] {
            if (w.rows(), w.cols()) != shape {
                return Err(FacetError::DimensionMismatch(format!(
                    "{name} is {}x{}, W_Q is {}x{}",
                    w.rows(),
                    w.cols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        for (name, b) in [("b_Q", &b_q), ("b_K", &b_k), ("b_V", &b_v)] {
            if b.len() != shape.1 {
                return Err(FacetError::DimensionMismatch(format!(
                    "{name} has length {}, expected {}",
                    b.len(),
                    shape.1
                )));
            }
        }
        if heads == 0 || shape.1 == 0 || !shape.1.is_multiple_of(heads) {
            return Err(FacetError::InvalidHeads {
                heads,
                width: shape.1,
            });
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            b_q,
            b_k,
            b_v,
            heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Q, K and V of one layer, each `(p + 1) × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFacets {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub k_cls: Vec<f32>,
    pub heads: usize,
    /// Distance from the output layer; 1 is the penultimate layer.
    pub layer_offset: u32,
}

impl AttentionFacets {
    pub fn patches(&self) -> usize {
        self.q.rows().saturating_sub(1)
    }

    pub fn width(&self) -> usize {
        self.q.cols()
    }

    pub fn head_width(&self) -> usize {
        self.width() / self.heads
    }

    pub fn with_layer_offset(mut self, layer_offset: u32) -> Self {
        self.layer_offset = layer_offset;
        self
    }
}

/// Head-averaged `[CLS]` attention over the `p` patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub s: Vec<f32>,
}

/// Whether score-map logits are divided by `sqrt(d / h)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScaling {
    #[default]
    Scaled,
    Unscaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f32,
    pub t2: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t1: DEFAULT_T1,
            t2: DEFAULT_T2,
        }
    }
}

impl Thresholds {
    pub fn new(t1: f32, t2: f32) -> Result<Self, FacetError> {
        if !(t1.is_finite() && t1 >= 0.0) {
            return Err(FacetError::InvalidThreshold(format!("t1={t1} must be >= 0")));
        }
        if !(-1.0..=1.0).contains(&t2) {
            return Err(FacetError::InvalidThreshold(format!(
                "t2={t2} must lie in [-1, 1]"
            )));
        }
        Ok(Self { t1, t2 })
    }
}

fn project(x: &Matrix, w: &Matrix, b: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    let mut acc = vec![0.0f64; w.cols()];
    for i in 0..x.rows() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &xv) in x.row(i).iter().enumerate() {
            let xv = xv as f64;
            for (a, &wv) in acc.iter_mut().zip(w.row(k)) {
                *a += xv * wv as f64;
            }
        }
        for ((o, a), &bias) in out.row_mut(i).iter_mut().zip(&acc).zip(b) {
            *o = (a + bias as f64) as f32;
        }
    }
    out
}

/// `Q = X·W_Q + b_Q`, `K = X·W_K + b_K`, `V = X·W_V + b_V`.
pub fn project_facets(
    x: &TokenMatrix,
    w: &ProjectionWeights,
) -> Result<AttentionFacets, FacetError> {
    if x.d_model() != w.d_model() {
        return Err(FacetError::DimensionMismatch(format!(
            "tokens have width {}, weights expect {}",
            x.d_model(),
            w.d_model()
        )));
    }
    let q = project(x.matrix(), &w.w_q, &w.b_q);
    let k = project(x.matrix(), &w.w_k, &w.b_k);
    let v = project(x.matrix(), &w.w_v, &w.b_v);
    for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
        if !m.is_finite() {
            return Err(FacetError::NonFinite(name));
        }
    }
    let k_cls = k.row(0).to_vec();
    Ok(AttentionFacets {
        q,
        k,
        v,
        k_cls,
        heads: w.heads,
        layer_offset: 1,
    })
}

// Smallest positive f32; keeps softmax outputs strictly positive after the
// f64 -> f32 narrowing.
const MIN_PROB: f32 = f32::from_bits(1);

fn softmax_f64(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|&l| (l - max).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|e| *e /= sum);
}

/// Numerically stable softmax with f64 accumulation.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>, FacetError> {
    if logits.is_empty() {
        return Err(FacetError::EmptyInput);
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(FacetError::NonFinite("softmax logits"));
    }
    let wide: Vec<f64> = logits.iter().map(|&l| l as f64).collect();
    let mut probs = Vec::with_capacity(wide.len());
    softmax_f64(&wide, &mut probs);
    Ok(probs.into_iter().map(|p| (p as f32).max(MIN_PROB)).collect())
}

fn head_dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Standard row-wise multi-head attention: for every token `i` and head `h`,
/// `out_i^h = Σ_j softmax_j(q_i^h · k_j^h / sqrt(d/h)) v_j^h`.
pub fn attention_output(f: &AttentionFacets) -> Matrix {
    let n = f.q.rows();
    let dh = f.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(n, f.width());
    let mut logits = vec![0.0f64; n];
    let mut weights = Vec::with_capacity(n);
    let mut acc = vec![0.0f64; dh];
    for h in 0..f.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &f.q.row(i)[cols.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = head_dot(qi, &f.k.row(j)[cols.clone()]) * scale;
            }
            softmax_f64(&logits, &mut weights);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &wj) in weights.iter().enumerate() {
                for (a, &vv) in acc.iter_mut().zip(&f.v.row(j)[cols.clone()]) {
                    *a += wj * vv as f64;
                }
            }
            for (o, a) in out.row_mut(i)[cols.clone()].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    out
}

/// Scaled `[CLS]` score map; see [`cls_score_map_with`].
pub fn cls_score_map(f: &AttentionFacets) -> ScoreMap {
    cls_score_map_with(f, ScoreScaling::Scaled)
}

/// Attention of every patch query against `k_cls`, softmaxed over the `p`
/// patches per head and averaged across heads. The `[CLS]` row takes part
/// in neither the logits nor the output.
pub fn cls_score_map_with(f: &AttentionFacets, scaling: ScoreScaling) -> ScoreMap {
    let p = f.patches();
    let dh = f.head_width();
    let scale = match scaling {
        ScoreScaling::Scaled => 1.0 / (dh as f64).sqrt(),
        ScoreScaling::Unscaled => 1.0,
    };
    let mut avg = vec![0.0f64; p];
    let mut logits = vec![0.0f64; p];
    let mut probs = Vec::with_capacity(p);
    for h in 0..f.heads {
        let cols = h * dh..(h + 1) * dh;
        let kc = &f.k_cls[cols.clone()];
        for (i, l) in logits.iter_mut().enumerate() {
            *l = head_dot(&f.q.row(i + 1)[cols.clone()], kc) * scale;
        }
        softmax_f64(&logits, &mut probs);
        for (a, p) in avg.iter_mut().zip(&probs) {
            *a += p;
        }
    }
    let heads = f.heads as f64;
    ScoreMap {
        s: avg
            .into_iter()
            .map(|a| ((a / heads) as f32).max(MIN_PROB))
            .collect(),
    }
}

/// Zero-based patch indices with `s_i > t1`, in patch order.
pub fn select_keypoint_indices(s: &ScoreMap, t1: f32) -> Vec<usize> {
    s.s.iter()
        .enumerate()
        .filter(|(_, &si)| si > t1)
        .map(|(i, _)| i)
        .collect()
}

/// Patches whose score strictly exceeds `t1`, each with its L2-normalized
/// Value row as descriptor. A patch with an all-zero Value row has no
/// direction and is dropped.
pub fn select_keypoints(
    f: &AttentionFacets,
    s: &ScoreMap,
    t1: f32,
) -> Result<Vec<LocalFeature>, FacetError> {
    if s.s.len() != f.patches() {
        return Err(FacetError::DimensionMismatch(format!(
            "score map has {} entries for {} patches",
            s.s.len(),
            f.patches()
        )));
    }
    Ok(select_keypoint_indices(s, t1)
        .into_iter()
        .filter_map(|i| {
            linalg::normalized(f.v.row(i + 1)).map(|descriptor| LocalFeature {
                score: s.s[i],
                descriptor,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facets_from(q: Matrix, k: Matrix, v: Matrix, heads: usize) -> AttentionFacets {
        let k_cls = k.row(0).to_vec();
        AttentionFacets {
            q,
            k,
            v,
            k_cls,
            heads,
            layer_offset: 1,
        }
    }

    #[test]
    fn identity_projection() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.25, 4.0]]).unwrap();
        let w = ProjectionWeights::new(Matrix::identity(2), Matrix::identity(2), Matrix::identity(2), 1)
            .unwrap();
        let f = project_facets(&TokenMatrix::new(x.clone()).unwrap(), &w).unwrap();
        assert_eq!(f.q, x);
        assert_eq!(f.k, x);
        assert_eq!(f.v, x);
        assert_eq!(f.k_cls, x.row(0));
    }

    #[test]
    fn non_finite_tokens_rejected() {
        let x = Matrix::from_rows(&[vec![1.0, f32::NAN], vec![0.0, 1.0]]).unwrap();
        assert_eq!(TokenMatrix::new(x), Err(FacetError::NonFinite("token matrix")));
    }

    #[test]
    fn non_finite_projection_rejected() {
        let x = Matrix::from_rows(&[vec![1e30, 1e30], vec![1e30, 1e30]]).unwrap();
        let big = Matrix::from_rows(&[vec![1e30, 0.0], vec![1e30, 0.0]]).unwrap();
        let w = ProjectionWeights::new(big.clone(), big.clone(), big, 1).unwrap();
        assert!(matches!(
            project_facets(&TokenMatrix::new(x).unwrap(), &w),
            Err(FacetError::NonFinite(_))
        ));
    }

    #[test]
    fn weight_shape_checks() {
        let a = Matrix::zeros(4, 4);
        let b = Matrix::zeros(4, 2);
        assert!(matches!(
            ProjectionWeights::new(a.clone(), b, a.clone(), 1),
            Err(FacetError::DimensionMismatch(_))
        ));
        assert!(matches!(
            ProjectionWeights::new(a.clone(), a.clone(), a, 3),
            Err(FacetError::InvalidHeads { .. })
        ));
    }

    #[test]
    fn single_token_attention_is_its_value() {
        let row = Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let f = facets_from(row.clone(), row.clone(), row.clone(), 1);
        assert_eq!(attention_output(&f), row);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![-2.0, 1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![5.0, 8.0]]).unwrap();
        let out = attention_output(&facets_from(q, k, v, 1));
        for row in out.iter_rows() {
            assert!((row[0] - 3.0).abs() < 1e-5);
            assert!((row[1] - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn uniform_scores_for_equal_queries() {
        let q = Matrix::from_rows(&[vec![9.0, 9.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]])
            .unwrap();
        let k = Matrix::from_rows(&[vec![0.7, -0.1], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]])
            .unwrap();
        let s = cls_score_map(&facets_from(q, k, Matrix::zeros(4, 2), 2));
        for si in &s.s {
            assert!((si - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_way_closed_form() {
        // d = 1, so scaled logits equal the raw dot products: (1, 0).
        let q = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let s = cls_score_map(&facets_from(q, k, Matrix::zeros(3, 1), 1));
        let e = std::f64::consts::E;
        assert!((s.s[0] as f64 - e / (e + 1.0)).abs() < 1e-6);
        assert!((s.s[1] as f64 - 1.0 / (e + 1.0)).abs() < 1e-6);
        assert!((s.s[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn unscaled_mode_skips_sqrt() {
        let q = Matrix::from_rows(&[vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4], vec![0.0; 4]]).unwrap();
        let f = facets_from(q, k, Matrix::zeros(3, 4), 1);
        let scaled = cls_score_map(&f);
        let raw = cls_score_map_with(&f, ScoreScaling::Unscaled);
        let expect = |l: f64| l.exp() / (l.exp() + 1.0);
        assert!((scaled.s[0] as f64 - expect(0.5)).abs() < 1e-6);
        assert!((raw.s[0] as f64 - expect(1.0)).abs() < 1e-6);
    }

    #[test]
    fn threshold_selection() {
        let v = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![3.0, 4.0],
            vec![0.0, 2.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let f = facets_from(Matrix::zeros(4, 2), Matrix::zeros(4, 2), v, 1);
        let s = ScoreMap {
            s: vec![0.6, 0.3, 0.1],
        };
        assert_eq!(select_keypoint_indices(&s, 0.25), vec![0, 1]);
        let kp = select_keypoints(&f, &s, 0.25).unwrap();
        assert_eq!(kp.len(), 2);
        assert_eq!(kp[0].descriptor, vec![0.6, 0.8]);
        assert_eq!(kp[0].score, 0.6);
        assert_eq!(kp[1].descriptor, vec![0.0, 1.0]);
        assert_eq!(select_keypoints(&f, &s, 0.0).unwrap().len(), 3);
        assert!(select_keypoints(&f, &s, 1.0).unwrap().is_empty());
        // Strict comparison: a score equal to t1 is not selected.
        assert_eq!(select_keypoint_indices(&s, 0.3), vec![0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[1.0, 1.0, 1.0]).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(s[0], 1.0);
        assert!(s[1] > 0.0 && s[1] < 1e-30);
        assert_eq!(softmax(&[]), Err(FacetError::EmptyInput));
        assert!(softmax(&[f32::INFINITY]).is_err());
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::new(0.05, 0.65).is_ok());
        assert!(Thresholds::new(-0.1, 0.65).is_err());
        assert!(Thresholds::new(0.05, 1.5).is_err());
        assert_eq!(Thresholds::default(), Thresholds { t1: 0.05, t2: 0.65 });
    }
}
