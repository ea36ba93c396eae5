//! Brute-force reference implementations used only by tests.
//!
//! Each oracle recomputes a quantity along the most direct path available
//! (plain loops, f64 accumulation, full sorts) without calling the code it
//! checks.

#![allow(dead_code)]

use std::collections::BTreeMap;

use effo_core::feature_store::{FeatureSet, GeoKind, GeoTag, ImageRecord, LocalFeature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn random_locals<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<LocalFeature> {
    (0..n)
        .map(|_| LocalFeature {
            score: rng.gen_range(0.001..1.0),
            descriptor: random_unit(rng, d),
        })
        .collect()
}

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Naive triple loop `x · w + b` in f64.
pub fn matmul_bias(x: &[Vec<f32>], w: &[Vec<f32>], b: &[f32]) -> Vec<Vec<f64>> {
    let n = x.len();
    let inner = w.len();
    let m = w[0].len();
    let mut out = vec![vec![0.0f64; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0f64;
            for k in 0..inner {
                s += x[i][k] as f64 * w[k][j] as f64;
            }
            out[i][j] = s + b[j] as f64;
        }
    }
    out
}

pub fn softmax64(x: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-head attention output with f64 accumulation.
pub fn attention64(q: &[Vec<f32>], k: &[Vec<f32>], v: &[Vec<f32>], heads: usize) -> Vec<Vec<f64>> {
    let n = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0f64; d]; n];
    for h in 0..heads {
        let lo = h * dh;
        for i in 0..n {
            let mut logits = vec![0.0f64; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in lo..lo + dh {
                    s += q[i][c] as f64 * k[j][c] as f64;
                }
                logits[j] = s / (dh as f64).sqrt();
            }
            let w = softmax64(&logits);
            for c in lo..lo + dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += w[j] * v[j][c] as f64;
                }
                out[i][c] = s;
            }
        }
    }
    out
}

/// Each head's softmax over patches of `q_i · k_cls / sqrt(d/h)`, averaged.
pub fn cls_scores64(q: &[Vec<f32>], k_cls: &[f32], heads: usize, scaled: bool) -> Vec<f64> {
    let p = q.len() - 1;
    let d = k_cls.len();
    let dh = d / heads;
    let mut avg = vec![0.0f64; p];
    for h in 0..heads {
        let lo = h * dh;
        let logits: Vec<f64> = (1..=p)
            .map(|i| {
                let mut s = 0.0;
                for c in lo..lo + dh {
                    s += q[i][c] as f64 * k_cls[c] as f64;
                }
                if scaled {
                    s / (dh as f64).sqrt()
                } else {
                    s
                }
            })
            .collect();
        for (a, s) in avg.iter_mut().zip(softmax64(&logits)) {
            *a += s / heads as f64;
        }
    }
    avg
}

/// Exhaustive mutual nearest neighbours in f64 with lowest-index ties.
pub fn mnn_oracle(a: &[LocalFeature], b: &[LocalFeature], t2: f32) -> Vec<(usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return vec![];
    }
    let nn = |x: &[f32], pool: &[LocalFeature]| -> usize {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (j, y) in pool.iter().enumerate() {
            let s = dot64(x, &y.descriptor);
            if s > best_s {
                best = j;
                best_s = s;
            }
        }
        best
    };
    let mut out = vec![];
    for i in 0..a.len() {
        let j = nn(&a[i].descriptor, b);
        if nn(&b[j].descriptor, a) == i && dot64(&a[i].descriptor, &b[j].descriptor) > t2 as f64 {
            out.push((i, j));
        }
    }
    out
}

/// Full descending sort of gallery indices, ties by index.
///
/// Similarities are scored with the crate's `dot` so the comparison tests
/// selection and ordering rather than f32 rounding; `dot` itself is checked
/// against [`dot64`] separately.
pub fn rank_oracle(query: &[f32], gallery: &FeatureSet, k: usize) -> Vec<(usize, f32)> {
    let mut all: Vec<(usize, f32)> = gallery
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (i, effo_core::linalg::dot(query, &r.global)))
        .collect();
    all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    all.truncate(k);
    all
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenpairs sorted by descending eigenvalue.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        v[i][i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| (a[j][j], (0..n).map(|i| v[i][j]).collect()))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    pairs
}

pub fn covariance(rows: &[Vec<f32>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] as f64 / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] as f64 - mean[i]) * (r[j] as f64 - mean[j]) / (n - 1) as f64;
            }
        }
    }
    (mean, cov)
}

/// Output of the reference pipeline for one parameter setting.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    /// Per query, gallery indices in final order.
    pub orders: Vec<Vec<usize>>,
}

/// Full-sort ranking, exhaustive MNN counts with t1 filtering on both
/// sides, then a stable descending sort by count.
pub fn oracle_pipeline(
    gallery: &FeatureSet,
    queries: &FeatureSet,
    k: usize,
    t1: f32,
    t2: f32,
    rerank: bool,
) -> OracleRun {
    let orders = queries
        .records
        .iter()
        .map(|q| {
            let first: Vec<usize> = rank_oracle(&q.global, gallery, k).iter().map(|e| e.0).collect();
            if !rerank {
                return first;
            }
            let keep = |l: &[LocalFeature]| -> Vec<LocalFeature> {
                l.iter().filter(|f| f.score > t1).cloned().collect()
            };
            let ql = keep(&q.locals);
            let mut counted: Vec<(usize, usize, usize)> = first
                .iter()
                .enumerate()
                .map(|(pos, &gi)| {
                    let gl = keep(&gallery.records[gi].locals);
                    (mnn_oracle(&ql, &gl, t2).len(), pos, gi)
                })
                .collect();
            counted.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
            counted.into_iter().map(|c| c.2).collect()
        })
        .collect();
    OracleRun { orders }
}

/// Place of a synthetic gallery id `gPPPP_J` or query id `qPPPP`.
pub fn place_of(id: &str) -> &str {
    &id[1..5]
}

/// Recall@k by ground-truth place identity, counted directly.
pub fn oracle_recall(
    run: &OracleRun,
    gallery: &FeatureSet,
    queries: &FeatureSet,
    ks: &[usize],
) -> BTreeMap<usize, f64> {
    ks.iter()
        .map(|&k| {
            let hits = queries
                .records
                .iter()
                .zip(&run.orders)
                .filter(|(q, order)| {
                    order
                        .iter()
                        .take(k)
                        .any(|&gi| place_of(&gallery.records[gi].id) == place_of(&q.id))
                })
                .count();
            (k, hits as f64 / queries.len() as f64)
        })
        .collect()
}

/// SHA-256 over `query_id \t id,id,...\n` lines, one per query in order.
pub fn order_digest<'a, I, J>(lines: I) -> String
where
    I: IntoIterator<Item = (&'a str, J)>,
    J: IntoIterator<Item = &'a str>,
{
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (q, ids) in lines {
        h.update(q.as_bytes());
        h.update(b"\t");
        for (i, id) in ids.into_iter().enumerate() {
            if i > 0 {
                h.update(b",");
            }
            h.update(id.as_bytes());
        }
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn oracle_order_digest(run: &OracleRun, gallery: &FeatureSet, queries: &FeatureSet) -> String {
    order_digest(
        queries
            .records
            .iter()
            .zip(&run.orders)
            .map(|(q, o)| (q.id.as_str(), o.iter().map(|&i| gallery.records[i].id.as_str()))),
    )
}

pub fn random_set(seed: u64, n: usize, d_g: usize, d_l: usize, kind: GeoKind) -> FeatureSet {
    let mut r = rng(seed);
    let mut set = FeatureSet::new(d_g, d_l, kind);
    for i in 0..n {
        let geo = match kind {
            GeoKind::None => GeoTag::None,
            GeoKind::LatLon => GeoTag::LatLon {
                lat: r.gen_range(-90.0..=90.0),
                lon: r.gen_range(-180.0..=180.0),
            },
            GeoKind::FrameIndex => GeoTag::Frame(r.gen_range(0..1_000_000)),
        };
        let nl = r.gen_range(0..6);
        set.records.push(ImageRecord {
            id: format!("img-{i}-{}", r.gen::<u16>()),
            geo,
            global: random_unit(&mut r, d_g),
            locals: random_locals(&mut r, nl, d_l),
        });
    }
    set
}

/// Global norm, global length, local norm, local length, score, latitude,
/// longitude, frame and duplicate id.
pub const CORRUPTION_CLASSES: usize = 9;

/// One single-invariant corruption per class, applied to record `target`.
pub fn corrupt(set: &mut FeatureSet, class: usize, target: usize) {
    let other = if target == 0 { 1 } else { 0 };
    let rec = &mut set.records[target];
    match class {
        0 => rec.global.iter_mut().for_each(|x| *x *= 0.5),
        1 => rec.global.push(0.0),
        2 => {
            if rec.locals.is_empty() {
                rec.locals.push(LocalFeature { score: 0.5, descriptor: vec![0.0; set.d_l] });
                rec.locals[0].descriptor[0] = 2.0;
            } else {
                rec.locals[0].descriptor.iter_mut().for_each(|x| *x *= 2.0);
            }
        }
        3 => {
            let mut d = vec![0.0; set.d_l + 1];
            d[0] = 1.0;
            rec.locals.push(LocalFeature { score: 0.5, descriptor: d });
        }
        4 => {
            let mut d = vec![0.0; set.d_l];
            d[0] = 1.0;
            rec.locals.push(LocalFeature { score: 0.0, descriptor: d });
        }
        5 => rec.geo = GeoTag::LatLon { lat: 91.0, lon: 0.0 },
        6 => rec.geo = GeoTag::LatLon { lat: 0.0, lon: -180.5 },
        7 => rec.geo = GeoTag::Frame(-1),
        8 => {
            let id = set.records[other].id.clone();
            set.records[target].id = id;
        }
        _ => unreachable!(),
    }
}

pub fn corruption_kind(class: usize) -> GeoKind {
    match class {
        5 | 6 => GeoKind::LatLon,
        7 => GeoKind::FrameIndex,
        _ => GeoKind::None,
    }
}

