//! Localization correctness protocols and Recall@K.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{FeatureSet, GeoTag, ImageRecord};

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const DEFAULT_RADIUS_M: f64 = 25.0;
pub const DEFAULT_FRAME_WINDOW: u64 = 10;
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
/// Distances this close to the radius count as lying on it, so points
/// constructed at exactly the radius from a rounded metres-per-degree figure
/// still land on the boundary.
pub const RADIUS_TOLERANCE_M: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{0} is not a lat/lon geo-tag")]
    NotLatLon(String),
    #[error("record {id:?} has a {found} geo-tag but the protocol needs {expected}")]
    ProtocolMismatch {
        id: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("query set is empty")]
    EmptyQueries,
    #[error("{results} result lists for {queries} queries")]
    ResultCount { results: usize, queries: usize },
    #[error("result index {index} out of range for a gallery of {gallery}")]
    BadIndex { index: usize, gallery: usize },
    #[error("ks must be non-empty, positive and ascending")]
    BadKs,
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
}

/// When a retrieval counts as a correct localization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Haversine distance within `meters`.
    RadiusMeters { meters: f64, inclusive: bool },
    /// Frame indices within `frames` of each other.
    FrameWindow { frames: u64, inclusive: bool },
}

impl Protocol {
    pub fn radius(meters: f64) -> Result<Self, EvalError> {
        if !(meters.is_finite() && meters > 0.0) {
            return Err(EvalError::InvalidProtocol(format!(
                "radius {meters} must be positive"
            )));
        }
        Ok(Protocol::RadiusMeters {
            meters,
            inclusive: true,
        })
    }

    pub fn frame_window(frames: u64) -> Self {
        Protocol::FrameWindow {
            frames,
            inclusive: true,
        }
    }

    /// Switches the boundary to strict (`<`) comparison.
    pub fn exclusive(self) -> Self {
        match self {
            Protocol::RadiusMeters { meters, .. } => Protocol::RadiusMeters {
                meters,
                inclusive: false,
            },
            Protocol::FrameWindow { frames, .. } => Protocol::FrameWindow {
                frames,
                inclusive: false,
            },
        }
    }
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::RadiusMeters {
            meters: DEFAULT_RADIUS_M,
            inclusive: true,
        }
    }
}

fn kind_name(tag: &GeoTag) -> &'static str {
    match tag {
        GeoTag::None => "none",
        GeoTag::LatLon { .. } => "lat/lon",
        GeoTag::Frame(_) => "frame",
    }
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: &GeoTag, b: &GeoTag) -> Result<f64, EvalError> {
    let (&GeoTag::LatLon { lat: lat1, lon: lon1 }, &GeoTag::LatLon { lat: lat2, lon: lon2 }) =
        (a, b)
    else {
        let bad = if matches!(a, GeoTag::LatLon { .. }) { b } else { a };
        return Err(EvalError::NotLatLon(kind_name(bad).to_string()));
    };
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (lon2 - lon1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
}

fn within_radius(distance: f64, radius: f64, inclusive: bool) -> bool {
    if inclusive {
        distance <= radius + RADIUS_TOLERANCE_M
    } else {
        distance < radius - RADIUS_TOLERANCE_M
    }
}

/// Whether `retrieved` localizes `query` under `protocol`.
pub fn is_correct(
    query: &ImageRecord,
    retrieved: &ImageRecord,
    protocol: &Protocol,
) -> Result<bool, EvalError> {
    match *protocol {
        Protocol::RadiusMeters { meters, inclusive } => {
            for r in [query, retrieved] {
                if !matches!(r.geo, GeoTag::LatLon { .. }) {
                    return Err(EvalError::ProtocolMismatch {
                        id: r.id.clone(),
                        expected: "lat/lon",
                        found: kind_name(&r.geo),
                    });
                }
            }
            Ok(within_radius(haversine_m(&query.geo, &retrieved.geo)?, meters, inclusive))
        }
        Protocol::FrameWindow { frames, inclusive } => match (query.geo, retrieved.geo) {
            (GeoTag::Frame(a), GeoTag::Frame(b)) => {
                let gap = a.abs_diff(b);
                Ok(if inclusive { gap <= frames } else { gap < frames })
            }
            _ => {
                let bad = if matches!(query.geo, GeoTag::Frame(_)) {
                    retrieved
                } else {
                    query
                };
                Err(EvalError::ProtocolMismatch {
                    id: bad.id.clone(),
                    expected: "frame",
                    found: kind_name(&bad.geo),
                })
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub recall: f64,
    pub query_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub rows: Vec<RecallRow>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

impl RecallTable {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.recall)
    }

    /// `k,recall,query_count` with recalls at four decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,recall,query_count\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4},{}", r.k, r.recall, r.query_count);
        }
        out
    }

    /// JSON array mirroring the CSV rows, recalls rounded to four decimals.
    pub fn to_json(&self) -> String {
        let rows: Vec<RecallRow> = self
            .rows
            .iter()
            .map(|r| RecallRow {
                recall: round4(r.recall),
                ..*r
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("recall rows serialize")
    }
}

/// Fraction of queries with at least one correct retrieval among their
/// first `k` results, for every `k` in `ks`.
///
/// `results[q]` lists gallery indices for query `q`, best first.
pub fn recall_at_k(
    results: &[Vec<usize>],
    queries: &FeatureSet,
    gallery: &FeatureSet,
    protocol: &Protocol,
    ks: &[usize],
) -> Result<RecallTable, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyQueries);
    }
    if results.len() != queries.len() {
        return Err(EvalError::ResultCount {
            results: results.len(),
            queries: queries.len(),
        });
    }
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadKs);
    }
    let k_max = *ks.last().unwrap();

    // Rank (zero-based) of the first correct retrieval per query.
    let mut first_hit = Vec::with_capacity(results.len());
    for (q, list) in queries.records.iter().zip(results) {
        let mut hit = None;
        for (rank, &gi) in list.iter().enumerate().take(k_max) {
            let g = gallery.records.get(gi).ok_or(EvalError::BadIndex {
                index: gi,
                gallery: gallery.len(),
            })?;
            if is_correct(q, g, protocol)? {
                hit = Some(rank);
                break;
            }
        }
        first_hit.push(hit);
    }

    let n = queries.len();
    let rows = ks
        .iter()
        .map(|&k| RecallRow {
            k,
            recall: first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count() as f64
                / n as f64,
            query_count: n,
        })
        .collect();
    Ok(RecallTable { rows })
}
