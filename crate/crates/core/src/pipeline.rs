//! The two-stage retrieval pipeline shared by the CLI and the query
//! service, plus the JSON-lines results format and parameter sweeps.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{self, EvalError, Protocol, RecallTable};
use crate::facets::{DEFAULT_T1, DEFAULT_T2};
use crate::feature_store::{FeatureSet, ImageRecord, LocalFeature};
use crate::ranker::{self, RankError, RankedList};
use crate::reranker::{self, Candidate, RerankError};

/// Candidates re-ranked per query unless overridden.
pub const DEFAULT_K: usize = 100;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("query {query:?}: {source}")]
    Query {
        query: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("results line {line}: {message}")]
    Results { line: usize, message: String },
    #[error("unknown {what} id {id:?}")]
    UnknownId { what: &'static str, id: String },
    #[error("no retrievals")]
    NoRetrievals,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("local feature source {label:?}: {message}")]
    LocalSource { label: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub k: usize,
    pub t1: f32,
    pub t2: f32,
    pub rerank: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            t1: DEFAULT_T1,
            t2: DEFAULT_T2,
            rerank: true,
        }
    }
}

impl RetrievalParams {
    pub fn check(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::InvalidParameter("k must be at least 1".into()));
        }
        crate::facets::Thresholds::new(self.t1, self.t2)
            .map_err(|e| PipelineError::InvalidParameter(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntry {
    pub gallery_index: usize,
    pub similarity: f32,
    /// Present only when re-ranking ran.
    pub mnn_count: Option<usize>,
}

/// Keeps the stored local features whose score strictly exceeds `t1`.
pub fn filter_locals(locals: &[LocalFeature], t1: f32) -> Cow<'_, [LocalFeature]> {
    if locals.iter().all(|f| f.score > t1) {
        Cow::Borrowed(locals)
    } else {
        Cow::Owned(locals.iter().filter(|f| f.score > t1).cloned().collect())
    }
}

/// Re-ranks an existing first-stage list with the given thresholds.
pub fn rerank_stage(
    gallery: &FeatureSet,
    query_locals: &[LocalFeature],
    first_stage: &RankedList,
    t1: f32,
    t2: f32,
) -> Result<Vec<RetrievedEntry>, PipelineError> {
    let query_locals = filter_locals(query_locals, t1);
    let filtered: Vec<(usize, Cow<'_, [LocalFeature]>)> = first_stage
        .indices()
        .map(|i| (i, filter_locals(&gallery.records[i].locals, t1)))
        .collect();
    let candidates: Vec<Candidate<'_>> = filtered
        .iter()
        .map(|(i, l)| Candidate {
            gallery_index: *i,
            locals: l,
        })
        .collect();
    let result = reranker::rerank(&query_locals, &candidates, t2, first_stage)?;
    Ok(result
        .order
        .iter()
        .map(|e| RetrievedEntry {
            gallery_index: e.gallery_index,
            similarity: e.first_stage_similarity,
            mnn_count: Some(e.mnn_count),
        })
        .collect())
}

fn first_stage_entries(list: &RankedList) -> Vec<RetrievedEntry> {
    list.entries
        .iter()
        .map(|e| RetrievedEntry {
            gallery_index: e.gallery_index,
            similarity: e.similarity,
            mnn_count: None,
        })
        .collect()
}

/// Runs both stages for one query.
pub fn retrieve(
    gallery: &FeatureSet,
    query_global: &[f32],
    query_locals: &[LocalFeature],
    params: &RetrievalParams,
) -> Result<Vec<RetrievedEntry>, PipelineError> {
    params.check()?;
    let first = ranker::rank(query_global, gallery, params.k)?;
    if !params.rerank {
        return Ok(first_stage_entries(&first));
    }
    if query_locals.iter().any(|f| f.descriptor.len() != gallery.d_l) {
        return Err(RerankError::DimensionMismatch {
            expected: gallery.d_l,
            found: query_locals
                .iter()
                .map(|f| f.descriptor.len())
                .find(|&l| l != gallery.d_l)
                .unwrap_or_default(),
        }
        .into());
    }
    rerank_stage(gallery, query_locals, &first, params.t1, params.t2)
}

/// Runs [`retrieve`] for every query in parallel; output is in query order.
pub fn retrieve_set(
    gallery: &FeatureSet,
    queries: &FeatureSet,
    params: &RetrievalParams,
) -> Result<Vec<Vec<RetrievedEntry>>, PipelineError> {
    params.check()?;
    if queries.d_g != gallery.d_g || queries.d_l != gallery.d_l {
        return Err(PipelineError::InvalidParameter(format!(
            "query set dims (d_g={}, d_l={}) differ from gallery (d_g={}, d_l={})",
            queries.d_g, queries.d_l, gallery.d_g, gallery.d_l
        )));
    }
    queries
        .records
        .par_iter()
        .map(|q| {
            retrieve(gallery, &q.global, &q.locals, params).map_err(|e| PipelineError::Query {
                query: q.id.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultLine {
    pub query_id: String,
    pub results: Vec<ResultItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultItem {
    pub id: String,
    pub similarity: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnn_count: Option<usize>,
}

pub fn to_result_lines(
    gallery: &FeatureSet,
    queries: &FeatureSet,
    outcomes: &[Vec<RetrievedEntry>],
) -> Vec<ResultLine> {
    queries
        .records
        .iter()
        .zip(outcomes)
        .map(|(q, entries)| ResultLine {
            query_id: q.id.clone(),
            results: entries
                .iter()
                .map(|e| ResultItem {
                    id: gallery.records[e.gallery_index].id.clone(),
                    similarity: e.similarity,
                    mnn_count: e.mnn_count,
                })
                .collect(),
        })
        .collect()
}

pub fn write_results<W: Write>(lines: &[ResultLine], mut sink: W) -> Result<(), PipelineError> {
    for line in lines {
        serde_json::to_writer(&mut sink, line).map_err(io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

/// Parses one JSON-lines record. Blank lines are not allowed here.
pub fn parse_result_line(text: &str, line: usize) -> Result<ResultLine, PipelineError> {
    serde_json::from_str(text).map_err(|e| PipelineError::Results {
        line,
        message: e.to_string(),
    })
}

/// Reads a results file, skipping blank lines. Line numbers in errors are
/// one-based.
pub fn read_results<R: BufRead>(source: R) -> Result<Vec<ResultLine>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_result_line(&line, i + 1)?);
    }
    Ok(out)
}

fn id_index(set: &FeatureSet) -> HashMap<&str, usize> {
    set.records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect()
}

/// Maps result lines back to per-query gallery index lists, in query-set
/// order. Queries without a line get an empty list.
pub fn resolve_results(
    lines: &[ResultLine],
    queries: &FeatureSet,
    gallery: &FeatureSet,
) -> Result<Vec<Vec<usize>>, PipelineError> {
    let qmap = id_index(queries);
    let gmap = id_index(gallery);
    let mut out = vec![Vec::new(); queries.len()];
    for line in lines {
        let &qi = qmap.get(line.query_id.as_str()).ok_or_else(|| PipelineError::UnknownId {
            what: "query",
            id: line.query_id.clone(),
        })?;
        out[qi] = line
            .results
            .iter()
            .map(|item| {
                gmap.get(item.id.as_str()).copied().ok_or_else(|| PipelineError::UnknownId {
                    what: "gallery",
                    id: item.id.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
    }
    if out.iter().all(Vec::is_empty) {
        return Err(PipelineError::NoRetrievals);
    }
    Ok(out)
}

/// Recall table for results given as result lines.
pub fn evaluate_lines(
    lines: &[ResultLine],
    queries: &FeatureSet,
    gallery: &FeatureSet,
    protocol: &Protocol,
    ks: &[usize],
) -> Result<RecallTable, PipelineError> {
    let resolved = resolve_results(lines, queries, gallery)?;
    Ok(evaluator::recall_at_k(&resolved, queries, gallery, protocol, ks)?)
}

/// Local features taken from an alternative export, such as a different
/// layer or facet. Records must match the base sets id for id.
#[derive(Debug, Clone)]
pub struct LocalSource {
    pub label: String,
    pub gallery: Option<FeatureSet>,
    pub queries: Option<FeatureSet>,
}

impl LocalSource {
    /// The locals stored in the base files.
    pub fn base() -> Self {
        Self {
            label: "base".into(),
            gallery: None,
            queries: None,
        }
    }
}

/// Replaces every record's locals with those of the same record in `alt`.
pub fn with_locals_from(base: &FeatureSet, alt: &FeatureSet, label: &str) -> Result<FeatureSet, PipelineError> {
    let err = |message: String| PipelineError::LocalSource {
        label: label.to_string(),
        message,
    };
    if base.len() != alt.len() {
        return Err(err(format!("{} records, base has {}", alt.len(), base.len())));
    }
    let mut out = FeatureSet::new(base.d_g, alt.d_l, base.geo_kind);
    out.records = base
        .records
        .iter()
        .zip(&alt.records)
        .map(|(b, a)| {
            if a.id != b.id {
                return Err(err(format!("record id {:?} where base has {:?}", a.id, b.id)));
            }
            Ok(ImageRecord {
                locals: a.locals.clone(),
                ..b.clone()
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(out)
}

/// The axes of a parameter sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub t1: Vec<f32>,
    pub t2: Vec<f32>,
    pub k: Vec<usize>,
    pub layers: Vec<LayerFile>,
}

/// `label:gallery.efvp:queries.efvp`
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFile {
    pub label: String,
    pub gallery: String,
    pub queries: String,
}

impl Grid {
    /// Parses grid specs such as `t1=0,0.05;t2=0.65;k=5,100`. Axes are
    /// separated by `;` or whitespace, values by `,`; several specs may be
    /// given and are merged. Missing numeric axes take the pipeline
    /// defaults.
    pub fn parse<S: AsRef<str>>(specs: &[S]) -> Result<Self, PipelineError> {
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        let mut k = Vec::new();
        let mut layers = Vec::new();
        let mut axes = 0;
        for spec in specs {
            for item in spec
                .as_ref()
                .split(|c: char| c == ';' || c.is_whitespace())
                .filter(|s| !s.is_empty())
            {
                axes += 1;
                let (key, values) = item
                    .split_once('=')
                    .ok_or_else(|| PipelineError::Grid(format!("expected key=values, got {item:?}")))?;
                let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
                if values.is_empty() {
                    return Err(PipelineError::Grid(format!("axis {key:?} has no values")));
                }
                match key {
                    "t1" => {
                        for v in values {
                            let x = parse_num::<f32>(key, v)?;
                            if !(x.is_finite() && x >= 0.0) {
                                return Err(PipelineError::Grid(format!("t1={v} must be >= 0")));
                            }
                            t1.push(x);
                        }
                    }
                    "t2" => {
                        for v in values {
                            let x = parse_num::<f32>(key, v)?;
                            if !(-1.0..=1.0).contains(&x) {
                                return Err(PipelineError::Grid(format!("t2={v} must lie in [-1, 1]")));
                            }
                            t2.push(x);
                        }
                    }
                    "k" => {
                        for v in values {
                            let x = parse_num::<usize>(key, v)?;
                            if x == 0 {
                                return Err(PipelineError::Grid("k must be at least 1".into()));
                            }
                            k.push(x);
                        }
                    }
                    "layer-file" | "layer" => {
                        for v in values {
                            let mut parts = v.splitn(3, ':');
                            match (parts.next(), parts.next(), parts.next()) {
                                (Some(l), Some(g), Some(q)) if !l.is_empty() && !g.is_empty() && !q.is_empty() => {
                                    layers.push(LayerFile {
                                        label: l.into(),
                                        gallery: g.into(),
                                        queries: q.into(),
                                    })
                                }
                                _ => {
                                    return Err(PipelineError::Grid(format!(
                                        "layer-file expects label:gallery:queries, got {v:?}"
                                    )))
                                }
                            }
                        }
                    }
                    other => return Err(PipelineError::Grid(format!("unknown axis {other:?}"))),
                }
            }
        }
        if axes == 0 {
            return Err(PipelineError::Grid("empty grid".into()));
        }
        if t1.is_empty() {
            t1.push(DEFAULT_T1);
        }
        if t2.is_empty() {
            t2.push(DEFAULT_T2);
        }
        if k.is_empty() {
            k.push(DEFAULT_K);
        }
        Ok(Self { t1, t2, k, layers })
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.trim()
        .parse()
        .map_err(|_| PipelineError::Grid(format!("bad value {v:?} for {key}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub layer: String,
    pub t1: Option<f32>,
    pub t2: Option<f32>,
    pub k: usize,
    pub rerank: bool,
    pub recall: RecallTable,
}

/// Evaluates every grid point. The first stage runs once at the largest k
/// and is truncated per point; each point's re-ranking is exactly what a
/// single pipeline run with those parameters would produce. A first-stage
/// only row is emitted for every k.
pub fn sweep(
    gallery: &FeatureSet,
    queries: &FeatureSet,
    sources: &[LocalSource],
    grid: &Grid,
    protocol: &Protocol,
    ks: &[usize],
) -> Result<Vec<SweepRow>, PipelineError> {
    let k_max = *grid.k.iter().max().ok_or_else(|| PipelineError::Grid("empty k axis".into()))?;
    let first: Vec<RankedList> = queries
        .records
        .par_iter()
        .map(|q| ranker::rank(&q.global, gallery, k_max))
        .collect::<Result<_, _>>()?;

    let mut ks_sorted = grid.k.clone();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();

    let mut rows = Vec::new();
    for &k in &ks_sorted {
        let lists: Vec<Vec<usize>> = first.iter().map(|l| l.indices().take(k).collect()).collect();
        rows.push(SweepRow {
            layer: "-".into(),
            t1: None,
            t2: None,
            k,
            rerank: false,
            recall: evaluator::recall_at_k(&lists, queries, gallery, protocol, ks)?,
        });
    }

    let base = [LocalSource::base()];
    let sources = if sources.is_empty() { &base[..] } else { sources };
    for src in sources {
        let g = match &src.gallery {
            Some(alt) => Cow::Owned(with_locals_from(gallery, alt, &src.label)?),
            None => Cow::Borrowed(gallery),
        };
        let q = match &src.queries {
            Some(alt) => Cow::Owned(with_locals_from(queries, alt, &src.label)?),
            None => Cow::Borrowed(queries),
        };
        if g.d_l != q.d_l {
            return Err(PipelineError::LocalSource {
                label: src.label.clone(),
                message: format!("gallery d_l={} but queries d_l={}", g.d_l, q.d_l),
            });
        }
        for &t1 in &grid.t1 {
            for &t2 in &grid.t2 {
                for &k in &ks_sorted {
                    let lists: Vec<Vec<usize>> = q
                        .records
                        .par_iter()
                        .zip(&first)
                        .map(|(qr, fl)| {
                            rerank_stage(&g, &qr.locals, &fl.truncated(k), t1, t2)
                                .map(|es| es.iter().map(|e| e.gallery_index).collect())
                        })
                        .collect::<Result<_, _>>()?;
                    rows.push(SweepRow {
                        layer: src.label.clone(),
                        t1: Some(t1),
                        t2: Some(t2),
                        k,
                        rerank: true,
                        recall: evaluator::recall_at_k(&lists, &q, &g, protocol, ks)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Long-format CSV: `layer,t1,t2,k,rerank,recall@K...,query_count`.
pub fn sweep_csv(rows: &[SweepRow], ks: &[usize]) -> String {
    let mut out = String::from("layer,t1,t2,k,rerank");
    for k in ks {
        let _ = write!(out, ",recall@{k}");
    }
    out.push_str(",query_count\n");
    let opt = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.layer,
            opt(r.t1),
            opt(r.t2),
            r.k,
            if r.rerank { "on" } else { "off" }
        );
        for k in ks {
            let _ = write!(out, ",{:.4}", r.recall.get(*k).unwrap_or(f64::NAN));
        }
        let n = r.recall.rows.first().map_or(0, |x| x.query_count);
        let _ = writeln!(out, ",{n}");
    }
    out
}
