//! The `.efvp` feature container.
//!
//! A container holds one gallery or query set: a fixed header followed by
//! one variable-length record per image. All integers are little-endian;
//! descriptors are stored as f32 and geo-tags as f64.
//!
//! ```text
//! offset  field                                   type
//! 0       magic "EFVP"                            4 bytes
//! 4       version = 1                             u32
//! 8       d_g                                     u32
//! 12      d_l                                     u32
//! 16      record_count                            u64
//! 24      geo_kind (0=None, 1=LatLon, 2=Frame)    u32
//! ```
//!
//! Each record is `id_len u32`, the UTF-8 id bytes, the geo payload
//! (LatLon: two f64, Frame: one i64, None: nothing), `d_g` f32 values for the
//! global descriptor, `local_count u32`, then per local feature a f32 score
//! followed by `d_l` f32 values.
//!
//! Writing is a pure function of the set. Reading checks framing only and
//! never renormalizes; use [`validate`] for the numeric invariants.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

pub const MAGIC: [u8; 4] = *b"EFVP";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const FILE_EXTENSION: &str = "efvp";

/// Allowed deviation of a stored descriptor's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {found:?}, expected \"EFVP\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated stream in {0}")]
    Truncated(Location),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("dimension mismatch in record {index}: {detail}")]
    DimensionMismatch { index: usize, detail: String },
    #[error("record {index}: id is not valid UTF-8")]
    InvalidId { index: usize },
    #[error("duplicate id {id:?} at record {index}")]
    DuplicateId { index: usize, id: String },
    #[error("unexpected trailing bytes after the last record")]
    TrailingBytes,
    #[error("record {id:?} violates {field}: {detail}")]
    Invariant {
        id: String,
        field: &'static str,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where in the stream a read stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Header,
    Record { index: usize, part: &'static str },
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Header => f.write_str("header"),
            Location::Record { index, part } => write!(f, "record {index} ({part})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoKind {
    None,
    LatLon,
    FrameIndex,
}

impl GeoKind {
    pub fn code(self) -> u32 {
        match self {
            GeoKind::None => 0,
            GeoKind::LatLon => 1,
            GeoKind::FrameIndex => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(GeoKind::None),
            1 => Some(GeoKind::LatLon),
            2 => Some(GeoKind::FrameIndex),
            _ => None,
        }
    }
}

/// Where an image was taken: a WGS84 position, a sequence frame index, or
/// nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoTag {
    None,
    LatLon { lat: f64, lon: f64 },
    Frame(i64),
}

impl GeoTag {
    pub fn kind(&self) -> GeoKind {
        match self {
            GeoTag::None => GeoKind::None,
            GeoTag::LatLon { .. } => GeoKind::LatLon,
            GeoTag::Frame(_) => GeoKind::FrameIndex,
        }
    }
}

/// One selected patch: its CLS-attention score and unit-norm descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFeature {
    pub score: f32,
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub geo: GeoTag,
    pub global: Vec<f32>,
    pub locals: Vec<LocalFeature>,
}

/// An ordered gallery or query set with shared descriptor widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub d_g: usize,
    pub d_l: usize,
    pub geo_kind: GeoKind,
    pub records: Vec<ImageRecord>,
}

impl FeatureSet {
    pub fn new(d_g: usize, d_l: usize, geo_kind: GeoKind) -> Self {
        Self {
            d_g,
            d_l,
            geo_kind,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    ZeroDimension { field: &'static str },
    GlobalDimension { expected: usize, found: usize },
    GlobalNorm { norm: f64 },
    LocalDimension { local: usize, expected: usize, found: usize },
    LocalNorm { local: usize, norm: f64 },
    LocalScore { local: usize, score: f32 },
    DuplicateId,
    GeoKindMismatch { expected: GeoKind, found: GeoKind },
    Latitude(f64),
    Longitude(f64),
    NegativeFrame(i64),
}

impl ViolationKind {
    /// Name of the offending field, as reported by the writer.
    pub fn field(&self) -> &'static str {
        match self {
            ViolationKind::ZeroDimension { field } => field,
            ViolationKind::GlobalDimension { .. } => "global dimension",
            ViolationKind::GlobalNorm { .. } => "global norm",
            ViolationKind::LocalDimension { .. } => "local dimension",
            ViolationKind::LocalNorm { .. } => "local norm",
            ViolationKind::LocalScore { .. } => "local score",
            ViolationKind::DuplicateId => "id",
            ViolationKind::GeoKindMismatch { .. } => "geo kind",
            ViolationKind::Latitude(_) => "latitude",
            ViolationKind::Longitude(_) => "longitude",
            ViolationKind::NegativeFrame(_) => "frame",
        }
    }
}

/// A single invariant violation. `record` is `None` for set-level problems.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub record: Option<(usize, String)>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((index, id)) = &self.record {
            write!(f, "record {index} ({id}): ")?;
        }
        match &self.kind {
            ViolationKind::ZeroDimension { field } => write!(f, "{field} must be positive"),
            ViolationKind::GlobalDimension { expected, found } => {
                write!(f, "global dimension {found}, expected {expected}")
            }
            ViolationKind::GlobalNorm { norm } => {
                write!(f, "global descriptor norm {norm:.6}, expected 1")
            }
            ViolationKind::LocalDimension {
                local,
                expected,
                found,
            } => write!(f, "local {local} dimension {found}, expected {expected}"),
            ViolationKind::LocalNorm { local, norm } => {
                write!(f, "local {local} descriptor norm {norm:.6}, expected 1")
            }
            ViolationKind::LocalScore { local, score } => {
                write!(f, "local {local} score {score} outside (0, 1]")
            }
            ViolationKind::DuplicateId => match &self.record {
                Some((_, id)) => write!(f, "duplicate id {id}"),
                None => f.write_str("duplicate id"),
            },
            ViolationKind::GeoKindMismatch { expected, found } => {
                write!(f, "geo tag kind {found:?}, set declares {expected:?}")
            }
            ViolationKind::Latitude(lat) => write!(f, "latitude {lat} outside [-90, 90]"),
            ViolationKind::Longitude(lon) => write!(f, "longitude {lon} outside [-180, 180]"),
            ViolationKind::NegativeFrame(frame) => write!(f, "negative frame index {frame}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn norm_ok(norm: f64) -> bool {
    (norm - 1.0).abs() <= NORM_TOLERANCE
}

/// Lists every invariant violation in `set`. An empty report means the set
/// can be written.
pub fn validate(set: &FeatureSet) -> ValidationReport {
    let mut violations = Vec::new();
    if set.d_g == 0 {
        violations.push(Violation {
            record: None,
            kind: ViolationKind::ZeroDimension { field: "d_g" },
        });
    }
    if set.d_l == 0 {
        violations.push(Violation {
            record: None,
            kind: ViolationKind::ZeroDimension { field: "d_l" },
        });
    }

    let mut seen = HashSet::with_capacity(set.records.len());
    for (index, rec) in set.records.iter().enumerate() {
        let mut push = |kind| {
            violations.push(Violation {
                record: Some((index, rec.id.clone())),
                kind,
            })
        };
        if !seen.insert(rec.id.as_str()) {
            push(ViolationKind::DuplicateId);
        }

        if rec.geo.kind() != set.geo_kind {
            push(ViolationKind::GeoKindMismatch {
                expected: set.geo_kind,
                found: rec.geo.kind(),
            });
        }
        match rec.geo {
            GeoTag::LatLon { lat, lon } => {
                if !(-90.0..=90.0).contains(&lat) {
                    push(ViolationKind::Latitude(lat));
                }
                if !(-180.0..=180.0).contains(&lon) {
                    push(ViolationKind::Longitude(lon));
                }
            }
            GeoTag::Frame(frame) if frame < 0 => push(ViolationKind::NegativeFrame(frame)),
            _ => {}
        }

        if rec.global.len() != set.d_g {
            push(ViolationKind::GlobalDimension {
                expected: set.d_g,
                found: rec.global.len(),
            });
        } else {
            let norm = linalg::norm(&rec.global);
            if !norm_ok(norm) {
                push(ViolationKind::GlobalNorm { norm });
            }
        }

        for (local, lf) in rec.locals.iter().enumerate() {
            if !(lf.score > 0.0 && lf.score <= 1.0) {
                push(ViolationKind::LocalScore {
                    local,
                    score: lf.score,
                });
            }
            if lf.descriptor.len() != set.d_l {
                push(ViolationKind::LocalDimension {
                    local,
                    expected: set.d_l,
                    found: lf.descriptor.len(),
                });
            } else {
                let norm = linalg::norm(&lf.descriptor);
                if !norm_ok(norm) {
                    push(ViolationKind::LocalNorm { local, norm });
                }
            }
        }
    }
    ValidationReport { violations }
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn u32_field(value: usize, id: &str, field: &'static str) -> Result<u32, StoreError> {
    u32::try_from(value).map_err(|_| StoreError::Invariant {
        id: id.to_string(),
        field,
        detail: format!("{value} does not fit in u32"),
    })
}

/// Serializes `set` to `sink` and returns the number of bytes written.
///
/// Fails with [`StoreError::Invariant`] naming the first offending record
/// and field if the set does not validate.
pub fn write_feature_set<W: Write>(set: &FeatureSet, mut sink: W) -> Result<u64, StoreError> {
    if let Some(v) = validate(set).violations.into_iter().next() {
        return Err(StoreError::Invariant {
            id: v.record.as_ref().map(|(_, id)| id.clone()).unwrap_or_default(),
            field: v.kind.field(),
            detail: v.to_string(),
        });
    }

    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_field(set.d_g, "", "d_g")?.to_le_bytes());
    buf.extend_from_slice(&u32_field(set.d_l, "", "d_l")?.to_le_bytes());
    buf.extend_from_slice(&(set.records.len() as u64).to_le_bytes());
    buf.extend_from_slice(&set.geo_kind.code().to_le_bytes());
    sink.write_all(&buf)?;
    let mut written = buf.len() as u64;

    for rec in &set.records {
        buf.clear();
        let id = rec.id.as_bytes();
        buf.extend_from_slice(&u32_field(id.len(), &rec.id, "id length")?.to_le_bytes());
        buf.extend_from_slice(id);
        match rec.geo {
            GeoTag::None => {}
            GeoTag::LatLon { lat, lon } => {
                buf.extend_from_slice(&lat.to_le_bytes());
                buf.extend_from_slice(&lon.to_le_bytes());
            }
            GeoTag::Frame(frame) => buf.extend_from_slice(&frame.to_le_bytes()),
        }
        put_f32s(&mut buf, &rec.global);
        buf.extend_from_slice(&u32_field(rec.locals.len(), &rec.id, "local count")?.to_le_bytes());
        for lf in &rec.locals {
            buf.extend_from_slice(&lf.score.to_le_bytes());
            put_f32s(&mut buf, &lf.descriptor);
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Convenience wrapper around [`write_feature_set`] for an in-memory buffer.
pub fn to_bytes(set: &FeatureSet) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    write_feature_set(set, &mut out)?;
    Ok(out)
}

struct FieldReader<R> {
    inner: R,
}

impl<R: Read> FieldReader<R> {
    fn exact<const N: usize>(&mut self, at: Location) -> Result<[u8; N], StoreError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| eof(e, at))?;
        Ok(buf)
    }

    fn u32(&mut self, at: Location) -> Result<u32, StoreError> {
        self.exact::<4>(at).map(u32::from_le_bytes)
    }

    fn u64(&mut self, at: Location) -> Result<u64, StoreError> {
        self.exact::<8>(at).map(u64::from_le_bytes)
    }

    fn f32(&mut self, at: Location) -> Result<f32, StoreError> {
        self.exact::<4>(at).map(f32::from_le_bytes)
    }

    fn f64(&mut self, at: Location) -> Result<f64, StoreError> {
        self.exact::<8>(at).map(f64::from_le_bytes)
    }

    // Grows with the data actually present, so a forged length cannot force
    // a huge allocation up front.
    fn bytes(&mut self, len: u64, at: Location) -> Result<Vec<u8>, StoreError> {
        let mut out = Vec::new();
        (&mut self.inner).take(len).read_to_end(&mut out)?;
        if (out.len() as u64) < len {
            return Err(StoreError::Truncated(at));
        }
        Ok(out)
    }

    fn f32s(&mut self, count: usize, at: Location) -> Result<Vec<f32>, StoreError> {
        let raw = self.bytes(count as u64 * 4, at)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn eof(e: io::Error, at: Location) -> StoreError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        StoreError::Truncated(at)
    } else {
        StoreError::Io(e)
    }
}

/// Deserializes a container from `source`.
///
/// Checks framing (magic, version, lengths, unique UTF-8 ids, no trailing
/// bytes) but not descriptor norms or geo ranges.
pub fn read_feature_set<R: Read>(source: R) -> Result<FeatureSet, StoreError> {
    let mut r = FieldReader { inner: source };
    let at = Location::Header;
    let magic = r.exact::<4>(at)?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let version = r.u32(at)?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let d_g = r.u32(at)? as usize;
    let d_l = r.u32(at)? as usize;
    let count = r.u64(at)?;
    let kind_code = r.u32(at)?;
    let geo_kind = GeoKind::from_code(kind_code)
        .ok_or_else(|| StoreError::InvalidHeader(format!("unknown geo kind {kind_code}")))?;
    if d_g == 0 || d_l == 0 {
        return Err(StoreError::InvalidHeader(format!(
            "descriptor dimensions must be positive (d_g={d_g}, d_l={d_l})"
        )));
    }

    let mut set = FeatureSet::new(d_g, d_l, geo_kind);
    set.records.reserve(count.min(4096) as usize);
    let mut seen = HashSet::new();
    for index in 0..count {
        let index = index as usize;
        let at = |part| Location::Record { index, part };
        let id_len = r.u32(at("id length"))?;
        let id = String::from_utf8(r.bytes(id_len as u64, at("id"))?)
            .map_err(|_| StoreError::InvalidId { index })?;
        if !seen.insert(id.clone()) {
            return Err(StoreError::DuplicateId { index, id });
        }
        let geo = match geo_kind {
            GeoKind::None => GeoTag::None,
            GeoKind::LatLon => {
                let lat = r.f64(at("geo"))?;
                let lon = r.f64(at("geo"))?;
                GeoTag::LatLon { lat, lon }
            }
            GeoKind::FrameIndex => GeoTag::Frame(i64::from_le_bytes(r.exact::<8>(at("geo"))?)),
        };
        let global = r.f32s(d_g, at("global descriptor"))?;
        let local_count = r.u32(at("local count"))?;
        let mut locals = Vec::with_capacity(local_count.min(1024) as usize);
        for _ in 0..local_count {
            let score = r.f32(at("local score"))?;
            let descriptor = r.f32s(d_l, at("local descriptor"))?;
            locals.push(LocalFeature { score, descriptor });
        }
        set.records.push(ImageRecord {
            id,
            geo,
            global,
            locals,
        });
    }

    let mut probe = [0u8; 1];
    loop {
        match r.inner.read(&mut probe) {
            Ok(0) => break,
            Ok(_) => return Err(StoreError::TrailingBytes),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(set)
}

pub fn from_bytes(bytes: &[u8]) -> Result<FeatureSet, StoreError> {
    read_feature_set(bytes)
}
