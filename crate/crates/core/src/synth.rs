//! Deterministic synthetic galleries with known ground truth.
//!
//! Every place has a latent global direction and a bank of latent local
//! directions. Images of a place perturb those latents with tangent-plane
//! Gaussian noise and renormalize; queries additionally swap a fraction of
//! their local features for features of other places.
//!
//! # Random streams
//!
//! All randomness comes from ChaCha20 keyed by the seed: the 32-byte key is
//! `seed.to_le_bytes()` followed by 24 zero bytes. Each entity draws from its
//! own stream (the ChaCha nonce):
//!
//! * place `p` uses stream `2^63 + p`,
//! * image ordinal `o` uses stream `o`; gallery images come first
//!   (`o = p * gallery_per_place + j`), then one query per place
//!   (`o = n_places * gallery_per_place + p`).
//!
//! A uniform draw is `(next_u64 >> 11) * 2^-53`. A normal draw is Box-Muller
//! on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`, discarding the sine.
//! Noise with magnitude σ in `d` dimensions draws each coordinate with
//! standard deviation `σ / sqrt(d)` and projects out the latent direction,
//! giving a tangent vector `t`. The image is the exponential map of `t` at
//! the latent, `cos|t| * latent + sin|t| * t / |t|` (a wrapped normal, so σ
//! is roughly the angular spread in radians), renormalized in f64. The
//! angle is capped at π/2 so larger σ never swings an image back towards
//! the antipode of its latent.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::EARTH_RADIUS_M;
use crate::feature_store::{self, FeatureSet, GeoKind, GeoTag, ImageRecord, LocalFeature, StoreError};

/// Images of a place lie within this distance of its centre.
pub const PLACE_JITTER_M: f64 = 5.0;
const PLACE_STREAM_BASE: u64 = 1 << 63;
const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_places: usize,
    pub gallery_per_place: usize,
    pub d_g: usize,
    pub d_l: usize,
    pub locals_min: usize,
    pub locals_max: usize,
    pub global_noise: f32,
    pub local_noise: f32,
    pub distractor_fraction: f32,
    pub geo_spacing_m: f64,
}

impl SynthConfig {
    /// The reference benchmark configuration: 200 places with five gallery
    /// images each, heavy global noise and 30% distractor locals.
    pub fn reference() -> Self {
        Self {
            seed: 42,
            n_places: 200,
            gallery_per_place: 5,
            d_g: 64,
            d_l: 32,
            locals_min: 10,
            locals_max: 20,
            global_noise: 0.9,
            local_noise: 0.1,
            distractor_fraction: 0.3,
            geo_spacing_m: 100.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_places == 0 || self.gallery_per_place == 0 {
            return fail("n_places and gallery_per_place must be positive".into());
        }
        if self.d_g == 0 || self.d_l == 0 {
            return fail("d_g and d_l must be positive".into());
        }
        if self.locals_min > self.locals_max {
            return fail(format!(
                "locals range {}..={} is empty",
                self.locals_min, self.locals_max
            ));
        }
        for (name, s) in [("global_noise", self.global_noise), ("local_noise", self.local_noise)] {
            if !(s.is_finite() && s >= 0.0) {
                return fail(format!("{name}={s} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.distractor_fraction) {
            return fail(format!(
                "distractor_fraction={} must lie in [0, 1)",
                self.distractor_fraction
            ));
        }
        if self.distractor_fraction > 0.0 && self.n_places < 2 {
            return fail("distractors need at least two places".into());
        }
        if !(self.geo_spacing_m > 2.0 * crate::evaluator::DEFAULT_RADIUS_M) {
            return fail(format!("geo_spacing_m={} must exceed 50", self.geo_spacing_m));
        }
        Ok(())
    }

    pub fn gallery_size(&self) -> usize {
        self.n_places * self.gallery_per_place
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub gallery: FeatureSet,
    pub queries: FeatureSet,
    /// Query id to place id.
    pub truth: BTreeMap<String, String>,
}

pub fn place_id(p: usize) -> String {
    format!("p{p:04}")
}

pub fn gallery_id(p: usize, j: usize) -> String {
    format!("g{p:04}_{j}")
}

pub fn query_id(p: usize) -> String {
    format!("q{p:04}")
}

struct Stream(ChaCha20Rng);

impl Stream {
    fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(stream);
        Self(rng)
    }

    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    fn unit_vector(&mut self, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn perturb(&mut self, latent: &[f64], sigma: f64) -> Vec<f32> {
        let d = latent.len();
        let sd = sigma / (d as f64).sqrt();
        let mut noise: Vec<f64> = (0..d).map(|_| self.normal() * sd).collect();
        let along: f64 = noise.iter().zip(latent).map(|(n, l)| n * l).sum();
        for (n, l) in noise.iter_mut().zip(latent) {
            *n -= along * l;
        }
        let theta = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        if theta == 0.0 {
            return latent.iter().map(|&x| x as f32).collect();
        }
        let (sin, cos) = theta.min(std::f64::consts::FRAC_PI_2).sin_cos();
        let v: Vec<f64> = latent
            .iter()
            .zip(&noise)
            .map(|(l, n)| cos * l + sin * n / theta)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| (x / norm) as f32).collect()
    }
}

struct Place {
    global: Vec<f64>,
    bank: Vec<Vec<f64>>,
    centre: (f64, f64),
}

fn place_centre(cfg: &SynthConfig, p: usize) -> (f64, f64) {
    let cols = (cfg.n_places as f64).sqrt().ceil() as usize;
    let north = (p / cols) as f64 * cfg.geo_spacing_m;
    let east = (p % cols) as f64 * cfg.geo_spacing_m;
    (north / METERS_PER_DEGREE, east / METERS_PER_DEGREE)
}

fn make_place(cfg: &SynthConfig, p: usize) -> Place {
    let mut rng = Stream::new(cfg.seed, PLACE_STREAM_BASE + p as u64);
    let global = rng.unit_vector(cfg.d_g);
    let bank = (0..cfg.locals_max.max(1))
        .map(|_| rng.unit_vector(cfg.d_l))
        .collect();
    Place {
        global,
        bank,
        centre: place_centre(cfg, p),
    }
}

fn make_image(cfg: &SynthConfig, places: &[Place], p: usize, ordinal: u64, id: String, query: bool) -> ImageRecord {
    let mut rng = Stream::new(cfg.seed, ordinal);
    let place = &places[p];

    let r = PLACE_JITTER_M * rng.uniform().sqrt();
    let theta = std::f64::consts::TAU * rng.uniform();
    let lat = place.centre.0 + r * theta.sin() / METERS_PER_DEGREE;
    let lon = place.centre.1 + r * theta.cos() / (METERS_PER_DEGREE * lat.to_radians().cos());

    let global = rng.perturb(&place.global, cfg.global_noise as f64);

    let span = cfg.locals_max - cfg.locals_min + 1;
    let count = cfg.locals_min + rng.below(span);
    // Partial Fisher-Yates over the bank picks `count` distinct latents.
    let mut slots: Vec<usize> = (0..place.bank.len()).collect();
    for i in 0..count.min(slots.len()) {
        let j = i + rng.below(slots.len() - i);
        slots.swap(i, j);
    }
    let distractors = if query {
        (count as f64 * cfg.distractor_fraction as f64).round() as usize
    } else {
        0
    };
    let mut locals = Vec::with_capacity(count);
    for (i, &slot) in slots.iter().take(count).enumerate() {
        let latent = if i < distractors {
            let other = (p + 1 + rng.below(places.len() - 1)) % places.len();
            let bank = &places[other].bank;
            &bank[rng.below(bank.len())]
        } else {
            &place.bank[slot]
        };
        let descriptor = rng.perturb(latent, cfg.local_noise as f64);
        let score = (1.0 - rng.uniform()) as f32;
        locals.push(LocalFeature { score, descriptor });
    }

    ImageRecord {
        id,
        geo: GeoTag::LatLon { lat, lon },
        global,
        locals,
    }
}

/// Generates a gallery, a query set with one query per place, and the
/// query-to-place ground truth. Output depends only on `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let places: Vec<Place> = (0..cfg.n_places)
        .into_par_iter()
        .map(|p| make_place(cfg, p))
        .collect();

    let per = cfg.gallery_per_place;
    let mut gallery = FeatureSet::new(cfg.d_g, cfg.d_l, GeoKind::LatLon);
    gallery.records = (0..cfg.gallery_size())
        .into_par_iter()
        .map(|o| make_image(cfg, &places, o / per, o as u64, gallery_id(o / per, o % per), false))
        .collect();

    let base = cfg.gallery_size() as u64;
    let mut queries = FeatureSet::new(cfg.d_g, cfg.d_l, GeoKind::LatLon);
    queries.records = (0..cfg.n_places)
        .into_par_iter()
        .map(|p| make_image(cfg, &places, p, base + p as u64, query_id(p), true))
        .collect();

    let truth = (0..cfg.n_places).map(|p| (query_id(p), place_id(p))).collect();
    Ok(SynthDataset {
        gallery,
        queries,
        truth,
    })
}

/// Writes `gallery.efvp`, `queries.efvp` and `truth.json` into `dir`.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    feature_store::write_feature_set(
        &ds.gallery,
        BufWriter::new(fs::File::create(dir.join("gallery.efvp"))?),
    )?;
    feature_store::write_feature_set(
        &ds.queries,
        BufWriter::new(fs::File::create(dir.join("queries.efvp"))?),
    )?;
    let mut truth = serde_json::to_string_pretty(&ds.truth)?;
    truth.push('\n');
    fs::write(dir.join("truth.json"), truth)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{is_correct, Protocol};

    fn small() -> SynthConfig {
        SynthConfig {
            n_places: 12,
            gallery_per_place: 3,
            d_g: 16,
            d_l: 8,
            locals_min: 3,
            locals_max: 6,
            ..SynthConfig::reference()
        }
    }

    #[test]
    fn generated_sets_validate() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.gallery.len(), 36);
        assert_eq!(ds.queries.len(), 12);
        assert!(feature_store::validate(&ds.gallery).is_empty());
        assert!(feature_store::validate(&ds.queries).is_empty());
        for r in ds.gallery.records.iter().chain(&ds.queries.records) {
            assert!((3..=6).contains(&r.locals.len()));
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(
            feature_store::to_bytes(&a.gallery).unwrap(),
            feature_store::to_bytes(&b.gallery).unwrap()
        );
        assert_eq!(
            feature_store::to_bytes(&a.queries).unwrap(),
            feature_store::to_bytes(&b.queries).unwrap()
        );
        let c = generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.gallery, c.gallery);
    }

    #[test]
    fn geo_separation() {
        let ds = generate(&small()).unwrap();
        let p = Protocol::default();
        for (qi, q) in ds.queries.records.iter().enumerate() {
            for (gi, g) in ds.gallery.records.iter().enumerate() {
                let same = gi / 3 == qi;
                assert_eq!(is_correct(q, g, &p).unwrap(), same, "{} vs {}", q.id, g.id);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { geo_spacing_m: 50.0, ..small() },
            SynthConfig { distractor_fraction: 1.0, ..small() },
            SynthConfig { locals_min: 9, ..small() },
            SynthConfig { n_places: 0, ..small() },
            SynthConfig { global_noise: -1.0, ..small() },
        ] {
            assert!(matches!(generate(&cfg), Err(SynthError::InvalidConfig(_))));
        }
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let g = feature_store::read_feature_set(fs::File::open(dir.path().join("gallery.efvp")).unwrap())
            .unwrap();
        assert_eq!(g, ds.gallery);
        let truth: BTreeMap<String, String> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth["q0003"], "p0003");
    }
}
