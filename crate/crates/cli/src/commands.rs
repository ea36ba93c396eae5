use std::borrow::Cow;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use effo_core::evaluator::{Protocol, DEFAULT_FRAME_WINDOW, DEFAULT_RADIUS_M};
use effo_core::facets::{
    cls_score_map_with, project_facets, select_keypoint_indices, FacetError, ProjectionWeights,
    ScoreScaling, TokenMatrix,
};
use effo_core::feature_store::{self, FeatureSet, GeoKind, StoreError};
use effo_core::linalg::{self, Matrix};
use effo_core::matrix_file::read_matrix;
use effo_core::pipeline::{
    self, evaluate_lines, read_results, retrieve_set, to_result_lines, write_results, Grid,
    LocalSource, RetrievalParams,
};
use effo_core::ranker::{fit_pca, project_set, PcaError};
use effo_core::synth::{self, SynthConfig};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{manifest_path, RunManifest};
use crate::{CliError, EvalArgs, FacetsArgs, Format, ProtocolArgs, RetrieveArgs, SweepArgs, Switch, SynthArgs};

/// Prints the report; 0 when the file is valid, 1 otherwise.
pub fn validate(path: &Path) -> Result<u8, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let set = match feature_store::read_feature_set(BufReader::new(file)) {
        Ok(set) => set,
        Err(StoreError::Io(e)) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
        Err(e) => {
            println!("{}: {e}", path.display());
            return Ok(1);
        }
    };
    let report = feature_store::validate(&set);
    if report.is_empty() {
        println!(
            "{}: ok, {} records, d_g={}, d_l={}, geo={:?}",
            path.display(),
            set.len(),
            set.d_g,
            set.d_l,
            set.geo_kind
        );
        return Ok(0);
    }
    print!("{report}");
    println!("{}: {} violation(s)", path.display(), report.len());
    Ok(1)
}

/// Reads a feature file and rejects it unless it validates.
fn load_set(path: &Path) -> Result<FeatureSet, CliError> {
    let at = |m: String| format!("{}: {m}", path.display());
    let file = File::open(path).map_err(|e| CliError::Io(at(e.to_string())))?;
    let set = feature_store::read_feature_set(BufReader::new(file)).map_err(|e| match e {
        StoreError::Io(e) => CliError::Io(at(e.to_string())),
        other => CliError::Domain(at(other.to_string())),
    })?;
    let report = feature_store::validate(&set);
    if let Some(v) = report.violations.first() {
        return Err(CliError::Domain(at(format!(
            "{} violation(s), first: {v}",
            report.len()
        ))));
    }
    Ok(set)
}

fn pca_error(e: PcaError) -> CliError {
    match e {
        PcaError::TooManyComponents { .. } | PcaError::ZeroComponents => CliError::Usage(e.to_string()),
        other => CliError::Domain(other.to_string()),
    }
}

fn write_manifest(output: &Path, config: serde_json::Value, inputs: &[&Path]) -> Result<(), CliError> {
    RunManifest::new(config, inputs)?.write(&manifest_path(output))?;
    Ok(())
}

/// Writes `text` to `out` with a manifest, or to stdout.
fn emit(out: Option<&Path>, text: &str, config: serde_json::Value, inputs: &[&Path]) -> Result<(), CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            write_manifest(path, config, inputs)
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

pub fn retrieve(args: &RetrieveArgs) -> Result<(), CliError> {
    let params = RetrievalParams {
        k: args.k,
        t1: args.t1,
        t2: args.t2,
        rerank: args.rerank == Switch::On,
    };
    params.check()?;
    let gallery = load_set(&args.gallery)?;
    let queries = load_set(&args.queries)?;
    let (g, q) = match args.dim {
        Some(d) => {
            let p = fit_pca(&gallery, d).map_err(pca_error)?;
            let g = project_set(&p, &gallery).map_err(pca_error)?;
            let q = project_set(&p, &queries).map_err(pca_error)?;
            (Cow::Owned(g), Cow::Owned(q))
        }
        None => (Cow::Borrowed(&gallery), Cow::Borrowed(&queries)),
    };
    let outcomes = retrieve_set(&g, &q, &params)?;
    let lines = to_result_lines(&g, &q, &outcomes);
    let file = File::create(&args.out).map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;
    write_results(&lines, BufWriter::new(file))?;
    write_manifest(
        &args.out,
        json!({
            "command": "retrieve",
            "k": params.k,
            "t1": params.t1,
            "t2": params.t2,
            "rerank": params.rerank,
            "dim": args.dim,
            "d_g": gallery.d_g,
            "d_l": gallery.d_l,
            "gallery_size": gallery.len(),
            "query_count": queries.len(),
        }),
        &[&args.gallery, &args.queries],
    )?;
    eprintln!("wrote {} result lines to {}", lines.len(), args.out.display());
    Ok(())
}

fn protocol_for(args: &ProtocolArgs, gallery: &FeatureSet) -> Result<Protocol, CliError> {
    let protocol = match (args.radius_m, args.frame_window) {
        (_, Some(w)) => Protocol::frame_window(w),
        (Some(m), None) => Protocol::radius(m).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None) if gallery.geo_kind == GeoKind::FrameIndex => Protocol::frame_window(DEFAULT_FRAME_WINDOW),
        (None, None) => Protocol::radius(DEFAULT_RADIUS_M).expect("default radius is positive"),
    };
    Ok(if args.strict { protocol.exclusive() } else { protocol })
}

fn checked_ks(ks: &[usize]) -> Result<Vec<usize>, CliError> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(CliError::Usage("--ks needs positive cutoffs".into()));
    }
    Ok(ks)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let gallery = load_set(&args.gallery)?;
    let queries = load_set(&args.queries)?;
    let file = File::open(&args.results).map_err(|e| CliError::Io(format!("{}: {e}", args.results.display())))?;
    let lines = read_results(BufReader::new(file))?;
    let protocol = protocol_for(&args.protocol, &gallery)?;
    let ks = checked_ks(&args.protocol.ks)?;
    let table = evaluate_lines(&lines, &queries, &gallery, &protocol, &ks)?;
    let format = args.format.unwrap_or_else(|| match args.out.as_ref().and_then(|p| p.extension()) {
        Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
        _ => Format::Csv,
    });
    let text = match format {
        Format::Csv => table.to_csv(),
        Format::Json => table.to_json() + "\n",
    };
    emit(
        args.out.as_deref(),
        &text,
        json!({ "command": "eval", "protocol": protocol, "ks": ks }),
        &[&args.results, &args.queries, &args.gallery],
    )
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let grid = Grid::parse(&args.grid)?;
    let gallery = load_set(&args.gallery)?;
    let queries = load_set(&args.queries)?;
    let mut inputs: Vec<PathBuf> = vec![args.gallery.clone(), args.queries.clone()];
    let mut sources = Vec::new();
    for layer in &grid.layers {
        let (g, q) = (PathBuf::from(&layer.gallery), PathBuf::from(&layer.queries));
        sources.push(LocalSource {
            label: layer.label.clone(),
            gallery: Some(load_set(&g)?),
            queries: Some(load_set(&q)?),
        });
        inputs.push(g);
        inputs.push(q);
    }
    let protocol = protocol_for(&args.protocol, &gallery)?;
    let ks = checked_ks(&args.protocol.ks)?;
    let rows = pipeline::sweep(&gallery, &queries, &sources, &grid, &protocol, &ks)?;
    let layers: Vec<_> = grid
        .layers
        .iter()
        .map(|l| json!({ "label": l.label, "gallery": l.gallery, "queries": l.queries }))
        .collect();
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    emit(
        args.out.as_deref(),
        &pipeline::sweep_csv(&rows, &ks),
        json!({
            "command": "sweep",
            "t1": grid.t1,
            "t2": grid.t2,
            "k": grid.k,
            "layers": layers,
            "protocol": protocol,
            "ks": ks,
            "d_g": gallery.d_g,
            "d_l": gallery.d_l,
        }),
        &input_refs,
    )
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let r = SynthConfig::reference();
    let cfg = SynthConfig {
        seed: args.seed.unwrap_or(r.seed),
        n_places: args.n_places.unwrap_or(r.n_places),
        gallery_per_place: args.gallery_per_place.unwrap_or(r.gallery_per_place),
        d_g: args.d_g.unwrap_or(r.d_g),
        d_l: args.d_l.unwrap_or(r.d_l),
        locals_min: args.locals_min.unwrap_or(r.locals_min),
        locals_max: args.locals_max.unwrap_or(r.locals_max),
        global_noise: args.global_noise.unwrap_or(r.global_noise),
        local_noise: args.local_noise.unwrap_or(r.local_noise),
        distractor_fraction: args.distractor_fraction.unwrap_or(r.distractor_fraction),
        geo_spacing_m: args.geo_spacing_m.unwrap_or(r.geo_spacing_m),
    };
    cfg.validate()?;
    let ds = synth::generate(&cfg)?;
    synth::write_dataset(&ds, &args.out)?;
    write_manifest(
        &args.out.join("synth"),
        json!({ "command": "synth", "config": cfg }),
        &[],
    )?;
    let locals: usize = ds.gallery.records.iter().map(|r| r.locals.len()).sum();
    println!("wrote {}", args.out.display());
    println!(
        "  places {}, gallery {} images, queries {} images",
        cfg.n_places,
        ds.gallery.len(),
        ds.queries.len()
    );
    println!(
        "  d_g {}, d_l {}, {:.1} locals per gallery image, seed {}",
        cfg.d_g,
        cfg.d_l,
        locals as f64 / ds.gallery.len().max(1) as f64,
        cfg.seed
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Keypoint {
    /// Zero-based patch index; the token row is `patch + 1`.
    patch: usize,
    score: f32,
    descriptor: Vec<f32>,
}

#[derive(Debug, Serialize)]
struct FacetsOutput {
    patches: usize,
    width: usize,
    heads: usize,
    registers: usize,
    layer_offset: u32,
    scaling: ScoreScaling,
    t1: f32,
    k_cls: Vec<f32>,
    scores: Vec<f32>,
    keypoints: Vec<Keypoint>,
}

fn load_matrix(path: &Path) -> Result<Matrix, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_matrix(BufReader::new(file)).map_err(|e| match CliError::from(e) {
        CliError::Domain(m) => CliError::Domain(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn facet_error(e: FacetError) -> CliError {
    CliError::Domain(e.to_string())
}

/// Keeps `[CLS]` and the patch rows; register tokens sit right after `[CLS]`.
fn drop_registers(tokens: Matrix, registers: usize) -> Result<Matrix, CliError> {
    if registers == 0 {
        return Ok(tokens);
    }
    if tokens.rows() < registers + 2 {
        return Err(CliError::Domain(format!(
            "{} token rows leave no patches after [CLS] and {registers} registers",
            tokens.rows()
        )));
    }
    let rows: Vec<Vec<f32>> = std::iter::once(0)
        .chain(registers + 1..tokens.rows())
        .map(|i| tokens.row(i).to_vec())
        .collect();
    Ok(Matrix::from_rows(&rows).expect("rows share a width"))
}

pub fn facets(args: &FacetsArgs) -> Result<(), CliError> {
    if !(args.t1.is_finite() && args.t1 >= 0.0) {
        return Err(CliError::Usage(format!("--t1 {} must be >= 0", args.t1)));
    }
    let tokens = TokenMatrix::new(drop_registers(load_matrix(&args.tokens)?, args.registers)?).map_err(facet_error)?;
    let (wq, wk, wv) = (load_matrix(&args.wq)?, load_matrix(&args.wk)?, load_matrix(&args.wv)?);
    let d = wq.cols();
    let mut inputs: Vec<&Path> = vec![&args.tokens, &args.wq, &args.wk, &args.wv];
    let (b_q, b_k, b_v) = match &args.biases {
        Some(path) => {
            let b = load_matrix(path)?;
            if b.rows() != 3 || b.cols() != d {
                return Err(CliError::Domain(format!(
                    "{}: biases must be 3x{d}, got {}x{}",
                    path.display(),
                    b.rows(),
                    b.cols()
                )));
            }
            inputs.push(path);
            (b.row(0).to_vec(), b.row(1).to_vec(), b.row(2).to_vec())
        }
        None => (vec![0.0; d], vec![0.0; d], vec![0.0; d]),
    };
    let weights = ProjectionWeights::with_biases(wq, wk, wv, b_q, b_k, b_v, args.heads).map_err(facet_error)?;
    let f = project_facets(&tokens, &weights)
        .map_err(facet_error)?
        .with_layer_offset(args.layer_offset);
    let scaling = if args.unscaled {
        ScoreScaling::Unscaled
    } else {
        ScoreScaling::Scaled
    };
    let s = cls_score_map_with(&f, scaling);
    let keypoints = select_keypoint_indices(&s, args.t1)
        .into_iter()
        .filter_map(|i| {
            linalg::normalized(f.v.row(i + 1)).map(|descriptor| Keypoint {
                patch: i,
                score: s.s[i],
                descriptor,
            })
        })
        .collect();
    let out = FacetsOutput {
        patches: f.patches(),
        width: f.width(),
        heads: f.heads,
        registers: args.registers,
        layer_offset: f.layer_offset,
        scaling,
        t1: args.t1,
        k_cls: f.k_cls.clone(),
        scores: s.s,
        keypoints,
    };
    let text = serde_json::to_string_pretty(&out).map_err(std::io::Error::from)? + "\n";
    emit(
        args.out.as_deref(),
        &text,
        json!({
            "command": "facets",
            "heads": args.heads,
            "t1": args.t1,
            "scaling": scaling,
            "layer_offset": args.layer_offset,
            "patches": out.patches,
            "width": out.width,
        }),
        &inputs,
    )
}
