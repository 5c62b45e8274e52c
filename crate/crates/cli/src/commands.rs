//! Subcommand implementations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use octangle::aca::AcaConfig;
use octangle::augment::{AugmentConfig, EvalLevels, LevelGeometry, LevelSource, TrainingLevels};
use octangle::cornea::{overlay_boundary, BoundaryParams};
use octangle::manifest::{read_manifest, LoadedSample, Manifest, Side, TrainingManifest};
use octangle::metrics::{evaluate, roc_csv, DEFAULT_RESAMPLES};
use octangle::mldn::{MldnConfig, MldnModel, TrainConfig};
use octangle::pipeline::{build_levels, detect_boundaries, load_samples, localize, train_localizer, Localization, LocalizerConfig};
use octangle::svr::{SvrModel, SvrParams};
use octangle::synth::{generate_dataset, SynthRanges};
use octangle::PixelPoint;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::settings::{write_sidecar, Output, Settings};
use crate::{
    BoundaryOpts, CliError, DetectAcaArgs, DetectBoundaryArgs, EvalArgs, InferArgs, SynthArgs, TrainMldnArgs,
    TrainSvrArgs,
};

type Result<T> = std::result::Result<T, CliError>;

fn boundary_params(s: &mut Settings, o: BoundaryOpts) -> Result<BoundaryParams> {
    let d = BoundaryParams::default();
    Ok(BoundaryParams {
        sigma: s.pick("sigma", o.sigma, d.sigma)?,
        rel_threshold: s.pick("rel-threshold", o.rel_threshold, d.rel_threshold)?,
        outlier_passes: s.pick("outlier-passes", o.outlier_passes, d.outlier_passes)?,
    })
}

fn aca_config(s: &mut Settings, stride: Option<usize>) -> Result<AcaConfig> {
    let d = AcaConfig::default();
    Ok(AcaConfig { stride: s.pick("stride", stride, d.stride)?, ..d })
}

/// Reads a manifest and loads its images relative to the manifest's directory.
fn load_manifest(path: &Path) -> Result<(Manifest, Vec<LoadedSample>)> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = load_samples(&manifest, base)?;
    Ok((manifest, samples))
}

fn json_line<T: Serialize>(out: &mut String, value: &T) -> Result<()> {
    out.push_str(&serde_json::to_string(value).map_err(octangle::Error::from)?);
    out.push('\n');
    Ok(())
}

/// Maps a point of the left-oriented frame back into the file's own frame.
fn file_frame(p: PixelPoint, side: Side, width: usize) -> PixelPoint {
    match side {
        Side::Left => p,
        Side::Right => PixelPoint::new(p.u, width - 1 - p.v),
    }
}

fn localize_manifest(
    s: &mut Settings,
    manifest: &Path,
    svr_model: &Path,
    stride: Option<usize>,
    boundary: BoundaryOpts,
) -> Result<(Manifest, Vec<LoadedSample>, Vec<Localization>)> {
    let params = boundary_params(s, boundary)?;
    let aca = aca_config(s, stride)?;
    let model = SvrModel::load(svr_model)?;
    let (m, samples) = load_manifest(manifest)?;
    let bounds = detect_boundaries(&samples, &params);
    let locs = localize(&samples, &bounds, &model, &aca)?;
    Ok((m, samples, locs))
}

pub fn synth(a: SynthArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config, "synth")?;
    let n = s.pick("n", a.n, 100)?;
    let seed = s.pick("seed", a.seed, 0)?;
    let balance = s.pick("balance", a.balance, 0.5)?;
    let out: PathBuf = s.require("out", a.out)?;
    if n < 2 {
        return Err(CliError::Usage(format!("--n must be at least 2, got {n}")));
    }
    let ranges = SynthRanges::default();
    s.record("ranges", &ranges);
    let manifest = generate_dataset(n, balance, &ranges, seed, &out)?;
    let closures = manifest.records().iter().filter(|r| r.label.as_class() == 1).count();
    write_sidecar(&out.join("manifest.jsonl"), "synth", &s, json!({ "n": n, "closures": closures }))?;
    eprintln!("wrote {n} samples ({closures} closure) to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct BoundaryLine<'a> {
    image_path: &'a str,
    ok: bool,
    /// Coefficients `a0..a4` of `u(v) = Σ a_i v^i` in the left-oriented frame.
    upper: Option<[f64; 5]>,
    bottom: Option<[f64; 5]>,
    domain: Option<(usize, usize)>,
    mirrored: bool,
}

pub fn detect_boundary(a: DetectBoundaryArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config, "detect-boundary")?;
    let manifest: PathBuf = s.require("manifest", a.manifest)?;
    let out = Output::parse(&s.pick("out", a.out, "-".to_string())?);
    let debug_dir: Option<PathBuf> = s.pick_opt("debug-dir", a.debug_dir)?;
    let params = boundary_params(&mut s, a.boundary)?;
    let (_, samples) = load_manifest(&manifest)?;
    let bounds = detect_boundaries(&samples, &params);
    if let Some(dir) = &debug_dir {
        std::fs::create_dir_all(dir).map_err(|e| octangle::Error::io(dir, e))?;
    }
    let mut text = String::new();
    for (i, (sample, b)) in samples.iter().zip(&bounds).enumerate() {
        json_line(
            &mut text,
            &BoundaryLine {
                image_path: &sample.record.image_path,
                ok: b.is_some(),
                upper: b.as_ref().map(|b| b.upper.coefficients()),
                bottom: b.as_ref().map(|b| b.bottom.coefficients()),
                domain: b.as_ref().map(|b| b.bottom.domain()),
                mirrored: sample.record.side == Side::Right,
            },
        )?;
        if let (Some(dir), Some(b)) = (&debug_dir, b) {
            overlay_boundary(&sample.image, b).save_pgm(dir.join(format!("boundary_{i:05}.pgm")))?;
        }
    }
    out.write(&text)?;
    let failures = bounds.iter().filter(|b| b.is_none()).count();
    if let Some(p) = out.path() {
        write_sidecar(p, "detect-boundary", &s, json!({ "images": samples.len(), "failures": failures }))?;
    }
    eprintln!("fitted {} of {} images", samples.len() - failures, samples.len());
    Ok(())
}

pub fn train_svr(a: TrainSvrArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config, "train-svr")?;
    let manifest: PathBuf = s.require("manifest", a.manifest)?;
    let out: PathBuf = s.require("out", a.out)?;
    let d = LocalizerConfig::default();
    let svr = SvrParams {
        c: s.pick("c", a.c, d.svr.c)?,
        epsilon: s.pick("epsilon", a.epsilon, d.svr.epsilon)?,
        tol: s.pick("tol", a.tol, d.svr.tol)?,
        max_iter: s.pick("max-iter", a.max_iter, d.svr.max_iter)?,
        ..d.svr
    };
    let cfg = LocalizerConfig {
        boundary: boundary_params(&mut s, a.boundary)?,
        aca: aca_config(&mut s, a.stride)?,
        svr,
        max_train_images: s.pick_opt("max-images", a.max_images)?.or(d.max_train_images),
    };
    let (_, samples) = load_manifest(&manifest)?;
    let bounds = detect_boundaries(&samples, &cfg.boundary);
    let trained = train_localizer(&samples, &bounds, &cfg)?;
    trained.model.save(&out)?;
    let details = json!({
        "images": trained.n_images,
        "windows": trained.n_windows,
        "iterations": trained.report.iterations,
        "converged": trained.report.converged,
        "final_objective": trained.report.objectives.last(),
    });
    write_sidecar(&out, "train-svr", &s, details)?;
    eprintln!(
        "trained on {} windows from {} images ({} iterations)",
        trained.n_windows, trained.n_images, trained.report.iterations
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectionLine<'a> {
    image_path: &'a str,
    /// Spur row and column in the file's own frame.
    ss_u: usize,
    ss_v: usize,
    score: Option<f64>,
    fallback: bool,
}

pub fn detect_aca(a: DetectAcaArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config, "detect-aca")?;
    let manifest: PathBuf = s.require("manifest", a.manifest)?;
    let svr_model: PathBuf = s.require("svr-model", a.svr_model)?;
    let out = Output::parse(&s.pick("out", a.out, "-".to_string())?);
    let (_, samples, locs) = localize_manifest(&mut s, &manifest, &svr_model, a.stride, a.boundary)?;
    let mut text = String::new();
    for (sample, l) in samples.iter().zip(&locs) {
        let p = file_frame(l.ss_pred, sample.record.side, sample.image.width());
        json_line(
            &mut text,
            &DetectionLine { image_path: &sample.record.image_path, ss_u: p.u, ss_v: p.v, score: l.score, fallback: l.fallback },
        )?;
    }
    out.write(&text)?;
    if let Some(p) = out.path() {
        write_sidecar(p, "detect-aca", &s, json!({ "images": samples.len() }))?;
    }
    Ok(())
}

fn parse_factors(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("invalid intensity factor {t:?}"))))
        .collect()
}

pub fn train_mldn(a: TrainMldnArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config, "train-mldn")?;
    let manifest: PathBuf = s.require("manifest", a.manifest)?;
    let svr_model: PathBuf = s.require("svr-model", a.svr_model)?;
    let out: PathBuf = s.require("out", a.out)?;
    let d = TrainConfig::default();
    let seed = s.pick("seed", a.seed, 0)?;
    let epochs = s.pick("epochs", a.epochs, d.epochs)?;
    let lr = s.pick("lr", a.lr, d.learning_rate)?;
    let augment_on = match s.pick("augment", a.augment, "on".to_string())?.as_str() {
        "on" => true,
        "off" => false,
        other => return Err(CliError::Usage(format!("--augment must be on or off, got {other:?}"))),
    };
    let factors = parse_factors(&s.pick("factors", a.factors, "0.5,1,1.5".to_string())?)?;
    let shift = s.pick("shifts", a.shifts, 8)?;
    let augment = if augment_on {
        let steps = [0, -shift.abs(), shift.abs()];
        let mut offsets: Vec<(i64, i64)> = steps.iter().flat_map(|&u| steps.iter().map(move |&v| (u, v))).collect();
        offsets.dedup();
        AugmentConfig { intensity_factors: factors, shift_offsets: offsets }
    } else {
        AugmentConfig::identity()
    };
    augment.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let phase1 = TrainConfig {
        epochs,
        learning_rate: lr,
        momentum: s.pick("momentum", a.momentum, d.momentum)?,
        batch_size: s.pick("batch", a.batch, d.batch_size)?,
        seed,
        augment,
        balance_classes: s.pick("balance-classes", a.balance_classes.then_some(true), false)?,
    };
    let phase2 = TrainConfig {
        epochs: s.pick("phase2-epochs", a.phase2_epochs, epochs)?,
        learning_rate: s.pick("phase2-lr", a.phase2_lr, lr)?,
        ..phase1.clone()
    };
    let end_to_end = s.pick("end-to-end", a.end_to_end.then_some(true), false)?;
    let input_size = s.pick("input-size", a.input_size, 224)?;
    let model_cfg = MldnConfig::desk(input_size, seed);
    let (m, samples, locs) = localize_manifest(&mut s, &manifest, &svr_model, a.stride, a.boundary)?;
    let geo = LevelGeometry { input_size, patch_size: model_cfg.patch_size, margin: phase1.augment.max_shift() };
    let train_manifest = TrainingManifest::designate(m);
    let levels = TrainingLevels::new(&train_manifest, geo, build_levels(&samples, &locs, &geo)?)?;
    let mut model = MldnModel::new(model_cfg)?;
    model.train_phase1(&levels, &phase1)?;
    model.train_phase2(&levels, &phase2, end_to_end)?;
    model.save(&out)?;
    let log = model.train_log();
    let details = json!({
        "samples": levels.len(),
        "phase1_final_loss": log.phase1.iter().map(|b| b.epoch_losses.last()).collect::<Vec<_>>(),
        "phase2_final_loss": log.phase2.last(),
        "phase1": phase1,
        "phase2": phase2,
    });
    write_sidecar(&out, "train-mldn", &s, details)?;
    eprintln!("trained on {} samples", levels.len());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    image_path: String,
    p_closure: f64,
    label: octangle::manifest::Label,
}

pub fn infer(a: InferArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config, "infer")?;
    let manifest: PathBuf = s.require("manifest", a.manifest)?;
    let svr_model: PathBuf = s.require("svr-model", a.svr_model)?;
    let mldn_model: PathBuf = s.require("mldn-model", a.mldn_model)?;
    let out = Output::parse(&s.pick("out", a.out, "-".to_string())?);
    let threshold = s.pick("threshold", a.threshold, 0.5)?;
    let model = MldnModel::load(&mldn_model)?;
    let (_, samples, locs) = localize_manifest(&mut s, &manifest, &svr_model, a.stride, a.boundary)?;
    let geo = LevelGeometry { input_size: model.config().aca.input_size, patch_size: model.config().patch_size, margin: 0 };
    let levels = EvalLevels::new(geo, build_levels(&samples, &locs, &geo)?);
    let probs = model.predict_levels(&levels)?;
    let mut text = String::new();
    for (sample, &p) in samples.iter().zip(&probs) {
        let label = if p >= threshold { octangle::manifest::Label::Closure } else { octangle::manifest::Label::Open };
        json_line(&mut text, &PredictionLine { image_path: sample.record.image_path.clone(), p_closure: p, label })?;
    }
    out.write(&text)?;
    if let Some(p) = out.path() {
        write_sidecar(p, "infer", &s, json!({ "images": samples.len() }))?;
    }
    Ok(())
}

pub fn eval(a: EvalArgs, config: Option<&Path>) -> Result<()> {
    let mut s = Settings::load(config, "eval")?;
    let predictions: PathBuf = s.require("predictions", a.predictions)?;
    let manifest: PathBuf = s.require("manifest", a.manifest)?;
    let out = Output::parse(&s.pick("out", a.out, "-".to_string())?);
    let roc_path: Option<PathBuf> = s.pick_opt("roc-csv", a.roc_csv)?;
    let resamples = s.pick("resamples", a.resamples, DEFAULT_RESAMPLES)?;
    let seed = s.pick("seed", a.seed, 0)?;
    let m = read_manifest(&manifest)?;
    let truth: HashMap<&str, u8> = m.records().iter().map(|r| (r.image_path.as_str(), r.label.as_class())).collect();
    let text = std::fs::read_to_string(&predictions).map_err(|e| octangle::Error::io(&predictions, e))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| {
            octangle::Error::ManifestLine { line: i + 1, message: format!("invalid prediction: {e}") }
        })?;
        let y = truth.get(p.image_path.as_str()).ok_or_else(|| {
            octangle::Error::invalid(format!("prediction for {} has no manifest record", p.image_path))
        })?;
        scores.push(p.p_closure);
        labels.push(*y);
    }
    let (report, curve) = evaluate(&scores, &labels, resamples, seed)?;
    out.write(&(serde_json::to_string_pretty(&report).map_err(octangle::Error::from)? + "\n"))?;
    if let Some(p) = &roc_path {
        std::fs::write(p, roc_csv(&curve)).map_err(|e| octangle::Error::io(p, e))?;
    }
    if let Some(p) = out.path() {
        write_sidecar(p, "eval", &s, json!({ "predictions": scores.len() }))?;
    }
    Ok(())
}
