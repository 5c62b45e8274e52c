//! End-to-end glue: boundary detection, spur localisation, level
//! preparation, two-phase classifier training and evaluation.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aca::{detect_aca, make_training_windows, AcaConfig};
use crate::augment::{AugmentConfig, EvalLevels, LevelGeometry, LevelSample, LevelSource, TrainingLevels};
use crate::cornea::{detect_boundary, BoundaryParams, CornealBoundary};
use crate::error::{Error, Result};
use crate::image::PixelPoint;
use crate::manifest::{load_sample, orient_sample, split_by_patient, LoadedSample, Manifest, TrainingManifest};
use crate::metrics::{evaluate, EvalReport, DEFAULT_RESAMPLES};
use crate::mldn::{MldnConfig, MldnModel, TrainConfig};
use crate::svr::{svr_train, SvrModel, SvrParams, SvrTrainReport, SvrTrainSet};
use crate::synth::{generate_samples, SynthRanges};

/// Runs `f` on a dedicated pool of `threads` workers (`0` = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build a {threads}-thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loads every record of `manifest`, resolving paths against `base_dir`.
pub fn load_samples(manifest: &Manifest, base_dir: &Path) -> Result<Vec<LoadedSample>> {
    manifest.records().par_iter().map(|r| load_sample(base_dir, r)).collect()
}

/// Corneal boundaries of every sample; `None` where the fit failed.
pub fn detect_boundaries(samples: &[LoadedSample], params: &BoundaryParams) -> Vec<Option<CornealBoundary>> {
    samples.par_iter().map(|s| detect_boundary(&s.image, params).ok()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub boundary: BoundaryParams,
    pub aca: AcaConfig,
    pub svr: SvrParams,
    /// Cap on the number of images whose windows train the regressor.
    pub max_train_images: Option<usize>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            boundary: BoundaryParams::default(),
            aca: AcaConfig::default(),
            svr: SvrParams { tol: 1e-4, ..SvrParams::default() },
            max_train_images: Some(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerTraining {
    pub model: SvrModel,
    pub report: SvrTrainReport,
    pub n_images: usize,
    pub n_windows: usize,
}

/// Trains the window regressor on samples with ground truth and a boundary,
/// taken in order up to the configured cap.
pub fn train_localizer(
    samples: &[LoadedSample],
    boundaries: &[Option<CornealBoundary>],
    cfg: &LocalizerConfig,
) -> Result<LocalizerTraining> {
    let usable: Vec<(&LoadedSample, PixelPoint, &CornealBoundary)> = samples
        .iter()
        .zip(boundaries)
        .filter_map(|(s, b)| Some((s, s.ss_truth?, b.as_ref()?)))
        .take(cfg.max_train_images.unwrap_or(usize::MAX))
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no training image has both a spur annotation and a detected boundary"));
    }
    let parts = usable
        .par_iter()
        .map(|&(s, ss, b)| make_training_windows(&s.image, b, ss, &cfg.aca))
        .collect::<Result<Vec<_>>>()?;
    let mut set = SvrTrainSet::new(cfg.aca.descriptor_dim()?);
    for p in &parts {
        set.extend(p)?;
    }
    let (model, report) = svr_train(&set, &cfg.svr)?;
    Ok(LocalizerTraining { model, report, n_images: usable.len(), n_windows: set.len() })
}

/// Predicted spur of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub ss_pred: PixelPoint,
    /// Regression score of the winning window; absent for a fallback.
    pub score: Option<f64>,
    /// The boundary could not be fitted and the default position was used.
    pub fallback: bool,
}

/// Position used when no boundary is available: mid-height, first quarter.
pub fn fallback_spur(height: usize, width: usize) -> PixelPoint {
    PixelPoint::new(height / 2, width / 4)
}

pub fn localize(
    samples: &[LoadedSample],
    boundaries: &[Option<CornealBoundary>],
    model: &SvrModel,
    aca: &AcaConfig,
) -> Result<Vec<Localization>> {
    samples
        .par_iter()
        .zip(boundaries)
        .map(|(s, b)| match b {
            Some(b) => {
                let d = detect_aca(&s.image, b, model, aca)?;
                Ok(Localization { ss_pred: d.ss_pred, score: Some(d.score), fallback: false })
            }
            None => Ok(Localization {
                ss_pred: fallback_spur(s.image.height(), s.image.width()),
                score: None,
                fallback: true,
            }),
        })
        .collect()
}

/// Column-error statistics against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub n: usize,
    pub tolerance_px: usize,
    pub within_tolerance: usize,
    pub fraction_within: f64,
    pub median_abs_err: f64,
    pub max_abs_err: usize,
    pub fallbacks: usize,
}

pub fn summarize_localization(samples: &[LoadedSample], locs: &[Localization], tolerance_px: usize) -> Result<LocalizationSummary> {
    let mut errs: Vec<usize> = samples
        .iter()
        .zip(locs)
        .filter_map(|(s, l)| s.ss_truth.map(|t| t.v.abs_diff(l.ss_pred.v)))
        .collect();
    if errs.is_empty() {
        return Err(Error::invalid("no annotated samples to summarise"));
    }
    errs.sort_unstable();
    let n = errs.len();
    let median = if n % 2 == 1 { errs[n / 2] as f64 } else { (errs[n / 2 - 1] + errs[n / 2]) as f64 / 2.0 };
    let within = errs.iter().filter(|&&e| e <= tolerance_px).count();
    Ok(LocalizationSummary {
        n,
        tolerance_px,
        within_tolerance: within,
        fraction_within: within as f64 / n as f64,
        median_abs_err: median,
        max_abs_err: errs[n - 1],
        fallbacks: locs.iter().filter(|l| l.fallback).count(),
    })
}

/// Levels of every sample around its predicted spur.
pub fn build_levels(samples: &[LoadedSample], locs: &[Localization], geo: &LevelGeometry) -> Result<Vec<LevelSample>> {
    samples
        .par_iter()
        .zip(locs)
        .map(|(s, l)| {
            LevelSample::prepare(
                &s.image,
                l.ss_pred,
                s.record.label.as_class(),
                &s.record.patient_id,
                &s.record.image_path,
                geo,
            )
        })
        .collect()
}

/// Settings of a complete synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub class_balance: f64,
    pub test_fraction: f64,
    pub ranges: SynthRanges,
    pub localizer: LocalizerConfig,
    pub localization_tolerance_px: usize,
    pub input_size: usize,
    pub patch_size: usize,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub end_to_end: bool,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let phase1 = TrainConfig { epochs: 30, learning_rate: 0.01, seed: 42, ..TrainConfig::default() };
        let phase2 = TrainConfig { learning_rate: 0.01, ..phase1.clone() };
        Self {
            seed: 42,
            n_samples: 700,
            class_balance: 0.5,
            test_fraction: 2.0 / 7.0,
            ranges: SynthRanges::default(),
            localizer: LocalizerConfig::default(),
            localization_tolerance_px: 10,
            input_size: 112,
            patch_size: 120,
            phase1,
            phase2,
            end_to_end: false,
            bootstrap_resamples: DEFAULT_RESAMPLES,
        }
    }
}

impl ExperimentConfig {
    pub fn geometry(&self) -> LevelGeometry {
        LevelGeometry {
            input_size: self.input_size,
            patch_size: self.patch_size,
            margin: self.phase1.augment.max_shift().max(self.phase2.augment.max_shift()),
        }
    }

    /// Same experiment with a different training augmentation in both phases.
    pub fn with_augment(&self, augment: AugmentConfig) -> Self {
        let mut c = self.clone();
        c.phase1.augment = augment.clone();
        c.phase2.augment = augment;
        c
    }
}

/// Everything upstream of the classifier, shared by experiments that differ
/// only in classifier training.
pub struct PreparedData {
    pub train_manifest: TrainingManifest,
    pub train: Vec<LoadedSample>,
    pub test: Vec<LoadedSample>,
    pub localizer: LocalizerTraining,
    pub train_locs: Vec<Localization>,
    pub test_locs: Vec<Localization>,
    pub localization: LocalizationSummary,
}

/// Generates the synthetic data set, splits it by patient, trains the
/// localizer on the training split and localises every image.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let generated = generate_samples(cfg.n_samples, cfg.class_balance, &cfg.ranges, cfg.seed)?;
    let samples = generated.into_iter().map(|g| orient_sample(g.image, &g.record)).collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(samples.iter().map(|s| s.record.clone()).collect())?;
    let (train_manifest, test_manifest) = split_by_patient(&manifest, cfg.test_fraction, cfg.seed)?;
    let mut by_path: HashMap<String, LoadedSample> = samples.into_iter().map(|s| (s.record.image_path.clone(), s)).collect();
    let mut take = |m: &Manifest| -> Vec<LoadedSample> {
        m.records().iter().map(|r| by_path.remove(&r.image_path).expect("split records come from the manifest")).collect()
    };
    let train = take(train_manifest.manifest());
    let test = take(&test_manifest);

    let train_bounds = detect_boundaries(&train, &cfg.localizer.boundary);
    let test_bounds = detect_boundaries(&test, &cfg.localizer.boundary);
    let localizer = train_localizer(&train, &train_bounds, &cfg.localizer)?;
    let train_locs = localize(&train, &train_bounds, &localizer.model, &cfg.localizer.aca)?;
    let test_locs = localize(&test, &test_bounds, &localizer.model, &cfg.localizer.aca)?;
    let localization = summarize_localization(&test, &test_locs, cfg.localization_tolerance_px)?;
    Ok(PreparedData { train_manifest, train, test, localizer, train_locs, test_locs, localization })
}

/// Deterministic summary of one experiment; contains no timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub localizer_images: usize,
    pub localizer_windows: usize,
    pub localizer_iterations: usize,
    pub localizer_converged: bool,
    pub localization: LocalizationSummary,
    pub phase1_final_loss: Vec<f64>,
    pub phase2_final_loss: Option<f64>,
    pub classifier: EvalReport,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub model: MldnModel,
    pub train_levels: TrainingLevels,
    pub test_levels: EvalLevels,
    pub test_scores: Vec<f64>,
}

/// Trains and evaluates the classifier on prepared data.
pub fn run_classifier(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentOutcome> {
    let geo = cfg.geometry();
    let train_levels = TrainingLevels::new(&data.train_manifest, geo, build_levels(&data.train, &data.train_locs, &geo)?)?;
    let test_levels = EvalLevels::new(geo, build_levels(&data.test, &data.test_locs, &geo)?);
    let mut model = MldnModel::new(MldnConfig { patch_size: cfg.patch_size, ..MldnConfig::desk(cfg.input_size, cfg.seed) })?;
    model.train_phase1(&train_levels, &cfg.phase1)?;
    model.train_phase2(&train_levels, &cfg.phase2, cfg.end_to_end)?;
    let test_scores = model.predict_levels(&test_levels)?;
    let (classifier, _) = evaluate(&test_scores, &test_levels.labels(), cfg.bootstrap_resamples, cfg.seed)?;
    let log = model.train_log();
    let report = ExperimentReport {
        seed: cfg.seed,
        n_train: data.train.len(),
        n_test: data.test.len(),
        localizer_images: data.localizer.n_images,
        localizer_windows: data.localizer.n_windows,
        localizer_iterations: data.localizer.report.iterations,
        localizer_converged: data.localizer.report.converged,
        localization: data.localization.clone(),
        phase1_final_loss: log.phase1.iter().filter_map(|b| b.epoch_losses.last().copied()).collect(),
        phase2_final_loss: log.phase2.last().copied(),
        classifier,
    };
    Ok(ExperimentOutcome { report, model, train_levels, test_levels, test_scores })
}

/// Full synthetic experiment from generation to metrics.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(PreparedData, ExperimentOutcome)> {
    let data = prepare_data(cfg)?;
    let outcome = run_classifier(cfg, &data)?;
    Ok((data, outcome))
}
