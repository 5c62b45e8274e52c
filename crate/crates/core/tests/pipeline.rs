use octangle::manifest::{Label, SampleRecord, Side};
use octangle::metrics::DEFAULT_RESAMPLES;
use octangle::mldn::TrainConfig;
use octangle::pipeline::{
    fallback_spur, run_experiment, summarize_localization, with_threads, ExperimentConfig, Localization,
};
use octangle::{GrayImage, PixelPoint};

fn small_config() -> ExperimentConfig {
    let d = ExperimentConfig::default();
    let phase1 = TrainConfig { epochs: 2, batch_size: 8, ..d.phase1.clone() };
    let mut cfg = ExperimentConfig {
        n_samples: 28,
        input_size: 32,
        phase1: phase1.clone(),
        phase2: TrainConfig { epochs: 3, ..phase1 },
        bootstrap_resamples: 200,
        ..d
    };
    cfg.localizer.max_train_images = Some(8);
    cfg
}

#[test]
fn defaults_describe_the_benchmark_setup() {
    let d = ExperimentConfig::default();
    assert_eq!((d.seed, d.n_samples, d.input_size, d.patch_size), (42, 700, 112, 120));
    assert!(((d.n_samples as f64) * d.test_fraction - 200.0).abs() < 1e-9);
    assert_eq!((d.phase1.epochs, d.phase1.momentum, d.phase1.batch_size), (30, 0.9, 16));
    assert_eq!(d.bootstrap_resamples, DEFAULT_RESAMPLES);
    assert_eq!(d.geometry().margin, 8);
    assert_eq!(d.localization_tolerance_px, 10);
}

#[test]
fn small_experiment_is_thread_count_invariant() {
    let cfg = small_config();
    let run = |threads| with_threads(threads, || run_experiment(&cfg).unwrap()).unwrap();
    let (data, outcome) = run(1);
    let (_, again) = run(2);
    let a = serde_json::to_string(&outcome.report).unwrap();
    let b = serde_json::to_string(&again.report).unwrap();
    assert_eq!(a, b);

    let r = &outcome.report;
    assert_eq!(r.n_train + r.n_test, 28);
    assert_eq!(r.n_test, 8); // round(14 patients · 2/7) = 4 patients, two eyes each
    assert_eq!(r.localization.n, r.n_test);
    assert_eq!(r.phase1_final_loss.len(), 3);
    assert!(r.phase1_final_loss.iter().all(|l| l.is_finite()));
    assert!(r.localizer_images <= 8);
    assert_eq!(outcome.test_scores.len(), r.n_test);
    assert!(outcome.test_scores.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!((0.0..=1.0).contains(&r.classifier.auc));
    let train_patients: Vec<&str> = data.train.iter().map(|s| s.record.patient_id.as_str()).collect();
    assert!(data.test.iter().all(|s| !train_patients.contains(&s.record.patient_id.as_str())));
}

fn sample(v: usize) -> octangle::manifest::LoadedSample {
    octangle::manifest::LoadedSample {
        image: GrayImage::zeros(10, 20),
        ss_truth: Some(PixelPoint::new(5, v)),
        record: SampleRecord {
            image_path: format!("{v}.pgm"),
            patient_id: "p".into(),
            side: Side::Left,
            label: Label::Open,
            ss_truth: Some(PixelPoint::new(5, v)),
        },
    }
}

#[test]
fn localization_summary_counts_column_errors() {
    let samples: Vec<_> = [100, 100, 100, 100].iter().map(|&v| sample(v)).collect();
    let locs: Vec<Localization> = [104, 89, 110, 100]
        .iter()
        .map(|&v| Localization { ss_pred: PixelPoint::new(0, v), score: Some(0.0), fallback: false })
        .collect();
    let s = summarize_localization(&samples, &locs, 10).unwrap();
    assert_eq!((s.n, s.within_tolerance, s.max_abs_err, s.fallbacks), (4, 3, 11, 0));
    assert_eq!(s.median_abs_err, 7.0);
    assert_eq!(s.fraction_within, 0.75);
    assert_eq!(fallback_spur(400, 600), PixelPoint::new(200, 150));
}
