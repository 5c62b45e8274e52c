//! Procedural anterior-segment images with exact ground truth.
//!
//! Geometry (left-side angle, `u` down, `v` right):
//! * corneal bottom `b(v) = b0 + k2 D² + k4 D⁴`, `D = v − apex_col`, with
//!   `b(apex_col) = apex_row` and `b(0) = left_row`;
//! * corneal top `b(v) − (t0 + t2 D²)`, thickness `t0` at the apex growing by
//!   `thickness_growth · t0` at column 0;
//! * iris upper surface `b(v) + (tan(α + θ) − tan α) Δ + κ Δ²`, `Δ = v − v_s`,
//!   for `Δ ∈ [0, iris_length]`, where `α = atan b′(v_s)`: it leaves the
//!   cornea at the spur with aperture `θ = angle_deg` and then falls away
//!   with curvature `κ = iris_sag`;
//! * iris thickness ramps up from 0 at the spur and tapers at the tip.
//!
//! Rows are rendered with exact fractional coverage (pixel `u` spans
//! `[u − ½, u + ½)`), then scaled by `gain`, corrupted by multiplicative
//! speckle `x (1 + speckle · n)`, `n ~ N(0, 1)`, and clipped to `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, PixelPoint};
use crate::manifest::{write_manifest, Label, Manifest, SampleRecord, Side};

/// Angles strictly below this many degrees are labelled closure.
pub const CLOSURE_ANGLE_DEG: f64 = 6.0;
/// Minimum distance of the spur from the left and bottom image edges.
pub const SPUR_MARGIN: usize = 130;
const IRIS_ROOT_TAPER: f64 = 25.0;
const IRIS_TIP_TAPER: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub apex_col: f64,
    pub apex_row: f64,
    pub left_row: f64,
    /// Share of the apex-to-left drop carried by the quartic term.
    pub quartic_share: f64,
    pub thickness_apex: f64,
    pub thickness_growth: f64,
    pub spur_col: usize,
    pub angle_deg: f64,
    pub iris_length: f64,
    pub iris_thickness: f64,
    pub iris_sag: f64,
    pub cornea_intensity: f64,
    pub iris_intensity: f64,
    pub background: f64,
    pub speckle: f64,
    pub gain: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 400,
            width: 600,
            apex_col: 420.0,
            apex_row: 110.0,
            left_row: 350.0,
            quartic_share: 0.2,
            thickness_apex: 50.0,
            thickness_growth: 0.5,
            spur_col: 180,
            angle_deg: 20.0,
            iris_length: 220.0,
            iris_thickness: 28.0,
            iris_sag: 0.002,
            cornea_intensity: 0.8,
            iris_intensity: 0.7,
            background: 0.06,
            speckle: 0.25,
            gain: 1.0,
            seed: 0,
        }
    }
}

fn coverage(top: f64, bottom: f64, u: usize) -> f64 {
    let (lo, hi) = (u as f64 - 0.5, u as f64 + 0.5);
    (bottom.min(hi) - top.max(lo)).clamp(0.0, 1.0)
}

impl SynthParams {
    fn d(&self, v: f64) -> f64 {
        v - self.apex_col
    }

    fn bottom_coefficients(&self) -> (f64, f64) {
        let drop = self.left_row - self.apex_row;
        let d0 = self.apex_col;
        ((1.0 - self.quartic_share) * drop / (d0 * d0), self.quartic_share * drop / d0.powi(4))
    }

    /// Ground-truth corneal bottom row at column `v`.
    pub fn bottom_row(&self, v: f64) -> f64 {
        let (k2, k4) = self.bottom_coefficients();
        let d = self.d(v);
        self.apex_row + k2 * d * d + k4 * d.powi(4)
    }

    fn bottom_slope(&self, v: f64) -> f64 {
        let (k2, k4) = self.bottom_coefficients();
        let d = self.d(v);
        2.0 * k2 * d + 4.0 * k4 * d.powi(3)
    }

    /// Ground-truth corneal top row at column `v`.
    pub fn upper_row(&self, v: f64) -> f64 {
        let t2 = self.thickness_growth * self.thickness_apex / (self.apex_col * self.apex_col);
        let d = self.d(v);
        self.bottom_row(v) - (self.thickness_apex + t2 * d * d)
    }

    /// Gap-per-column between the iris surface and the cornea.
    fn opening_rate(&self) -> f64 {
        let alpha = self.bottom_slope(self.spur_col as f64).atan();
        (alpha + self.angle_deg.to_radians()).tan() - alpha.tan()
    }

    /// Iris upper and lower rows at column `v`, if the iris spans it.
    pub fn iris_rows(&self, v: f64) -> Option<(f64, f64)> {
        let dv = v - self.spur_col as f64;
        if dv < 0.0 || dv > self.iris_length {
            return None;
        }
        let top = self.bottom_row(v) + self.opening_rate() * dv + self.iris_sag * dv * dv;
        let taper = (dv / IRIS_ROOT_TAPER).min((self.iris_length - dv) / IRIS_TIP_TAPER).clamp(0.0, 1.0);
        Some((top, top + self.iris_thickness * taper))
    }

    pub fn label(&self) -> Label {
        if self.angle_deg < CLOSURE_ANGLE_DEG {
            Label::Closure
        } else {
            Label::Open
        }
    }

    /// Ground-truth spur: the point where the iris leaves the corneal bottom.
    pub fn spur(&self) -> PixelPoint {
        PixelPoint::new(self.bottom_row(self.spur_col as f64).round() as usize, self.spur_col)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("invalid synthetic geometry: {m}")));
        if self.height <= 2 * SPUR_MARGIN || self.width <= 2 * SPUR_MARGIN {
            return bad(format!("canvas {}x{} too small", self.height, self.width));
        }
        if !(self.angle_deg >= 0.0) {
            return bad(format!("angle {} must be non-negative", self.angle_deg));
        }
        if self.spur_col < SPUR_MARGIN {
            return bad(format!("spur column {} closer than {SPUR_MARGIN} px to the left edge", self.spur_col));
        }
        let spur_row = self.bottom_row(self.spur_col as f64);
        if !(spur_row >= 0.0 && spur_row <= (self.height - 1 - SPUR_MARGIN) as f64) {
            return bad(format!("spur row {spur_row:.1} closer than {SPUR_MARGIN} px to the bottom edge"));
        }
        if self.bottom_slope(self.spur_col as f64).atan() + self.angle_deg.to_radians() >= std::f64::consts::FRAC_PI_2 {
            return bad("iris would turn past vertical".into());
        }
        if !(self.apex_col > 0.0 && self.left_row > self.apex_row && (0.0..=1.0).contains(&self.quartic_share)) {
            return bad("corneal arc parameters out of range".into());
        }
        if !(self.gain > 0.0 && self.speckle >= 0.0 && self.iris_length > 0.0 && self.iris_thickness > 0.0 && self.iris_sag >= 0.0) {
            return bad("gain, iris size must be positive and speckle non-negative".into());
        }
        // The generated iris surface meets the corneal bottom exactly at the spur.
        let (top, _) = self.iris_rows(self.spur_col as f64).expect("spur column is on the iris");
        debug_assert!((top - spur_row).abs() < 1e-9);
        Ok(())
    }

    /// Noise-free rendering before gain.
    fn render_clean(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![self.background; h * w];
        for v in 0..w {
            let vf = v as f64;
            let (ct, cb) = (self.upper_row(vf), self.bottom_row(vf));
            let iris = self.iris_rows(vf);
            for u in 0..h {
                let mut x = self.background + (self.cornea_intensity - self.background) * coverage(ct, cb, u);
                if let Some((it, ib)) = iris {
                    x += (self.iris_intensity - self.background) * coverage(it, ib, u);
                }
                data[u * w + v] = x;
            }
        }
        data
    }
}

/// Renders one sample in left orientation. The record's path is left empty
/// for the caller to fill in.
pub fn generate_sample(params: &SynthParams) -> Result<(GrayImage, SampleRecord)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let data = params
        .render_clean()
        .into_iter()
        .map(|x| {
            let x = x * params.gain;
            if params.speckle > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                x * (1.0 + params.speckle * n)
            } else {
                x
            }
        })
        .collect();
    let image = GrayImage::from_clamped(params.height, params.width, data);
    let record = SampleRecord {
        image_path: String::new(),
        patient_id: String::new(),
        side: Side::Left,
        label: params.label(),
        ss_truth: Some(params.spur()),
    };
    Ok((image, record))
}

/// Uniform ranges `[lo, hi]` the dataset generator draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRanges {
    pub apex_col: (f64, f64),
    pub apex_row: (f64, f64),
    pub left_row: (f64, f64),
    pub quartic_share: (f64, f64),
    pub thickness_apex: (f64, f64),
    pub thickness_growth: (f64, f64),
    pub spur_col: (usize, usize),
    pub closure_angle: (f64, f64),
    pub open_angle: (f64, f64),
    pub iris_length: (f64, f64),
    pub iris_thickness: (f64, f64),
    pub iris_sag: (f64, f64),
    pub speckle: (f64, f64),
    pub gain: (f64, f64),
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self {
            apex_col: (380.0, 450.0),
            apex_row: (90.0, 130.0),
            left_row: (330.0, 370.0),
            quartic_share: (0.0, 0.4),
            thickness_apex: (40.0, 60.0),
            thickness_growth: (0.3, 0.8),
            spur_col: (140, 220),
            closure_angle: (1.0, 5.0),
            open_angle: (8.0, 40.0),
            iris_length: (180.0, 260.0),
            iris_thickness: (22.0, 34.0),
            iris_sag: (0.0015, 0.003),
            speckle: (0.15, 0.35),
            gain: (0.8, 1.2),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Parameters of sample `index` of a dataset: drawn from `ranges` with
/// ChaCha8 stream `index` of `seed`.
pub fn sample_params(index: usize, label: Label, ranges: &SynthRanges, seed: u64) -> SynthParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let angle_range = match label {
        Label::Closure => ranges.closure_angle,
        Label::Open => ranges.open_angle,
    };
    let mut p = SynthParams {
        apex_col: draw(&mut rng, ranges.apex_col),
        apex_row: draw(&mut rng, ranges.apex_row),
        left_row: draw(&mut rng, ranges.left_row),
        quartic_share: draw(&mut rng, ranges.quartic_share),
        thickness_apex: draw(&mut rng, ranges.thickness_apex),
        thickness_growth: draw(&mut rng, ranges.thickness_growth),
        spur_col: rng.random_range(ranges.spur_col.0..=ranges.spur_col.1),
        angle_deg: draw(&mut rng, angle_range),
        iris_length: draw(&mut rng, ranges.iris_length),
        iris_thickness: draw(&mut rng, ranges.iris_thickness),
        iris_sag: draw(&mut rng, ranges.iris_sag),
        speckle: draw(&mut rng, ranges.speckle),
        gain: draw(&mut rng, ranges.gain),
        ..SynthParams::default()
    };
    p.seed = rng.random();
    p
}

/// Labels for `n` samples: `round(n · class_balance)` closures at positions
/// chosen by a seeded shuffle.
fn dataset_labels(n: usize, class_balance: f64, seed: u64) -> Vec<Label> {
    use rand::seq::SliceRandom;
    let n_closure = (n as f64 * class_balance).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_closure { Label::Closure } else { Label::Open }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    labels
}

/// A generated sample as stored on disk (right-side samples mirrored).
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub params: SynthParams,
    pub image: GrayImage,
    pub record: SampleRecord,
}

/// Generates `n` samples in memory. Samples `2k` and `2k + 1` share patient
/// `p{k}` as its left and right eye; right-eye images and spur columns are
/// mirrored as a right-side acquisition would be.
pub fn generate_samples(n: usize, class_balance: f64, ranges: &SynthRanges, seed: u64) -> Result<Vec<GeneratedSample>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    if !(0.0..=1.0).contains(&class_balance) {
        return Err(Error::invalid(format!("class balance {class_balance} outside [0, 1]")));
    }
    let labels = dataset_labels(n, class_balance, seed);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let params = sample_params(i, labels[i], ranges, seed);
            let (image, mut record) = generate_sample(&params)?;
            record.image_path = format!("img_{i:05}.pgm");
            record.patient_id = format!("p{:04}", i / 2);
            let (image, record) = if i % 2 == 1 {
                let w = image.width();
                record.side = Side::Right;
                record.ss_truth = record.ss_truth.map(|p| PixelPoint::new(p.u, w - 1 - p.v));
                (image.flip_horizontal(), record)
            } else {
                (image, record)
            };
            Ok(GeneratedSample { params, image, record })
        })
        .collect()
}

/// Header comment lines recording the generator conventions.
pub fn manifest_header(n: usize, class_balance: f64, seed: u64, ranges: &SynthRanges) -> Vec<String> {
    vec![
        format!("octangle synthetic dataset: n={n} class_balance={class_balance} seed={seed}"),
        format!(
            "conventions: canvas 400x600, label closure iff angle_deg < {CLOSURE_ANGLE_DEG}, cornea 0.8, iris 0.7, \
             background 0.06, multiplicative gaussian speckle, two samples per patient (left, right mirrored)"
        ),
        format!("ranges: {}", serde_json::to_string(ranges).expect("ranges serialise")),
    ]
}

/// Writes images (PGM), the manifest `manifest.jsonl` and per-sample
/// generator parameters `truth.jsonl` into `out_dir`.
pub fn generate_dataset(n: usize, class_balance: f64, ranges: &SynthRanges, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let samples = generate_samples(n, class_balance, ranges, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    samples.par_iter().try_for_each(|s| s.image.save_pgm(out_dir.join(&s.record.image_path)))?;
    let mut truth = String::new();
    for s in &samples {
        truth.push_str(&serde_json::to_string(&s.params)?);
        truth.push('\n');
    }
    let truth_path = out_dir.join("truth.jsonl");
    fs::write(&truth_path, truth).map_err(|e| Error::io(&truth_path, e))?;
    let mut manifest = Manifest::new(samples.into_iter().map(|s| s.record).collect())?;
    manifest.comments = manifest_header(n, class_balance, seed, ranges);
    write_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
