//! Classifier inputs at three levels and their training-time augmentation:
//! intensity re-scaling on every level and spur-centre shifts on the patch.

use serde::{Deserialize, Serialize};

use crate::aca::extract_levels;
use crate::error::{Error, Result};
use crate::image::{GrayImage, PixelPoint};
use crate::manifest::TrainingManifest;

/// One of the three classifier inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Global,
    Local,
    Aca,
}

impl Branch {
    /// Concatenation order of the merge layer.
    pub const ALL: [Branch; 3] = [Branch::Global, Branch::Local, Branch::Aca];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Local => "local",
            Branch::Aca => "aca",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Branch::Global => 0,
            Branch::Local => 1,
            Branch::Aca => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub intensity_factors: Vec<f64>,
    /// `(du, dv)` displacements of the patch centre in pixels.
    pub shift_offsets: Vec<(i64, i64)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let steps = [0, -8, 8];
        Self {
            intensity_factors: vec![0.5, 1.0, 1.5],
            shift_offsets: steps.iter().flat_map(|&du| steps.iter().map(move |&dv| (du, dv))).collect(),
        }
    }
}

impl AugmentConfig {
    /// No augmentation: factor 1 and no shift.
    pub fn identity() -> Self {
        Self { intensity_factors: vec![1.0], shift_offsets: vec![(0, 0)] }
    }

    /// Intensity re-scaling only.
    pub fn intensity_only() -> Self {
        Self { shift_offsets: vec![(0, 0)], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intensity_factors.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::invalid("intensity factors must be positive"));
        }
        if !self.intensity_factors.contains(&1.0) {
            return Err(Error::invalid("intensity factors must include 1"));
        }
        if self.shift_offsets.is_empty() {
            return Err(Error::invalid("at least one shift offset is required"));
        }
        Ok(())
    }

    /// Largest absolute offset component, the margin the patch source needs.
    pub fn max_shift(&self) -> usize {
        self.shift_offsets.iter().map(|&(a, b)| a.unsigned_abs().max(b.unsigned_abs())).max().unwrap_or(0) as usize
    }

    /// Number of variants per source sample.
    pub fn variants(&self) -> usize {
        self.intensity_factors.len() * self.shift_offsets.len()
    }

    /// Variant `index` as `(factor, offset)`, factors outermost.
    pub fn variant(&self, index: usize) -> (f64, (i64, i64)) {
        let n = self.shift_offsets.len();
        (self.intensity_factors[index / n], self.shift_offsets[index % n])
    }
}

/// Per-pixel `min(1, k · i)`.
pub fn scale_intensity(img: &GrayImage, k: f64) -> Result<GrayImage> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::invalid(format!("intensity factor must be positive, got {k}")));
    }
    if k == 1.0 {
        return Ok(img.clone());
    }
    Ok(GrayImage::from_clamped(img.height(), img.width(), img.data().iter().map(|x| (k * x).min(1.0)).collect()))
}

/// `size × size` crop centred at `ss + offset`, zero-padded at the borders.
pub fn shift_patch(img: &GrayImage, ss: PixelPoint, offset: (i64, i64), size: usize) -> GrayImage {
    img.crop_at(ss.u as isize + offset.0 as isize, ss.v as isize + offset.1 as isize, size, size)
}

/// Input sizes of the three levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    /// Side of the square network input for every branch.
    pub input_size: usize,
    /// Side of the spur-centred patch before resizing.
    pub patch_size: usize,
    /// Extra border kept around the patch so shifted crops stay exact.
    pub margin: usize,
}

impl LevelGeometry {
    fn source_size(&self) -> usize {
        self.patch_size + 2 * self.margin
    }
}

/// Network-ready levels of one sample. `global` and `local` are already
/// resized; `patch_source` is the un-resized neighbourhood of the spur.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSample {
    pub global: GrayImage,
    pub local: GrayImage,
    pub patch_source: GrayImage,
    /// Class index: 1 closure, 0 open.
    pub label: u8,
    pub patient_id: String,
    pub image_path: String,
}

impl LevelSample {
    /// Builds the levels of `img` (left-oriented) around the detected spur.
    pub fn prepare(img: &GrayImage, ss_pred: PixelPoint, label: u8, patient_id: &str, image_path: &str, geo: &LevelGeometry) -> Result<Self> {
        let levels = extract_levels(img, ss_pred, geo.source_size())?;
        Ok(Self {
            global: levels.global.resize_bilinear(geo.input_size, geo.input_size)?,
            local: levels.local.resize_bilinear(geo.input_size, geo.input_size)?,
            patch_source: levels.patch,
            label,
            patient_id: patient_id.to_string(),
            image_path: image_path.to_string(),
        })
    }

    /// The input of `branch` under intensity factor `k` and patch offset.
    pub fn input(&self, branch: Branch, geo: &LevelGeometry, k: f64, offset: (i64, i64)) -> Result<GrayImage> {
        let base = match branch {
            Branch::Global => self.global.clone(),
            Branch::Local => self.local.clone(),
            Branch::Aca => {
                if offset.0.unsigned_abs() as usize > geo.margin || offset.1.unsigned_abs() as usize > geo.margin {
                    return Err(Error::invalid(format!("offset {offset:?} exceeds the patch margin {}", geo.margin)));
                }
                let c = (geo.source_size() / 2) as isize;
                let patch = self.patch_source.crop_at(c + offset.0 as isize, c + offset.1 as isize, geo.patch_size, geo.patch_size);
                patch.resize_bilinear(geo.input_size, geo.input_size)?
            }
        };
        scale_intensity(&base, k)
    }
}

/// Shared access to a list of level samples.
pub trait LevelSource: Sync {
    fn geometry(&self) -> &LevelGeometry;
    fn samples(&self) -> &[LevelSample];

    fn len(&self) -> usize {
        self.samples().len()
    }

    fn is_empty(&self) -> bool {
        self.samples().is_empty()
    }

    fn labels(&self) -> Vec<u8> {
        self.samples().iter().map(|s| s.label).collect()
    }

    /// Un-augmented input of `branch` for sample `i`.
    fn plain_input(&self, branch: Branch, i: usize) -> Result<GrayImage> {
        self.samples()[i].input(branch, self.geometry(), 1.0, (0, 0))
    }
}

/// Levels of an evaluation split. Offers no augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalLevels {
    geometry: LevelGeometry,
    samples: Vec<LevelSample>,
}

impl EvalLevels {
    pub fn new(geometry: LevelGeometry, samples: Vec<LevelSample>) -> Self {
        Self { geometry, samples }
    }

    /// A copy with every level's intensities scaled by `k` (a perturbed test set).
    pub fn perturbed(&self, k: f64) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(LevelSample {
                    global: scale_intensity(&s.global, k)?,
                    local: scale_intensity(&s.local, k)?,
                    patch_source: scale_intensity(&s.patch_source, k)?,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { geometry: self.geometry, samples })
    }
}

impl LevelSource for EvalLevels {
    fn geometry(&self) -> &LevelGeometry {
        &self.geometry
    }

    fn samples(&self) -> &[LevelSample] {
        &self.samples
    }
}

/// Levels of a training split: the only source that hands out augmented variants.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLevels {
    geometry: LevelGeometry,
    samples: Vec<LevelSample>,
}

impl TrainingLevels {
    /// Pairs prepared levels with the training manifest they came from; the
    /// samples must correspond one-to-one, in order, to its records.
    pub fn new(manifest: &TrainingManifest, geometry: LevelGeometry, samples: Vec<LevelSample>) -> Result<Self> {
        let records = manifest.manifest().records();
        if records.len() != samples.len() {
            return Err(Error::Dimension { expected: records.len(), got: samples.len() });
        }
        if let Some((r, s)) = records.iter().zip(&samples).find(|(r, s)| r.image_path != s.image_path) {
            return Err(Error::invalid(format!("level sample {} does not match record {}", s.image_path, r.image_path)));
        }
        Ok(Self { geometry, samples })
    }

    /// Input of `branch` for sample `i` under augmentation variant `(k, offset)`.
    /// Global and local levels receive the intensity factor only.
    pub fn augmented_input(&self, branch: Branch, i: usize, k: f64, offset: (i64, i64)) -> Result<GrayImage> {
        let offset = if branch == Branch::Aca { offset } else { (0, 0) };
        self.samples[i].input(branch, &self.geometry, k, offset)
    }
}

impl LevelSource for TrainingLevels {
    fn geometry(&self) -> &LevelGeometry {
        &self.geometry
    }

    fn samples(&self) -> &[LevelSample] {
        &self.samples
    }
}

/// One fully materialised augmented training triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub global: GrayImage,
    pub local: GrayImage,
    pub patch: GrayImage,
    pub label: u8,
    pub patient_id: String,
    pub source_index: usize,
    pub factor: f64,
    pub offset: (i64, i64),
}

/// Every combination of source sample × intensity factor × offset, in that
/// nesting order.
pub fn expand_training_set(levels: &TrainingLevels, cfg: &AugmentConfig) -> Result<Vec<AugmentedSample>> {
    cfg.validate()?;
    if cfg.max_shift() > levels.geometry.margin {
        return Err(Error::invalid(format!("shift {} exceeds the patch margin {}", cfg.max_shift(), levels.geometry.margin)));
    }
    let mut out = Vec::with_capacity(levels.len() * cfg.variants());
    for (i, s) in levels.samples.iter().enumerate() {
        for &k in &cfg.intensity_factors {
            let global = levels.augmented_input(Branch::Global, i, k, (0, 0))?;
            let local = levels.augmented_input(Branch::Local, i, k, (0, 0))?;
            for &offset in &cfg.shift_offsets {
                out.push(AugmentedSample {
                    global: global.clone(),
                    local: local.clone(),
                    patch: levels.augmented_input(Branch::Aca, i, k, offset)?,
                    label: s.label,
                    patient_id: s.patient_id.clone(),
                    source_index: i,
                    factor: k,
                    offset,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_examples() {
        let img = GrayImage::new(1, 1, vec![0.8]).unwrap();
        assert_eq!(scale_intensity(&img, 1.5).unwrap().data(), &[1.0]);
        assert!((scale_intensity(&img, 0.5).unwrap().data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(scale_intensity(&img, 1.0).unwrap(), img);
        assert!(scale_intensity(&img, 0.0).is_err());
    }

    #[test]
    fn shifted_patch_moves_with_offset_on_ramp() {
        let img = GrayImage::from_fn(300, 300, |_, v| v as f64 / 299.0);
        let ss = PixelPoint::new(150, 150);
        let base = shift_patch(&img, ss, (0, 0), 120);
        assert_eq!(base, img.crop(ss, 120, 120));
        let moved = shift_patch(&img, ss, (0, 8), 120);
        for u in 0..120 {
            for v in 0..112 {
                assert_eq!(moved.get(u, v), base.get(u, v + 8));
            }
        }
    }

    #[test]
    fn defaults_give_nine_offsets_and_validate() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.shift_offsets.len(), 9);
        assert_eq!(cfg.variants(), 27);
        assert_eq!(cfg.max_shift(), 8);
        cfg.validate().unwrap();
        assert!(AugmentConfig { intensity_factors: vec![0.5], ..AugmentConfig::default() }.validate().is_err());
        assert_eq!(cfg.variant(10), (1.0, (0, -8)));
    }
}
