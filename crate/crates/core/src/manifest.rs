//! Dataset manifest: one JSON object per line describing a sample image.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, GrayImage, PixelPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Open,
    Closure,
}

impl Label {
    /// Class index used by the classifier: closure is the positive class.
    pub fn as_class(self) -> u8 {
        match self {
            Label::Open => 0,
            Label::Closure => 1,
        }
    }
}

/// One sample. `ss_truth` is stored in the file's own pixel frame; right-side
/// images are mirrored back to left orientation by [`load_sample`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RecordRow", into = "RecordRow")]
pub struct SampleRecord {
    pub image_path: String,
    pub patient_id: String,
    pub side: Side,
    pub label: Label,
    pub ss_truth: Option<PixelPoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordRow {
    image_path: String,
    patient_id: String,
    side: Side,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ss_u: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ss_v: Option<usize>,
}

impl TryFrom<RecordRow> for SampleRecord {
    type Error = String;

    fn try_from(row: RecordRow) -> std::result::Result<Self, String> {
        if row.patient_id.is_empty() {
            return Err("patient_id must be non-empty".into());
        }
        if row.image_path.is_empty() {
            return Err("image_path must be non-empty".into());
        }
        let ss_truth = match (row.ss_u, row.ss_v) {
            (Some(u), Some(v)) => Some(PixelPoint::new(u, v)),
            (None, None) => None,
            _ => return Err("ss_u and ss_v must be given together".into()),
        };
        Ok(SampleRecord { image_path: row.image_path, patient_id: row.patient_id, side: row.side, label: row.label, ss_truth })
    }
}

impl From<SampleRecord> for RecordRow {
    fn from(r: SampleRecord) -> Self {
        RecordRow {
            image_path: r.image_path,
            patient_id: r.patient_id,
            side: r.side,
            label: r.label,
            ss_u: r.ss_truth.map(|p| p.u),
            ss_v: r.ss_truth.map(|p| p.v),
        }
    }
}

/// Ordered records with unique image paths, plus free-form `#` comment lines
/// kept at the top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub comments: Vec<String>,
    records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if let Some(first) = seen.insert(&r.image_path, i) {
                return Err(Error::DuplicatePath { path: r.image_path.clone(), first: first + 1, second: i + 1 });
            }
        }
        Ok(Self { comments: Vec::new(), records })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct patient ids in order of first appearance.
    pub fn patients(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.records.iter().map(|r| r.patient_id.as_str()).filter(|p| seen.insert(*p)).collect()
    }

    fn subset(&self, keep: impl Fn(&SampleRecord) -> bool) -> Manifest {
        Manifest { comments: self.comments.clone(), records: self.records.iter().filter(|r| keep(r)).cloned().collect() }
    }
}

/// A manifest designated as training data. Augmentation only accepts this
/// type, so evaluation splits cannot be augmented by accident.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingManifest(Manifest);

impl TrainingManifest {
    /// Declares an existing manifest (e.g. a stored training split) as training data.
    pub fn designate(manifest: Manifest) -> Self {
        Self(manifest)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.0
    }

    pub fn into_manifest(self) -> Manifest {
        self.0
    }
}

/// Parses JSON-Lines text. Blank lines and lines starting with `#` are skipped,
/// the latter kept as comments.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut comments = Vec::new();
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(c) = trimmed.strip_prefix('#') {
            comments.push(c.trim_start().to_string());
            continue;
        }
        let record: SampleRecord = serde_json::from_str(trimmed)
            .map_err(|e| Error::ManifestLine { line: i + 1, message: e.to_string() })?;
        if let Some(first) = seen.insert(record.image_path.clone(), i + 1) {
            return Err(Error::DuplicatePath { path: record.image_path, first, second: i + 1 });
        }
        records.push(record);
    }
    Ok(Manifest { comments, records })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Serialises to JSON-Lines text, comments first.
pub fn format_manifest(m: &Manifest) -> String {
    let mut out = String::new();
    for c in &m.comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    for r in &m.records {
        out.push_str(&serde_json::to_string(r).expect("records always serialise"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(format_manifest(m).as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Splits at patient level: a seeded shuffle of the distinct patients puts
/// `round(test_fraction · patients)` of them (at least one, at most all but
/// one) in the test side. Record order is preserved on both sides.
pub fn split_by_patient(m: &Manifest, test_fraction: f64, seed: u64) -> Result<(TrainingManifest, Manifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut patients: Vec<String> = m.patients().into_iter().map(String::from).collect();
    if patients.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 distinct patients, found {}", patients.len())));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((test_fraction * patients.len() as f64).round() as usize).clamp(1, patients.len() - 1);
    let test: BTreeSet<&str> = patients[..n_test].iter().map(String::as_str).collect();
    let train = m.subset(|r| !test.contains(r.patient_id.as_str()));
    let test = m.subset(|r| test.contains(r.patient_id.as_str()));
    Ok((TrainingManifest(train), test))
}

/// A sample loaded into left-ACA orientation.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: GrayImage,
    /// Ground-truth spur in the loaded (left-oriented) frame.
    pub ss_truth: Option<PixelPoint>,
    pub record: SampleRecord,
}

/// Resolves `image_path` against `base_dir` when relative.
pub fn resolve_path(base_dir: &Path, record: &SampleRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Loads the record's image, mirroring right-side samples (and their spur
/// column) so that every sample shows a left-side angle.
pub fn load_sample(base_dir: &Path, record: &SampleRecord) -> Result<LoadedSample> {
    orient_sample(load_image(resolve_path(base_dir, record))?, record)
}

/// Mirrors an already decoded right-side image (and its spur) into the
/// left-side frame.
pub fn orient_sample(raw: GrayImage, record: &SampleRecord) -> Result<LoadedSample> {
    if let Some(p) = record.ss_truth {
        if !raw.contains(p) {
            return Err(Error::invalid(format!(
                "{}: spur ({}, {}) outside {}x{} image",
                record.image_path,
                p.u,
                p.v,
                raw.height(),
                raw.width()
            )));
        }
    }
    let (image, ss_truth) = match record.side {
        Side::Left => (raw, record.ss_truth),
        Side::Right => {
            let w = raw.width();
            (raw.flip_horizontal(), record.ss_truth.map(|p| PixelPoint::new(p.u, w - 1 - p.v)))
        }
    };
    Ok(LoadedSample { image, ss_truth, record: record.clone() })
}
