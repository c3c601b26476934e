//! Posed image sets on disk.
//!
//! A manifest is a canonical JSON document (sorted keys, two-space indent,
//! every float written with 17 significant digits) next to a directory of
//! PNG images. Image paths are relative to the manifest's directory.
//! Rotations are stored scalar-first as `[w, x, y, z]`. See
//! `docs/manifest.md` for the schema.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, UnitQuaternion, Vec3};
use crate::renderer::ImageBuffer;
use crate::rng;
use crate::scene_synth::LightingCondition;

pub const MANIFEST_VERSION: u64 = 1;

/// Accepted deviation of a stored quaternion's norm from 1.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: JSON parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}: unknown manifest version {version}")]
    UnknownVersion { path: PathBuf, version: u64 },
    #[error("{path}: schema violation{}: {message}", at_record(*.index))]
    Schema {
        path: PathBuf,
        index: Option<usize>,
        message: String,
    },
    #[error("record {index}: quaternion norm {norm} is not 1")]
    NonUnitQuaternion { index: usize, norm: f64 },
    #[error("record {index}: image {path} does not exist")]
    MissingImage { index: usize, path: PathBuf },
    #[error("record {index}: duplicate image path {path}")]
    DuplicatePath { index: usize, path: String },
    #[error("cannot merge sets with different intrinsics")]
    IntrinsicsMismatch,
}

fn at_record(index: Option<usize>) -> String {
    index.map(|i| format!(" in record {i}")).unwrap_or_default()
}

/// Optional provenance of a record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AppearanceMeta {
    /// Indices `[i, j]` into the appearance table used for this image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ids: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<LightingCondition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    /// `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub domain: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<AppearanceMeta>,
}

impl Record {
    pub fn new(image: String, pose: &Pose, domain: &str) -> Self {
        let t = pose.translation;
        Self {
            image,
            rotation: pose.rotation.to_array(),
            translation: [t.x, t.y, t.z],
            domain: domain.to_string(),
            split: "all".to_string(),
            appearance: None,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        let [x, y, z] = self.translation;
        Ok(Pose::new(UnitQuaternion::from_array(self.rotation)?, Vec3::new(x, y, z)))
    }

    pub fn lighting(&self) -> Option<&LightingCondition> {
        self.appearance.as_ref().and_then(|a| a.lighting.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u64,
    pub intrinsics: CameraIntrinsics,
    pub records: Vec<Record>,
    /// Directory that relative image paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(intrinsics: CameraIntrinsics, root: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            intrinsics,
            records: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn load_image(&self, index: usize) -> Result<ImageBuffer> {
        ImageBuffer::load_gray(&self.image_path(&self.records[index]))
    }

    /// Loads an image and reports whether it carried per-pixel coverage.
    pub fn load_image_coverage(&self, index: usize) -> Result<(ImageBuffer, bool)> {
        ImageBuffer::load_gray_coverage(&self.image_path(&self.records[index]))
    }

    /// Record count per domain tag.
    pub fn domain_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.domain.clone()).or_insert(0) += 1;
        }
        h
    }

    /// Quaternion norms and path uniqueness.
    pub fn validate(&self) -> std::result::Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for (index, r) in self.records.iter().enumerate() {
            let norm = r.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            // NaN norms fail the check too.
            let unit = (norm - 1.0).abs() <= QUATERNION_TOLERANCE;
            if !unit {
                return Err(ManifestError::NonUnitQuaternion { index, norm });
            }
            if !seen.insert(r.image.as_str()) {
                return Err(ManifestError::DuplicatePath {
                    index,
                    path: r.image.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn check_images(&self) -> std::result::Result<(), ManifestError> {
        for (index, r) in self.records.iter().enumerate() {
            let path = self.image_path(r);
            if !path.is_file() {
                return Err(ManifestError::MissingImage { index, path });
            }
        }
        Ok(())
    }
}

/// Pretty printer that writes every float with 17 significant digits.
struct CanonicalFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for CanonicalFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Canonical JSON text of any serializable value: keys sorted (through
/// `serde_json::Value`'s ordered map), floats at full precision.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| Error::Data(e.to_string()))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let text = to_canonical_json(manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses and validates a manifest without touching the images.
pub fn parse_manifest(text: &str, path: &Path) -> std::result::Result<DatasetManifest, ManifestError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ManifestError::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let schema = |index: Option<usize>, message: String| ManifestError::Schema {
        path: path.to_path_buf(),
        index,
        message,
    };
    let obj = value
        .as_object()
        .ok_or_else(|| schema(None, "top level must be an object".into()))?;
    let version = obj
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| schema(None, "missing integer `version`".into()))?;
    if version != MANIFEST_VERSION {
        return Err(ManifestError::UnknownVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    for key in obj.keys() {
        if !matches!(key.as_str(), "version" | "intrinsics" | "records") {
            return Err(schema(None, format!("unknown field `{key}`")));
        }
    }
    let intrinsics: CameraIntrinsics = obj
        .get("intrinsics")
        .cloned()
        .ok_or_else(|| schema(None, "missing `intrinsics`".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| schema(None, format!("intrinsics: {e}"))))?;
    intrinsics
        .validate()
        .map_err(|e| schema(None, e.to_string()))?;
    let raw = obj
        .get("records")
        .and_then(Value::as_array)
        .ok_or_else(|| schema(None, "missing `records` array".into()))?;
    let records = raw
        .iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v.clone()).map_err(|e| schema(Some(i), e.to_string())))
        .collect::<std::result::Result<Vec<Record>, _>>()?;
    let manifest = DatasetManifest {
        version,
        intrinsics,
        records,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Reads, validates, and checks that every referenced image exists.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text, path)?;
    manifest.check_images()?;
    Ok(manifest)
}

/// Deterministic shuffled split into `round(N·(1−f))` training records and
/// the rest. Both parts are kept non-empty. Records are tagged "train" and
/// "val" and keep their original relative order.
pub fn split(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val fraction must be in (0, 1), got {val_fraction}")));
    }
    let n = manifest.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split a set of {n} records")));
    }
    let n_train = ((n as f64 * (1.0 - val_fraction)).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::label::SPLIT]));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let mut train = DatasetManifest::new(manifest.intrinsics, manifest.root.clone());
    let mut val = DatasetManifest::new(manifest.intrinsics, manifest.root.clone());
    for (r, &t) in manifest.records.iter().zip(&is_train) {
        let mut r = r.clone();
        if t {
            r.split = "train".into();
            train.records.push(r);
        } else {
            r.split = "val".into();
            val.records.push(r);
        }
    }
    Ok((train, val))
}

/// Concatenation of two sets sharing intrinsics. Image paths of `nerf` are
/// rewritten relative to `synth.root` when the roots differ, so no image is
/// copied.
pub fn merge_sets(synth: &DatasetManifest, nerf: &DatasetManifest) -> Result<DatasetManifest> {
    if nerf.is_empty() {
        return Ok(synth.clone());
    }
    if synth.intrinsics != nerf.intrinsics {
        return Err(ManifestError::IntrinsicsMismatch.into());
    }
    let mut out = synth.clone();
    for r in &nerf.records {
        let mut r = r.clone();
        if nerf.root != synth.root {
            r.image = relative_to(&nerf.root.join(&r.image), &synth.root);
        }
        out.records.push(r);
    }
    out.validate()?;
    Ok(out)
}

/// `target` expressed relative to `base` when it lies below it, otherwise
/// the absolute form.
fn relative_to(target: &Path, base: &Path) -> String {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (t, b) = (abs(target), abs(base));
    t.strip_prefix(&b)
        .map(Path::to_path_buf)
        .unwrap_or(t)
        .to_string_lossy()
        .into_owned()
}
