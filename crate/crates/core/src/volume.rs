//! Raw-binary volumes with a JSON sidecar header.
//!
//! A volume stored at `<path>` is the pair `<path>.json` (UTF-8 header with
//! exactly the keys `dims`, `spacing_mm`, `dtype`, `kind`, `subject_id`, in
//! that order) and `<path>.raw` (little-endian payload). Voxels are stored
//! x-fastest, then y, then z; `dims` is `[nx, ny, nz]`.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{connected_components, Connectivity};

pub const DEFAULT_SPACING_MM: f64 = 0.5;

/// The three co-registered contrasts, in network channel order.
pub const CONTRASTS: [&str; 3] = ["mp2rage", "t2s_epi", "t2s_gre"];
pub const LABEL_MAPS: [&str; 3] = ["cl_labels", "tissue_labels", "wml_labels"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "u8" => Ok(Dtype::U8),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    ClLabels,
    TissueLabels,
    WmlLabels,
}

impl VolumeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "intensity" => Ok(Self::Intensity),
            "cl_labels" => Ok(Self::ClLabels),
            "tissue_labels" => Ok(Self::TissueLabels),
            "wml_labels" => Ok(Self::WmlLabels),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }

    pub fn dtype(self) -> Dtype {
        match self {
            Self::Intensity => Dtype::F32,
            _ => Dtype::U8,
        }
    }

    /// Largest label code valid for this kind, `None` for intensities.
    pub fn max_code(self) -> Option<u8> {
        match self {
            Self::Intensity => None,
            Self::ClLabels | Self::TissueLabels => Some(2),
            Self::WmlLabels => Some(1),
        }
    }
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Intensity => "intensity",
            Self::ClLabels => "cl_labels",
            Self::TissueLabels => "tissue_labels",
            Self::WmlLabels => "wml_labels",
        })
    }
}

/// Cortical-lesion label codes.
pub mod cl_code {
    pub const BACKGROUND: u8 = 0;
    pub const LEUKOCORTICAL: u8 = 1;
    pub const SUBPIAL_INTRACORTICAL: u8 = 2;
}

/// Tissue label codes.
pub mod tissue_code {
    pub const BACKGROUND: u8 = 0;
    pub const WM: u8 = 1;
    pub const GM: u8 = 2;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub kind: VolumeKind,
    pub subject_id: String,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], kind: VolumeKind, subject_id: impl Into<String>) -> Self {
        Self {
            dims,
            spacing_mm,
            dtype: kind.dtype(),
            kind,
            subject_id: subject_id.into(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel volume in µL (1 mm³ = 1 µL).
    pub fn voxel_volume_ul(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    pub fn same_geometry(&self, other: &VolumeHeader) -> bool {
        self.dims == other.dims && self.spacing_mm == other.spacing_mm
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("dims {:?} must all be ≥ 1", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!(
                "spacing {:?} must be positive and finite",
                self.spacing_mm
            )));
        }
        if self.dtype != self.kind.dtype() {
            return Err(Error::Validation(format!(
                "kind {} requires dtype {:?}, header says {:?}",
                self.kind,
                self.kind.dtype(),
                self.dtype
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Self::F32(_) => Dtype::F32,
            Self::U8(_) => Dtype::U8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub data: VolumeData,
}

impl Volume {
    /// Builds and validates a volume.
    pub fn new(header: VolumeHeader, data: VolumeData) -> Result<Self> {
        let v = Self { header, data };
        v.validate()?;
        Ok(v)
    }

    pub fn intensity(dims: [usize; 3], spacing_mm: [f64; 3], subject_id: &str, data: Vec<f32>) -> Result<Self> {
        Self::new(
            VolumeHeader::new(dims, spacing_mm, VolumeKind::Intensity, subject_id),
            VolumeData::F32(data),
        )
    }

    pub fn labels(dims: [usize; 3], spacing_mm: [f64; 3], kind: VolumeKind, subject_id: &str, data: Vec<u8>) -> Result<Self> {
        Self::new(VolumeHeader::new(dims, spacing_mm, kind, subject_id), VolumeData::U8(data))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VolumeData::F32(v) => Some(v),
            VolumeData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VolumeData::U8(v) => Some(v),
            VolumeData::F32(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.data.dtype() != self.header.dtype {
            return Err(Error::Validation(format!(
                "payload is {:?} but header declares {:?}",
                self.data.dtype(),
                self.header.dtype
            )));
        }
        if self.data.len() != self.header.voxel_count() {
            return Err(Error::Validation(format!(
                "payload has {} voxels, dims {:?} require {}",
                self.data.len(),
                self.header.dims,
                self.header.voxel_count()
            )));
        }
        if let (Some(max), VolumeData::U8(v)) = (self.header.kind.max_code(), &self.data) {
            if let Some((i, &bad)) = v.iter().enumerate().find(|(_, &c)| c > max) {
                return Err(Error::Validation(format!(
                    "{} volume contains code {bad} at voxel {i}; valid codes are 0..={max}",
                    self.header.kind
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn coords(dims: [usize; 3], idx: usize) -> [usize; 3] {
    [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])]
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn header_path(path: &Path) -> PathBuf {
    with_suffix(path, ".json")
}

pub fn payload_path(path: &Path) -> PathBuf {
    with_suffix(path, ".raw")
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    v.validate()?;
    let hp = header_path(path);
    let rp = payload_path(path);
    let mut json = serde_json::to_string_pretty(&v.header).expect("header serializes");
    json.push('\n');
    fs::write(&hp, json).map_err(|e| Error::io(&hp, e))?;
    let bytes: Vec<u8> = match &v.data {
        VolumeData::F32(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::U8(d) => d.clone(),
    };
    fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, text: &str) -> Result<VolumeHeader> {
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(path, e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| malformed(path, "header is not a JSON object"))?;
    let field = |k: &str| obj.get(k).ok_or_else(|| malformed(path, format!("missing key {k:?}")));

    let dims_v = field("dims")?.as_array().ok_or_else(|| malformed(path, "dims must be an array"))?;
    if dims_v.len() != 3 {
        return Err(malformed(path, "dims must have 3 entries"));
    }
    let mut dims = [0usize; 3];
    for (d, v) in dims.iter_mut().zip(dims_v) {
        *d = v
            .as_u64()
            .ok_or_else(|| malformed(path, "dims must be non-negative integers"))? as usize;
    }
    let sp_v = field("spacing_mm")?
        .as_array()
        .ok_or_else(|| malformed(path, "spacing_mm must be an array"))?;
    if sp_v.len() != 3 {
        return Err(malformed(path, "spacing_mm must have 3 entries"));
    }
    let mut spacing_mm = [0.0; 3];
    for (s, v) in spacing_mm.iter_mut().zip(sp_v) {
        *s = v.as_f64().ok_or_else(|| malformed(path, "spacing_mm must be numbers"))?;
    }
    let dtype = Dtype::parse(field("dtype")?.as_str().ok_or_else(|| malformed(path, "dtype must be a string"))?)?;
    let kind = VolumeKind::parse(field("kind")?.as_str().ok_or_else(|| malformed(path, "kind must be a string"))?)?;
    let subject_id = field("subject_id")?
        .as_str()
        .ok_or_else(|| malformed(path, "subject_id must be a string"))?
        .to_string();
    if obj.len() != 5 {
        return Err(malformed(path, "unexpected extra keys"));
    }
    let header = VolumeHeader {
        dims,
        spacing_mm,
        dtype,
        kind,
        subject_id,
    };
    header.validate()?;
    Ok(header)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let hp = header_path(path.as_ref());
    if !hp.exists() {
        return Err(Error::MissingFile(hp));
    }
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    parse_header(&hp, &text)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let rp = payload_path(path);
    if !rp.exists() {
        return Err(Error::MissingFile(rp));
    }
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let expected = (header.voxel_count() * header.dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            path: rp,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = match header.dtype {
        Dtype::F32 => VolumeData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::U8 => VolumeData::U8(bytes),
    };
    Volume::new(header, data)
}

/// Z-score over the nonzero voxels; zero voxels stay zero. A volume with no
/// nonzero voxel is returned unchanged.
pub fn zscore_nonzero(data: &[f32]) -> Vec<f32> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for &v in data {
        if v != 0.0 {
            n += 1;
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
    }
    if n == 0 {
        return data.to_vec();
    }
    let mean = sum / n as f64;
    let sd = (sq / n as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
    data.iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((v as f64 - mean) / sd) as f32 })
        .collect()
}

/// All six volumes of one subject.
#[derive(Clone, Debug)]
pub struct SubjectVolumes {
    pub id: String,
    pub dir: PathBuf,
    /// In [`CONTRASTS`] order.
    pub contrasts: [Volume; 3],
    pub cl_labels: Volume,
    pub tissue_labels: Volume,
    pub wml_labels: Volume,
}

impl SubjectVolumes {
    pub fn dims(&self) -> [usize; 3] {
        self.cl_labels.header.dims
    }
}

fn read_named(dir: &Path, name: &str) -> Result<Volume> {
    let base = dir.join(name);
    if !header_path(&base).exists() || !payload_path(&base).exists() {
        return Err(Error::MissingVolume {
            dir: dir.to_path_buf(),
            name: name.to_string(),
        });
    }
    read_volume(base)
}

fn expect_kind(v: &Volume, kind: VolumeKind, dir: &Path, name: &str) -> Result<()> {
    if v.header.kind != kind {
        return Err(Error::Validation(format!(
            "{}/{name}: expected kind {kind}, found {}",
            dir.display(),
            v.header.kind
        )));
    }
    Ok(())
}

/// Loads one subject directory and checks that all six volumes share dims
/// and spacing.
pub fn load_subject(dir: impl AsRef<Path>) -> Result<SubjectVolumes> {
    let dir = dir.as_ref();
    let [a, b, c] = CONTRASTS.map(|n| read_named(dir, n));
    let contrasts = [a?, b?, c?];
    for (v, n) in contrasts.iter().zip(CONTRASTS) {
        expect_kind(v, VolumeKind::Intensity, dir, n)?;
    }
    let cl = read_named(dir, "cl_labels")?;
    expect_kind(&cl, VolumeKind::ClLabels, dir, "cl_labels")?;
    let tissue = read_named(dir, "tissue_labels")?;
    expect_kind(&tissue, VolumeKind::TissueLabels, dir, "tissue_labels")?;
    let wml = read_named(dir, "wml_labels")?;
    expect_kind(&wml, VolumeKind::WmlLabels, dir, "wml_labels")?;

    let reference = &contrasts[0].header;
    let all = contrasts.iter().chain([&cl, &tissue, &wml]);
    for (v, name) in all.zip(CONTRASTS.iter().chain(LABEL_MAPS.iter())) {
        if !v.header.same_geometry(reference) {
            return Err(Error::Geometry(format!(
                "{}: {name} has dims {:?} spacing {:?}, mp2rage has dims {:?} spacing {:?}",
                dir.display(),
                v.header.dims,
                v.header.spacing_mm,
                reference.dims,
                reference.spacing_mm
            )));
        }
    }
    Ok(SubjectVolumes {
        id: reference.subject_id.clone(),
        dir: dir.to_path_buf(),
        contrasts,
        cl_labels: cl,
        tissue_labels: tissue,
        wml_labels: wml,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub leukocortical: usize,
    pub subpial_intracortical: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.leukocortical + self.subpial_intracortical
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSubject {
    pub id: String,
    pub dir: PathBuf,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub lesions: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub subjects: Vec<CohortSubject>,
    pub total_lesions: usize,
}

/// Validates every subject directory and counts its lesions by class
/// (26-connected components of `cl_labels`).
pub fn check_cohort<P: AsRef<Path>>(subject_dirs: &[P]) -> Result<CohortManifest> {
    let mut subjects = Vec::with_capacity(subject_dirs.len());
    for dir in subject_dirs {
        let s = load_subject(dir)?;
        let mut lesions = ClassCounts::default();
        for c in connected_components(&s.cl_labels, Connectivity::TwentySix)? {
            match c.class {
                cl_code::LEUKOCORTICAL => lesions.leukocortical += 1,
                _ => lesions.subpial_intracortical += 1,
            }
        }
        subjects.push(CohortSubject {
            id: s.id.clone(),
            dir: s.dir.clone(),
            dims: s.dims(),
            spacing_mm: s.cl_labels.header.spacing_mm,
            lesions,
        });
    }
    let total_lesions = subjects.iter().map(|s| s.lesions.total()).sum();
    Ok(CohortManifest {
        subjects,
        total_lesions,
    })
}

/// Subject directories of a cohort root, sorted by name. A directory counts
/// as a subject when it contains an `mp2rage.json` header.
pub fn subject_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        let p = e.path();
        if p.is_dir() && header_path(&p.join("mp2rage")).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zeros_write_32_zero_bytes() {
        let d = tmp();
        let v = Volume::intensity([2, 2, 2], [0.5; 3], "s", vec![0.0; 8]).unwrap();
        let p = d.path().join("v");
        write_volume(&v, &p).unwrap();
        let raw = fs::read(payload_path(&p)).unwrap();
        assert_eq!(raw, vec![0u8; 32]);
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn header_keys_in_fixed_order() {
        let d = tmp();
        let v = Volume::labels([1, 2, 1], [0.5; 3], VolumeKind::WmlLabels, "a", vec![0, 1]).unwrap();
        let p = d.path().join("w");
        write_volume(&v, &p).unwrap();
        let text = fs::read_to_string(header_path(&p)).unwrap();
        let pos: Vec<usize> = ["\"dims\"", "\"spacing_mm\"", "\"dtype\"", "\"kind\"", "\"subject_id\""]
            .iter()
            .map(|k| text.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(text.contains("\"u8\"") && text.contains("\"wml_labels\""));
    }

    #[test]
    fn invalid_label_code_rejected() {
        let err = Volume::labels([3, 1, 1], [0.5; 3], VolumeKind::ClLabels, "s", vec![0, 3, 1]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(Volume::labels([1, 1, 1], [0.5; 3], VolumeKind::WmlLabels, "s", vec![2]).is_err());
    }

    #[test]
    fn single_voxel_payload() {
        let d = tmp();
        let p = d.path().join("one");
        fs::write(header_path(&p), r#"{"dims":[1,1,1],"spacing_mm":[0.5,0.5,0.5],"dtype":"f32","kind":"intensity","subject_id":"x"}"#).unwrap();
        fs::write(payload_path(&p), 1.0f32.to_le_bytes()).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.as_f32().unwrap(), &[1.0]);
    }

    #[test]
    fn distinct_read_errors() {
        let d = tmp();
        let p = d.path().join("v");
        assert!(matches!(read_volume(&p), Err(Error::MissingFile(_))));

        let good = r#"{"dims":[4,4,4],"spacing_mm":[0.5,0.5,0.5],"dtype":"f32","kind":"intensity","subject_id":"x"}"#;
        fs::write(header_path(&p), good).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::MissingFile(_))));
        fs::write(payload_path(&p), vec![0u8; 255]).unwrap();
        match read_volume(&p) {
            Err(Error::LengthMismatch { expected, actual, .. }) => {
                assert_eq!((expected, actual), (256, 255));
            }
            other => panic!("{other:?}"),
        }

        fs::write(header_path(&p), "{not json").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::MalformedHeader { .. })));
        fs::write(header_path(&p), good.replace("\"f32\"", "\"f16\"")).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnknownDtype(s)) if s == "f16"));
        fs::write(header_path(&p), good.replace("\"intensity\"", "\"flair\"")).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnknownKind(s)) if s == "flair"));
        fs::write(header_path(&p), good.replace("\"intensity\"", "\"cl_labels\"")).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn zscore_keeps_background() {
        let z = zscore_nonzero(&[0.0, 1.0, 3.0, 0.0]);
        assert_eq!(z, vec![0.0, -1.0, 1.0, 0.0]);
    }
}
