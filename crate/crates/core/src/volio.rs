//! On-disk formats for volumes, label maps and cohort manifests.
//!
//! Volumes and label maps share one small binary container:
//!
//! ```text
//! bytes  0..8   magic "GBSGVOL1"
//! bytes  8..20  nx, ny, nz          (u32, little-endian)
//! bytes 20..32  sx, sy, sz          (f32, little-endian, millimeters)
//! byte  32      dtype code          (0 = f32 scalar, 1 = u16 label)
//! bytes 33..    payload, x-fastest then y then z, little-endian
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"GBSGVOL1";
pub const HEADER_LEN: usize = 33;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U16: u8 = 1;

/// Exact manifest header, in order.
pub const MANIFEST_HEADER: [&str; 6] = [
    "subject_id",
    "group",
    "age",
    "sex",
    "volume_path",
    "label_path",
];

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("bad magic: expected GBSGVOL1")]
    MagicMismatch,
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("non-finite value at voxel {index}")]
    NonFiniteData { index: usize },
    #[error("invalid dims {0:?}")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f32; 3]),
    #[error("data length {found} does not match dims product {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("label {label} at voxel {index} does not fit in 16 bits")]
    LabelOverflow { index: usize, label: u32 },
    #[error("dtype code {found} where {expected} was expected")]
    DtypeMismatch { expected: u8, found: u8 },
    #[error("dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("spacing mismatch: {a:?} vs {b:?}")]
    SpacingMismatch { a: [f32; 3], b: [f32; 3] },
    #[error("manifest header mismatch: found `{0}`")]
    HeaderMismatch(String),
    #[error("line {line}: unknown group `{value}`")]
    UnknownGroup { line: usize, value: String },
    #[error("line {line}: unknown sex `{value}`")]
    UnknownSex { line: usize, value: String },
    #[error("line {line}: duplicate subject id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unparsable age `{value}`")]
    UnparsableAge { line: usize, value: String },
    #[error("line {line}: malformed row ({reason})")]
    MalformedRow { line: usize, reason: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = VolioError> = std::result::Result<T, E>;

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(VolioError::InvalidDims(dims));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(VolioError::InvalidDims(dims))
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(VolioError::InvalidSpacing(spacing))
    }
}

/// Dense 3D scalar field, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != n {
            return Err(VolioError::LengthMismatch {
                expected: n,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolioError::NonFiniteData { index });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, spacing, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        linear_index(self.dims, i, j, k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Applies `f` to every voxel; fails if any result is non-finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[inline]
pub fn linear_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

#[inline]
pub fn coords_of(dims: [usize; 3], idx: usize) -> [usize; 3] {
    let i = idx % dims[0];
    let rest = idx / dims[0];
    [i, rest % dims[1], rest / dims[1]]
}

/// Dense 3D field of structure identifiers; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: [usize; 3],
    spacing: [f32; 3],
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], labels: Vec<u32>) -> Result<Self> {
        let n = check_dims(dims)?;
        check_spacing(spacing)?;
        if labels.len() != n {
            return Err(VolioError::LengthMismatch {
                expected: n,
                found: labels.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.labels[linear_index(self.dims, i, j, k)]
    }

    /// Sorted, deduplicated nonzero labels.
    pub fn structure_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .labels
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        ids.sort_unstable();
        ids
    }
}

fn write_header(out: &mut impl Write, dims: [usize; 3], spacing: [f32; 3], dtype: u8) -> io::Result<()> {
    out.write_all(MAGIC)?;
    for d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in spacing {
        out.write_all(&s.to_le_bytes())?;
    }
    out.write_all(&[dtype])
}

struct Header {
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: u8,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(VolioError::MagicMismatch);
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolioError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing = [f32_at(20), f32_at(24), f32_at(28)];
    check_dims(dims)?;
    check_spacing(spacing)?;
    Ok(Header {
        dims,
        spacing,
        dtype: bytes[32],
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, elem: usize) -> Result<&'a [u8]> {
    let n: usize = header.dims.iter().product();
    let expected = n * elem;
    let found = bytes.len() - HEADER_LEN;
    if found < expected {
        return Err(VolioError::TruncatedFile { expected, found });
    }
    Ok(&bytes[HEADER_LEN..HEADER_LEN + expected])
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    let header = parse_header(bytes)?;
    if header.dtype != DTYPE_F32 {
        return Err(VolioError::DtypeMismatch {
            expected: DTYPE_F32,
            found: header.dtype,
        });
    }
    let data = payload(bytes, &header, 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume3D::new(header.dims, header.spacing, data)
}

pub fn encode_volume(v: &Volume3D) -> Result<Vec<u8>> {
    if let Some(index) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(VolioError::NonFiniteData { index });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.data.len());
    write_header(&mut out, v.dims, v.spacing, DTYPE_F32)?;
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labelmap(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes)?;
    if header.dtype != DTYPE_U16 {
        return Err(VolioError::DtypeMismatch {
            expected: DTYPE_U16,
            found: header.dtype,
        });
    }
    let labels = payload(bytes, &header, 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as u32)
        .collect();
    LabelMap::new(header.dims, header.spacing, labels)
}

pub fn encode_labelmap(lm: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * lm.labels.len());
    write_header(&mut out, lm.dims, lm.spacing, DTYPE_U16)?;
    for (index, &label) in lm.labels.iter().enumerate() {
        let narrow = u16::try_from(label).map_err(|_| VolioError::LabelOverflow { index, label })?;
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => VolioError::MissingFile(path.to_path_buf()),
        _ => VolioError::Io(e),
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    decode_volume(&read_bytes(path.as_ref())?)
}

pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_volume(v)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_labelmap(&read_bytes(path.as_ref())?)
}

pub fn write_labelmap(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_labelmap(lm)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn spacing_close(a: f32, b: f32) -> bool {
    let (a, b) = (a as f64, b as f64);
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs())
}

/// Checks that a volume and a label map share dims and (within 1e-6 relative) spacing.
pub fn validate_pair(v: &Volume3D, lm: &LabelMap) -> Result<()> {
    check_geometry(v.dims, v.spacing, lm.dims, lm.spacing)
}

pub fn check_geometry(
    dims_a: [usize; 3],
    spacing_a: [f32; 3],
    dims_b: [usize; 3],
    spacing_b: [f32; 3],
) -> Result<()> {
    if dims_a != dims_b {
        return Err(VolioError::DimsMismatch {
            a: dims_a,
            b: dims_b,
        });
    }
    if !spacing_a
        .iter()
        .zip(spacing_b.iter())
        .all(|(&a, &b)| spacing_close(a, b))
    {
        return Err(VolioError::SpacingMismatch {
            a: spacing_a,
            b: spacing_b,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    CN,
    #[allow(non_camel_case_types)]
    sMCI,
    #[allow(non_camel_case_types)]
    pMCI,
    AD,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::CN, Group::sMCI, Group::pMCI, Group::AD];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::CN => "CN",
            Group::sMCI => "sMCI",
            Group::pMCI => "pMCI",
            Group::AD => "AD",
        }
    }

    /// CN and AD subjects are the only ones any fitting routine may see.
    pub fn is_training(self) -> bool {
        matches!(self, Group::CN | Group::AD)
    }

    pub fn is_mci(self) -> bool {
        matches!(self, Group::sMCI | Group::pMCI)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "CN" => Ok(Group::CN),
            "sMCI" => Ok(Group::sMCI),
            "pMCI" => Ok(Group::pMCI),
            "AD" => Ok(Group::AD),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub group: Group,
    pub age: f64,
    pub sex: Sex,
    pub volume_path: PathBuf,
    pub label_path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub records: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_group(&self, group: Group) -> impl Iterator<Item = &SubjectRecord> {
        self.records.iter().filter(move |r| r.group == group)
    }

    pub fn count(&self, group: Group) -> usize {
        self.of_group(group).count()
    }

    /// Every referenced volume and label file must exist.
    pub fn validate_files(&self) -> Result<()> {
        for r in &self.records {
            for p in [&r.volume_path, &r.label_path] {
                if !p.is_file() {
                    return Err(VolioError::MissingFile(p.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Parses manifest CSV text. Relative file paths are resolved against `base_dir`.
pub fn parse_manifest(text: impl Read, base_dir: &Path) -> Result<Cohort> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(text);
    let header = reader.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(VolioError::HeaderMismatch(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(VolioError::MalformedRow {
                line,
                reason: format!("{} fields", rec.len()),
            });
        }
        let subject_id = rec[0].to_string();
        if subject_id.is_empty() {
            return Err(VolioError::MalformedRow {
                line,
                reason: "empty subject_id".into(),
            });
        }
        let group = rec[1].parse::<Group>().map_err(|_| VolioError::UnknownGroup {
            line,
            value: rec[1].to_string(),
        })?;
        let age = rec[2]
            .parse::<f64>()
            .ok()
            .filter(|a| a.is_finite() && *a > 0.0)
            .ok_or_else(|| VolioError::UnparsableAge {
                line,
                value: rec[2].to_string(),
            })?;
        let sex = match &rec[3] {
            "M" => Sex::M,
            "F" => Sex::F,
            other => {
                return Err(VolioError::UnknownSex {
                    line,
                    value: other.to_string(),
                })
            }
        };
        if !seen.insert(subject_id.clone()) {
            return Err(VolioError::DuplicateId {
                line,
                id: subject_id,
            });
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        records.push(SubjectRecord {
            subject_id,
            group,
            age,
            sex,
            volume_path: resolve(&rec[4]),
            label_path: resolve(&rec[5]),
        });
    }
    Ok(Cohort { records })
}

/// Reads a manifest and checks that every referenced file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => VolioError::MissingFile(path.to_path_buf()),
        _ => VolioError::Io(e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cohort = parse_manifest(file, base)?;
    cohort.validate_files()?;
    Ok(cohort)
}

/// Writes a manifest; paths are written as given.
pub fn write_manifest(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in &cohort.records {
        w.write_record([
            r.subject_id.as_str(),
            r.group.as_str(),
            &r.age.to_string(),
            r.sex.as_str(),
            &r.volume_path.to_string_lossy(),
            &r.label_path.to_string_lossy(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
