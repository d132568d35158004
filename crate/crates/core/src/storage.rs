//! SATF tensor records, named-tensor bundles, dataset manifests and report
//! writers.
//!
//! Record layout (all integers little-endian):
//!
//! | bytes      | field                               |
//! |------------|-------------------------------------|
//! | 4          | magic `SATF`                        |
//! | 1          | version (`1`)                       |
//! | 1          | dtype (`0` f32, `1` f64, `2` i64)   |
//! | 1          | ndim                                |
//! | 8 × ndim   | dims, `u64`                         |
//! | rest       | row-major payload                   |

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::fnv1a64;
use crate::tensor::Tensor;
use crate::vit::{MaeDecoderParams, ViTConfig, ViTParams, VitError};

pub const MAGIC: &[u8; 4] = b"SATF";
pub const VERSION: u8 = 1;
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKSUM_FILE: &str = "checksums.json";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: truncated record ({got} of {expected} bytes)")]
    Truncated {
        path: PathBuf,
        expected: u64,
        got: u64,
    },
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported record version {version}")]
    BadVersion { path: PathBuf, version: u8 },
    #[error("{path}: unknown dtype code {code}")]
    BadDtype { path: PathBuf, code: u8 },
    #[error("{path}: payload is {got} bytes but dims {dims:?} need {expected}")]
    PayloadMismatch {
        path: PathBuf,
        dims: Vec<u64>,
        expected: u64,
        got: u64,
    },
    #[error("{path}: expected {expected} tensor, found {found}")]
    DtypeMismatch {
        path: PathBuf,
        expected: Dtype,
        found: Dtype,
    },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: unknown schema version {version}")]
    UnknownSchema { path: PathBuf, version: u32 },
    #[error("bundle {bundle}: missing tensor `{name}`")]
    MissingTensor { bundle: PathBuf, name: String },
    #[error("tensor `{name}`: manifest says {manifest:?}, record holds {record:?}")]
    ShapeConflict {
        name: String,
        manifest: Vec<usize>,
        record: Vec<usize>,
    },
    #[error("tensor `{name}`: checksum {found} does not match recorded {expected}")]
    Checksum {
        name: String,
        expected: String,
        found: String,
    },
    #[error("dataset {path}: {message}")]
    Dataset { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error(transparent)]
    Vit(#[from] VitError),
}

pub type StorageResult<T> = Result<T, StorageError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::I64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::I64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I64 => "i64",
        })
    }
}

/// A decoded record of any supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64(Tensor<i64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
            AnyTensor::I64(_) => Dtype::I64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
            AnyTensor::I64(t) => t.dims(),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            AnyTensor::F64(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            AnyTensor::I64(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    /// Full record bytes: header then payload.
    pub fn encode(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(header_len(dims.len()));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend(self.payload());
        out
    }

    pub fn into_f32(self, path: &Path) -> StorageResult<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            other => Err(StorageError::DtypeMismatch {
                path: path.to_path_buf(),
                expected: Dtype::F32,
                found: other.dtype(),
            }),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

impl From<Tensor<i64>> for AnyTensor {
    fn from(t: Tensor<i64>) -> Self {
        AnyTensor::I64(t)
    }
}

pub fn header_len(ndim: usize) -> usize {
    7 + 8 * ndim
}

pub fn write_any(path: &Path, t: &AnyTensor) -> StorageResult<()> {
    fs::write(path, t.encode()).map_err(io_err(path))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> StorageResult<()> {
    write_any(path, &AnyTensor::F32(t.clone()))
}

fn read_exact_or_truncated(
    f: &mut File,
    buf: &mut [u8],
    path: &Path,
    offset: u64,
    file_len: u64,
) -> StorageResult<()> {
    match f.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(StorageError::Truncated {
            path: path.to_path_buf(),
            expected: offset + buf.len() as u64,
            got: file_len,
        }),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Reads one record. The payload buffer is allocated only after the
/// header-declared size has been checked against the file size.
pub fn read_any(path: &Path) -> StorageResult<AnyTensor> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let file_len = f.metadata().map_err(io_err(path))?.len();
    let mut head = [0u8; 7];
    read_exact_or_truncated(&mut f, &mut head, path, 0, file_len)?;
    let magic = [head[0], head[1], head[2], head[3]];
    if &magic != MAGIC {
        return Err(StorageError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if head[4] != VERSION {
        return Err(StorageError::BadVersion {
            path: path.to_path_buf(),
            version: head[4],
        });
    }
    let dtype = Dtype::from_code(head[5]).ok_or(StorageError::BadDtype {
        path: path.to_path_buf(),
        code: head[5],
    })?;
    let ndim = head[6] as usize;
    let mut dim_bytes = vec![0u8; 8 * ndim];
    read_exact_or_truncated(&mut f, &mut dim_bytes, path, 7, file_len)?;
    let dims: Vec<u64> = dim_bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let header = header_len(ndim) as u64;
    let available = file_len - header;
    let expected = dims
        .iter()
        .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d));
    let mismatch = |expected: u64| StorageError::PayloadMismatch {
        path: path.to_path_buf(),
        dims: dims.clone(),
        expected,
        got: available,
    };
    let expected = expected.ok_or_else(|| mismatch(u64::MAX))?;
    if expected > available {
        return Err(StorageError::Truncated {
            path: path.to_path_buf(),
            expected: header + expected,
            got: file_len,
        });
    }
    if expected < available {
        return Err(mismatch(expected));
    }
    let mut payload = vec![0u8; expected as usize];
    read_exact_or_truncated(&mut f, &mut payload, path, header, file_len)?;
    let dims: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let build = |e: crate::tensor::TensorError| StorageError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    Ok(match dtype {
        Dtype::F32 => AnyTensor::F32(
            Tensor::from_vec(
                dims,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
            .map_err(build)?,
        ),
        Dtype::F64 => AnyTensor::F64(
            Tensor::from_vec(
                dims,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
            .map_err(build)?,
        ),
        Dtype::I64 => AnyTensor::I64(
            Tensor::from_vec(
                dims,
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
            .map_err(build)?,
        ),
    })
}

/// Reads an `f32` record.
pub fn read_tensor(path: &Path) -> StorageResult<Tensor<f32>> {
    read_any(path)?.into_f32(path)
}

/// Hex FNV-1a-64 of a record's payload bytes.
pub fn payload_checksum(t: &AnyTensor) -> String {
    format!("{:016x}", fnv1a64(&t.payload()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
}

/// Per-item record inside a bundle. `tensors` maps a role such as `tokens`,
/// `attention` or `selector` to a tensor name in the bundle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleItem {
    pub id: String,
    #[serde(default)]
    pub tensors: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ViTConfig>,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<BundleItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

/// A bundle held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub config: Option<ViTConfig>,
    pub tensors: BTreeMap<String, AnyTensor>,
    pub items: Vec<BundleItem>,
    pub classes: Vec<String>,
    pub meta: BTreeMap<String, Value>,
    /// Directory the bundle was loaded from, for error messages.
    pub source: Option<PathBuf>,
}

impl Bundle {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            config: None,
            tensors: BTreeMap::new(),
            items: Vec::new(),
            classes: Vec::new(),
            meta: BTreeMap::new(),
            source: None,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) {
        self.tensors.insert(name.into(), t.into());
    }

    pub fn get(&self, name: &str) -> StorageResult<&AnyTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| StorageError::MissingTensor {
                bundle: self.source.clone().unwrap_or_default(),
                name: name.to_string(),
            })
    }

    pub fn f32(&self, name: &str) -> StorageResult<&Tensor<f32>> {
        match self.get(name)? {
            AnyTensor::F32(t) => Ok(t),
            other => Err(StorageError::DtypeMismatch {
                path: self.source.clone().unwrap_or_default().join(name),
                expected: Dtype::F32,
                found: other.dtype(),
            }),
        }
    }

    /// Tensor bound to `role` for the item, if any.
    pub fn item_tensor(
        &self,
        item: &BundleItem,
        role: &str,
    ) -> StorageResult<Option<&Tensor<f32>>> {
        item.tensors
            .get(role)
            .map(|name| self.f32(name))
            .transpose()
    }

    pub fn meta_usize(&self, key: &str) -> Option<usize> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
    }

    pub fn meta_bool(&self, key: &str) -> Option<bool> {
        self.meta.get(key).and_then(Value::as_bool)
    }
}

fn file_name_for(name: &str, used: &mut HashSet<String>) -> String {
    let base: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    let mut candidate = format!("{base}.satf");
    let mut i = 1;
    while !used.insert(candidate.clone()) {
        candidate = format!("{base}.{i}.satf");
        i += 1;
    }
    candidate
}

fn to_json_pretty<T: Serialize>(v: &T, path: &Path) -> StorageResult<String> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| StorageError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes the bundle into a sibling temp directory, then renames it over
/// `dir`, so readers never see a half-written bundle.
pub fn save_bundle(dir: &Path, bundle: &Bundle) -> StorageResult<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let stem = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bundle".into());
    let tmp = parent.join(format!(".{stem}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;

    let mut used = HashSet::new();
    let mut entries = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    for (name, t) in &bundle.tensors {
        let file = file_name_for(name, &mut used);
        write_any(&tmp.join(&file), t)?;
        checksums.insert(name.clone(), payload_checksum(t));
        entries.insert(
            name.clone(),
            TensorEntry {
                file,
                dtype: t.dtype(),
                dims: t.dims().to_vec(),
            },
        );
    }
    let manifest = BundleManifest {
        schema_version: SCHEMA_VERSION,
        kind: bundle.kind.clone(),
        config: bundle.config.clone(),
        tensors: entries,
        items: bundle.items.clone(),
        classes: bundle.classes.clone(),
        meta: bundle.meta.clone(),
    };
    let mpath = tmp.join(MANIFEST_FILE);
    fs::write(&mpath, to_json_pretty(&manifest, &mpath)?).map_err(io_err(&mpath))?;
    let cpath = tmp.join(CHECKSUM_FILE);
    fs::write(&cpath, to_json_pretty(&checksums, &cpath)?).map_err(io_err(&cpath))?;

    if dir.exists() {
        let old = parent.join(format!(".{stem}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(io_err(dir))?;
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    } else {
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> StorageResult<BundleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| StorageError::Json {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let version = raw
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| StorageError::Manifest {
            path: path.clone(),
            message: "missing schema_version".into(),
        })?;
    if version != SCHEMA_VERSION as u64 {
        return Err(StorageError::UnknownSchema {
            path,
            version: version as u32,
        });
    }
    serde_json::from_value(raw).map_err(|e| StorageError::Manifest {
        path,
        message: e.to_string(),
    })
}

/// Reads and validates one manifest entry.
pub fn read_entry(dir: &Path, name: &str, entry: &TensorEntry) -> StorageResult<AnyTensor> {
    let path = dir.join(&entry.file);
    if !path.is_file() {
        return Err(StorageError::MissingTensor {
            bundle: dir.to_path_buf(),
            name: name.to_string(),
        });
    }
    let t = read_any(&path)?;
    if t.dims() != entry.dims.as_slice() {
        return Err(StorageError::ShapeConflict {
            name: name.to_string(),
            manifest: entry.dims.clone(),
            record: t.dims().to_vec(),
        });
    }
    if t.dtype() != entry.dtype {
        return Err(StorageError::DtypeMismatch {
            path,
            expected: entry.dtype,
            found: t.dtype(),
        });
    }
    Ok(t)
}

/// Loads every declared tensor, checking shapes against the manifest and,
/// when `checksums.json` is present, payload hashes.
pub fn load_bundle(dir: &Path) -> StorageResult<Bundle> {
    let manifest = load_manifest(dir)?;
    let cpath = dir.join(CHECKSUM_FILE);
    let checksums: Option<BTreeMap<String, String>> = if cpath.is_file() {
        let text = fs::read_to_string(&cpath).map_err(io_err(&cpath))?;
        Some(serde_json::from_str(&text).map_err(|e| StorageError::Json {
            path: cpath.clone(),
            message: e.to_string(),
        })?)
    } else {
        None
    };
    let mut tensors = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        let t = read_entry(dir, name, entry)?;
        if let Some(expected) = checksums.as_ref().and_then(|c| c.get(name)) {
            let found = payload_checksum(&t);
            if !found.eq_ignore_ascii_case(expected) {
                return Err(StorageError::Checksum {
                    name: name.clone(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        tensors.insert(name.clone(), t);
    }
    for item in &manifest.items {
        for name in item.tensors.values() {
            if !tensors.contains_key(name) {
                return Err(StorageError::MissingTensor {
                    bundle: dir.to_path_buf(),
                    name: name.clone(),
                });
            }
        }
    }
    Ok(Bundle {
        kind: manifest.kind,
        config: manifest.config,
        tensors,
        items: manifest.items,
        classes: manifest.classes,
        meta: manifest.meta,
        source: Some(dir.to_path_buf()),
    })
}

/// Encoder (and optional decoder) weights as a `weights` bundle.
pub fn vit_bundle(
    cfg: &ViTConfig,
    params: &ViTParams,
    decoder: Option<&MaeDecoderParams>,
) -> Bundle {
    let mut b = Bundle::new("weights");
    b.config = Some(cfg.clone());
    for (name, t) in params.named_tensors() {
        b.insert(name, t);
    }
    if let Some(d) = decoder {
        for (name, t) in d.named_tensors() {
            b.insert(name, t);
        }
    }
    b
}

pub fn save_vit(
    dir: &Path,
    cfg: &ViTConfig,
    params: &ViTParams,
    decoder: Option<&MaeDecoderParams>,
) -> StorageResult<()> {
    save_bundle(dir, &vit_bundle(cfg, params, decoder))
}

/// Loads a `weights` bundle. The decoder is returned when the config
/// declares one.
pub fn load_vit(dir: &Path) -> StorageResult<(ViTConfig, ViTParams, Option<MaeDecoderParams>)> {
    let bundle = load_bundle(dir)?;
    let cfg = bundle
        .config
        .clone()
        .ok_or_else(|| StorageError::Manifest {
            path: dir.join(MANIFEST_FILE),
            message: "weights bundle has no model config".into(),
        })?;
    let mut get = |name: &str| match bundle.tensors.get(name) {
        Some(AnyTensor::F32(t)) => Some(t.clone()),
        _ => None,
    };
    let map_missing = |e: VitError, dir: &Path| match e {
        VitError::MissingTensor(name) => StorageError::MissingTensor {
            bundle: dir.to_path_buf(),
            name,
        },
        other => StorageError::Vit(other),
    };
    let params = ViTParams::from_named(&cfg, &mut get).map_err(|e| map_missing(e, dir))?;
    let decoder = match cfg.decoder {
        Some(_) => {
            Some(MaeDecoderParams::from_named(&cfg, &mut get).map_err(|e| map_missing(e, dir))?)
        }
        None => None,
    };
    Ok((cfg, params, decoder))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub classes: Vec<String>,
    pub items: Vec<DatasetItem>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> StorageResult<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| StorageError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        m.validate(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> StorageResult<()> {
        self.validate(path)?;
        fs::write(path, to_json_pretty(self, path)?).map_err(io_err(path))
    }

    /// Ids are unique and labels fall inside the class list (when one is
    /// given).
    pub fn validate(&self, path: &Path) -> StorageResult<()> {
        let err = |message: String| StorageError::Dataset {
            path: path.to_path_buf(),
            message,
        };
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(err(format!("duplicate id `{}`", item.id)));
            }
            if let (Some(l), false) = (item.label, self.classes.is_empty()) {
                if l >= self.classes.len() {
                    return Err(err(format!(
                        "label {l} of `{}` is outside {} classes",
                        item.id,
                        self.classes.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Resolves a path stored in the manifest relative to the manifest file.
    pub fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n
                .as_f64()
                .map(round_sig9)
                .and_then(serde_json::Number::from_f64)
            {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// JSON with sorted keys and floats rounded to 9 significant digits.
pub fn write_json<T: Serialize>(path: &Path, payload: &T) -> StorageResult<()> {
    let mut v = serde_json::to_value(payload).map_err(|e| StorageError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    round_json(&mut v);
    let text = to_json_pretty(&v, path)?;
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// A CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => round_sig9(*x).to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// Tabular report payloads.
pub trait Report {
    fn columns(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<Cell>>;
}

pub fn write_csv(path: &Path, columns: &[String], rows: &[Vec<Cell>]) -> StorageResult<()> {
    let csv_err = |e: csv::Error| StorageError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(columns).map_err(csv_err)?;
    for row in rows {
        if row.len() != columns.len() {
            return Err(StorageError::Csv {
                path: path.to_path_buf(),
                message: format!("row has {} cells for {} columns", row.len(), columns.len()),
            });
        }
        w.write_record(row.iter().map(Cell::render))
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_report_csv(path: &Path, report: &impl Report) -> StorageResult<()> {
    write_csv(path, &report.columns(), &report.rows())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!(
                "unknown report format `{other}` (expected json or csv)"
            )),
        }
    }
}

pub fn write_report<R: Report + Serialize>(
    path: &Path,
    report: &R,
    format: ReportFormat,
) -> StorageResult<()> {
    match format {
        ReportFormat::Json => write_json(path, report),
        ReportFormat::Csv => write_report_csv(path, report),
    }
}
