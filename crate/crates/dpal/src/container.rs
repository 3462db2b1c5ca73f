//! The DPLC tensor container: magic, version, a text manifest and raw
//! little-endian payloads.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use dpal_core::Tensor;

pub const MAGIC: &[u8; 4] = b"DPLC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            "i64" => Some(DType::I64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl Data {
    pub fn dtype(&self) -> DType {
        match self {
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
            Data::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality, so that NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Data) -> bool {
        match (self, other) {
            (Data::F32(a), Data::F32(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::F64(a), Data::F64(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::I64(a), Data::I64(b)) => a == b,
            _ => false,
        }
    }
}

/// One named array in a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Data,
}

impl Entry {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: Data::F64(t.data().to_vec()),
        }
    }

    pub fn i64(name: impl Into<String>, shape: &[usize], values: Vec<i64>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: Data::I64(values),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// The payload as an `f64` tensor; `f32` payloads are widened.
    pub fn to_tensor(&self) -> Result<Tensor, FormatError> {
        let values = match &self.data {
            Data::F64(v) => v.clone(),
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::I64(_) => {
                return Err(FormatError::new(0, FormatErrorKind::Entry(format!("{} holds integers", self.name))));
            }
        };
        Tensor::new(&self.shape, values).map_err(|e| FormatError::new(0, FormatErrorKind::Entry(e.to_string())))
    }

    pub fn bit_eq(&self, other: &Entry) -> bool {
        self.name == other.name && self.shape == other.shape && self.data.bit_eq(&other.data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion(u16),
    Truncated { needed: usize, available: usize },
    Manifest(String),
    TrailingBytes(usize),
    Entry(String),
}

/// A malformed container, with the byte offset where decoding stopped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatError {
    pub offset: usize,
    pub kind: FormatErrorKind,
}

impl FormatError {
    fn new(offset: usize, kind: FormatErrorKind) -> Self {
        Self { offset, kind }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FormatErrorKind::BadMagic => write!(f, "bad magic at byte {}", self.offset),
            FormatErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v} at byte {}", self.offset),
            FormatErrorKind::Truncated { needed, available } => write!(
                f,
                "truncated at byte {}: need {needed} bytes, {available} available",
                self.offset
            ),
            FormatErrorKind::Manifest(m) => write!(f, "manifest error at byte {}: {m}", self.offset),
            FormatErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes at byte {}", self.offset),
            FormatErrorKind::Entry(m) => write!(f, "invalid entry: {m}"),
        }
    }
}

impl std::error::Error for FormatError {}

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: String, source: FormatError },
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(|c| c.is_whitespace() || c.is_control())
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>, FormatError> {
    let mut manifest = String::new();
    for e in entries {
        if !valid_name(&e.name) {
            return Err(FormatError::new(0, FormatErrorKind::Entry(format!("invalid name {:?}", e.name))));
        }
        if e.numel() != e.data.len() {
            return Err(FormatError::new(
                0,
                FormatErrorKind::Entry(format!("{}: shape {:?} vs {} values", e.name, e.shape, e.data.len())),
            ));
        }
        manifest.push_str(&e.name);
        manifest.push(' ');
        manifest.push_str(e.data.dtype().name());
        for d in &e.shape {
            manifest.push(' ');
            manifest.push_str(&d.to_string());
        }
        manifest.push('\n');
    }
    let payload: usize = entries.iter().map(|e| e.data.len() * e.data.dtype().size()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mlen = u32::try_from(manifest.len())
        .map_err(|_| FormatError::new(6, FormatErrorKind::Manifest("manifest too long".into())))?;
    out.extend_from_slice(&mlen.to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for e in entries {
        match &e.data {
            Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], offset: usize, n: usize) -> Result<&'a [u8], FormatError> {
    let available = bytes.len().saturating_sub(offset);
    if available < n {
        return Err(FormatError::new(offset, FormatErrorKind::Truncated { needed: n, available }));
    }
    Ok(&bytes[offset..offset + n])
}

struct Header {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

fn parse_manifest(text: &str, base: usize) -> Result<Vec<Header>, FormatError> {
    let mut out = Vec::new();
    let mut offset = base;
    for line in text.split_inclusive('\n') {
        let bad = |m: String| FormatError::new(offset, FormatErrorKind::Manifest(m));
        let body = line.strip_suffix('\n').ok_or_else(|| bad("unterminated line".into()))?;
        let mut parts = body.split(' ');
        let name = parts.next().filter(|n| valid_name(n)).ok_or_else(|| bad("missing name".into()))?;
        let dtype = parts
            .next()
            .and_then(DType::parse)
            .ok_or_else(|| bad(format!("{name}: unknown dtype")))?;
        let shape = parts
            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("{name}: bad dimension {d:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(bad(format!("{name}: shape overflows")));
        }
        if out.iter().any(|h: &Header| h.name == name) {
            return Err(bad(format!("duplicate entry {name}")));
        }
        out.push(Header {
            name: name.to_string(),
            dtype,
            shape,
        });
        offset += line.len();
    }
    Ok(out)
}

/// Decodes a whole container. Nothing is returned unless every byte is accounted for.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, FormatError> {
    let magic = take(bytes, 0, 4)?;
    if magic != MAGIC {
        return Err(FormatError::new(0, FormatErrorKind::BadMagic));
    }
    let version = u16::from_le_bytes(take(bytes, 4, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::new(4, FormatErrorKind::UnsupportedVersion(version)));
    }
    let mlen = u32::from_le_bytes(take(bytes, 6, 4)?.try_into().unwrap()) as usize;
    let mbytes = take(bytes, HEADER_LEN, mlen)?;
    let text = std::str::from_utf8(mbytes).map_err(|e| {
        FormatError::new(HEADER_LEN + e.valid_up_to(), FormatErrorKind::Manifest("invalid UTF-8".into()))
    })?;
    let headers = parse_manifest(text, HEADER_LEN)?;
    let mut offset = HEADER_LEN + mlen;
    let mut entries = Vec::with_capacity(headers.len());
    for h in headers {
        let n: usize = h.shape.iter().product();
        let size = h.dtype.size();
        let len = n
            .checked_mul(size)
            .ok_or_else(|| FormatError::new(offset, FormatErrorKind::Manifest(format!("{}: too large", h.name))))?;
        let raw = take(bytes, offset, len)?;
        let data = match h.dtype {
            DType::F32 => Data::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Data::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I64 => Data::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        entries.push(Entry {
            name: h.name,
            shape: h.shape,
            data,
        });
        offset += len;
    }
    if offset != bytes.len() {
        return Err(FormatError::new(offset, FormatErrorKind::TrailingBytes(bytes.len() - offset)));
    }
    Ok(entries)
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<(), ContainerError> {
    let p = path.display().to_string();
    let bytes = encode(entries).map_err(|source| ContainerError::Format { path: p.clone(), source })?;
    write_atomic(path, &bytes).map_err(|source| ContainerError::Io { path: p, source })
}

pub fn load(path: &Path) -> Result<Vec<Entry>, ContainerError> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ContainerError::Io { path: p.clone(), source })?;
    decode(&bytes).map_err(|source| ContainerError::Format { path: p, source })
}

/// Looks up an entry by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry, FormatError> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| FormatError::new(0, FormatErrorKind::Entry(format!("missing entry {name}"))))
}
