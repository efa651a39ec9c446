//! The `.kgph` hidden-state container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! 0..4    magic "KGPH"
//! 4..8    u32 version (1)
//! 8..12   u32 header_length
//! ..      UTF-8 JSON header {model, dim, layers, count, dtype, task, labels}
//! ..      count records: u64 example_id, i32 label, then dim x f32 per header layer
//! ```
//!
//! Records have a fixed stride, so a record's offset is
//! `12 + header_length + index * stride`.

use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"KGPH";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}, not a hidden-state store")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated store: {0}")]
    Truncated(String),
    #[error("record count mismatch: header says {header}, payload holds {found}")]
    CountMismatch { header: u64, found: String },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("record {example_id}: {reason}")]
    InvalidRecord { example_id: u64, reason: String },
    #[error("record index {index} out of range ({count} records)")]
    OutOfRange { index: u64, count: u64 },
}

impl StoreError {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            StoreError::Io { .. } => "io",
            StoreError::BadMagic(_) => "bad_magic",
            StoreError::UnsupportedVersion(_) => "version_mismatch",
            StoreError::Truncated(_) => "truncated",
            StoreError::CountMismatch { .. } => "count_mismatch",
            StoreError::InvalidHeader(_) => "invalid_header",
            StoreError::InvalidRecord { .. } => "invalid_record",
            StoreError::OutOfRange { .. } => "out_of_range",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskTag {
    /// Triple classification.
    #[serde(rename = "tc")]
    TripleClassification,
    /// Relation prediction.
    #[serde(rename = "rp")]
    RelationPrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreHeader {
    pub model: String,
    pub dim: usize,
    pub layers: Vec<usize>,
    pub count: u64,
    pub dtype: String,
    pub task: TaskTag,
    /// Class names; a record's label indexes this list.
    pub labels: Vec<String>,
}

impl StoreHeader {
    pub fn new(
        model: impl Into<String>,
        dim: usize,
        layers: Vec<usize>,
        task: TaskTag,
        labels: Vec<String>,
    ) -> Self {
        StoreHeader {
            model: model.into(),
            dim,
            layers,
            count: 0,
            dtype: "f32".into(),
            task,
            labels,
        }
    }

    /// Labels of a binary triple-classification store.
    pub fn binary_labels() -> Vec<String> {
        vec!["false".into(), "true".into()]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Bytes per record.
    pub fn stride(&self) -> usize {
        8 + 4 + self.layers.len() * self.dim * 4
    }

    pub fn layer_position(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidHeader(m));
        if self.dtype != "f32" {
            return bad(format!("dtype {:?} unsupported", self.dtype));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("empty layer list".into());
        }
        if self.layers[0] == 0 {
            return bad("layer 0 (embeddings) is not an interior layer".into());
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("layers {:?} not strictly increasing", self.layers));
        }
        if self.labels.len() < 2 {
            return bad("label space needs at least two classes".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateRecord {
    pub example_id: u64,
    pub label: i32,
    /// `layers.len() * dim` values, layer-major in header order.
    pub states: Vec<f32>,
}

impl HiddenStateRecord {
    /// State at position `pos` of the header layer list.
    pub fn layer_at(&self, pos: usize, dim: usize) -> &[f32] {
        &self.states[pos * dim..(pos + 1) * dim]
    }
}

/// A header and its records, fully in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateStore {
    pub header: StoreHeader,
    pub records: Vec<HiddenStateRecord>,
}

impl HiddenStateStore {
    pub fn new(header: StoreHeader) -> Self {
        HiddenStateStore {
            header: StoreHeader { count: 0, ..header },
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: HiddenStateRecord) -> Result<(), StoreError> {
        check_record(&self.header, &record)?;
        self.records.push(record);
        self.header.count = self.records.len() as u64;
        Ok(())
    }

    /// Feature rows and labels for one layer.
    pub fn layer_matrix(&self, layer: usize) -> Option<(Vec<&[f32]>, Vec<i32>)> {
        let pos = self.header.layer_position(layer)?;
        let dim = self.header.dim;
        Some((
            self.records.iter().map(|r| r.layer_at(pos, dim)).collect(),
            self.records.iter().map(|r| r.label).collect(),
        ))
    }

    /// A store holding the records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> HiddenStateStore {
        let records: Vec<_> = indices.iter().map(|&i| self.records[i].clone()).collect();
        HiddenStateStore {
            header: StoreHeader {
                count: records.len() as u64,
                ..self.header.clone()
            },
            records,
        }
    }

    pub fn labels(&self) -> Vec<i32> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = StoreHeader {
            count: self.records.len() as u64,
            ..self.header.clone()
        };
        let mut out = Vec::with_capacity(PREAMBLE + 256 + self.records.len() * header.stride());
        write_preamble(&mut out, &header).expect("write to vec");
        for r in &self.records {
            write_record(&mut out, r).expect("write to vec");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let (header, data_start) = parse_preamble(bytes)?;
        let payload = &bytes[data_start..];
        let stride = header.stride();
        let expected = header.count as usize * stride;
        if !payload.len().is_multiple_of(stride) {
            return Err(StoreError::Truncated(format!(
                "payload of {} bytes is not a whole number of {stride}-byte records",
                payload.len()
            )));
        }
        if payload.len() != expected {
            return Err(StoreError::CountMismatch {
                header: header.count,
                found: (payload.len() / stride).to_string(),
            });
        }
        let records = payload
            .chunks_exact(stride)
            .map(|chunk| decode_record(&header, chunk))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(HiddenStateStore { header, records })
    }
}

fn check_record(header: &StoreHeader, r: &HiddenStateRecord) -> Result<(), StoreError> {
    let invalid = |reason: String| StoreError::InvalidRecord {
        example_id: r.example_id,
        reason,
    };
    if r.states.len() != header.layers.len() * header.dim {
        return Err(invalid(format!(
            "{} values, expected {}",
            r.states.len(),
            header.layers.len() * header.dim
        )));
    }
    if r.label < 0 || r.label as usize >= header.labels.len() {
        return Err(invalid(format!("label {} outside label space", r.label)));
    }
    if let Some(i) = r.states.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!(
            "non-finite value at layer {}",
            header.layers[i / header.dim]
        )));
    }
    Ok(())
}

fn write_preamble(w: &mut impl Write, header: &StoreHeader) -> io::Result<()> {
    let json = serde_json::to_vec(header).expect("header serializes");
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)
}

fn write_record(w: &mut impl Write, r: &HiddenStateRecord) -> io::Result<()> {
    w.write_all(&r.example_id.to_le_bytes())?;
    w.write_all(&r.label.to_le_bytes())?;
    let mut buf = Vec::with_capacity(r.states.len() * 4);
    for v in &r.states {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn parse_preamble(bytes: &[u8]) -> Result<(StoreHeader, usize), StoreError> {
    if bytes.len() < 4 {
        return Err(StoreError::Truncated("file shorter than magic".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(StoreError::Truncated("file shorter than preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = PREAMBLE + header_len;
    if bytes.len() < end {
        return Err(StoreError::Truncated(
            "header extends past end of file".into(),
        ));
    }
    let header = parse_header(&bytes[PREAMBLE..end])?;
    Ok((header, end))
}

fn parse_header(json: &[u8]) -> Result<StoreHeader, StoreError> {
    let header: StoreHeader =
        serde_json::from_slice(json).map_err(|e| StoreError::InvalidHeader(e.to_string()))?;
    header.validate()?;
    Ok(header)
}

fn decode_record(header: &StoreHeader, chunk: &[u8]) -> Result<HiddenStateRecord, StoreError> {
    let example_id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
    let label = i32::from_le_bytes(chunk[8..12].try_into().unwrap());
    let states = chunk[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let r = HiddenStateRecord {
        example_id,
        label,
        states,
    };
    check_record(header, &r)?;
    Ok(r)
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn write_store(store: &HiddenStateStore, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(io_err(path))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<HiddenStateStore, StoreError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    HiddenStateStore::from_bytes(&bytes)
}

/// Append-only writer for a store whose record count is known up front.
pub struct StoreWriter {
    header: StoreHeader,
    out: BufWriter<File>,
    path: PathBuf,
    written: u64,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, header: StoreHeader) -> Result<Self, StoreError> {
        header.validate()?;
        let path = path.as_ref().to_owned();
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        write_preamble(&mut out, &header).map_err(io_err(&path))?;
        Ok(StoreWriter {
            header,
            out,
            path,
            written: 0,
        })
    }

    pub fn append(&mut self, r: &HiddenStateRecord) -> Result<(), StoreError> {
        if self.written == self.header.count {
            return Err(StoreError::CountMismatch {
                header: self.header.count,
                found: format!("more than {}", self.written),
            });
        }
        check_record(&self.header, r)?;
        write_record(&mut self.out, r).map_err(io_err(&self.path))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), StoreError> {
        if self.written != self.header.count {
            return Err(StoreError::CountMismatch {
                header: self.header.count,
                found: self.written.to_string(),
            });
        }
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Random-access reader; only the header is held in memory.
pub struct StoreReader {
    header: StoreHeader,
    file: File,
    data_start: u64,
    path: PathBuf,
}

impl StoreReader {
    /// Opens a store and checks that the file size matches the header count.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_owned();
        let mut file = File::open(&path).map_err(io_err(&path))?;
        let len = file.metadata().map_err(io_err(&path))?.len();
        let mut pre = [0u8; PREAMBLE];
        let got = read_up_to(&mut file, &mut pre).map_err(io_err(&path))?;
        if got >= 4 && &pre[..4] != MAGIC {
            return Err(StoreError::BadMagic(pre[..4].try_into().unwrap()));
        }
        if got < PREAMBLE {
            return Err(StoreError::Truncated("file shorter than preamble".into()));
        }
        let version = u32::from_le_bytes(pre[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(pre[8..12].try_into().unwrap()) as u64;
        if len < PREAMBLE as u64 + header_len {
            return Err(StoreError::Truncated(
                "header extends past end of file".into(),
            ));
        }
        let mut json = vec![0u8; header_len as usize];
        file.read_exact(&mut json).map_err(io_err(&path))?;
        let header = parse_header(&json)?;
        let data_start = PREAMBLE as u64 + header_len;
        let payload = len - data_start;
        let stride = header.stride() as u64;
        if !payload.is_multiple_of(stride) {
            return Err(StoreError::Truncated(format!(
                "payload of {payload} bytes is not a whole number of {stride}-byte records"
            )));
        }
        if payload / stride != header.count {
            return Err(StoreError::CountMismatch {
                header: header.count,
                found: (payload / stride).to_string(),
            });
        }
        Ok(StoreReader {
            header,
            file,
            data_start,
            path,
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn len(&self) -> u64 {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn record(&mut self, index: u64) -> Result<HiddenStateRecord, StoreError> {
        if index >= self.header.count {
            return Err(StoreError::OutOfRange {
                index,
                count: self.header.count,
            });
        }
        let stride = self.header.stride();
        let offset = self.data_start + index * stride as u64;
        let mut buf = vec![0u8; stride];
        self.file
            .seek(SeekFrom::Start(offset))
            .map_err(io_err(&self.path))?;
        self.file.read_exact(&mut buf).map_err(io_err(&self.path))?;
        decode_record(&self.header, &buf)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Full structural check of a store file: preamble, header, size, and every record.
pub fn validate_store(path: impl AsRef<Path>) -> Result<StoreHeader, StoreError> {
    let mut reader = StoreReader::open(path)?;
    for i in 0..reader.len() {
        reader.record(i)?;
    }
    Ok(reader.header().clone())
}
