//! On-disk container format shared by datasets, checkpoints, evaluation
//! reports, and baseline completions.
//!
//! A container is a directory holding exactly two files:
//!
//! - `meta.json` — UTF-8 JSON: format tag, version, container kind, the
//!   SHA-256 of the payload file, an array directory (name, dtype, shape,
//!   offset, byte length), and kind-specific metadata.
//! - `data.bin` — 8 magic bytes (`FFILLBN1`) followed by the raw array
//!   payloads, little-endian, row-major, in directory order.
//!
//! Reads are lazy: opening a container parses `meta.json` and validates the
//! payload's magic and size, but the payload hash is only verified on first
//! array access. Writes are deterministic: identical content produces
//! byte-identical files (no timestamps, no map iteration order).

use crate::error::{Error, FormatError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cell::Cell;
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 8] = b"FFILLBN1";
pub const VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.bin";

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Directory entry for one array in the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset within `data.bin` (first payload byte is at offset 8,
    /// right after the magic).
    pub offset: u64,
    pub len_bytes: u64,
}

impl ArrayMeta {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parsed `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub payload_sha256: String,
    pub arrays: Vec<ArrayMeta>,
    pub meta: serde_json::Value,
}

/// Read handle over a container directory.
#[derive(Debug)]
pub struct Container {
    dir: PathBuf,
    pub meta: ContainerMeta,
    payload_len: u64,
    verified: Cell<bool>,
}

impl Container {
    /// Open a container: parse metadata, check magic/version/size. The
    /// payload checksum is deferred to the first array read (metadata stays
    /// cheap to inspect for large containers).
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ContainerMeta = serde_json::from_str(&text).map_err(|e| {
            Error::format(&meta_path, FormatError::Metadata(e.to_string()))
        })?;
        if meta.format != "flowfill-container" {
            return Err(Error::format(&meta_path, FormatError::BadMagic));
        }
        if meta.version != VERSION {
            return Err(Error::format(
                &meta_path,
                FormatError::Version {
                    found: meta.version,
                    supported: VERSION,
                },
            ));
        }

        let data_path = dir.join(DATA_FILE);
        let mut file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|e| Error::io(&data_path, e))?;
        if &magic != MAGIC {
            return Err(Error::format(&data_path, FormatError::BadMagic));
        }
        let payload_len = file
            .metadata()
            .map_err(|e| Error::io(&data_path, e))?
            .len();
        let expected: u64 = MAGIC.len() as u64
            + meta.arrays.iter().map(|a| a.len_bytes).sum::<u64>();
        if payload_len != expected {
            return Err(Error::format(
                &data_path,
                FormatError::Truncated {
                    expected,
                    found: payload_len,
                },
            ));
        }
        for a in &meta.arrays {
            if a.len_bytes != (a.num_elements() * a.dtype.size()) as u64 {
                return Err(Error::format(
                    &meta_path,
                    FormatError::Metadata(format!(
                        "array '{}' declares {} bytes but shape {:?} x {:?} needs {}",
                        a.name,
                        a.len_bytes,
                        a.shape,
                        a.dtype,
                        a.num_elements() * a.dtype.size()
                    )),
                ));
            }
        }
        Ok(Container {
            dir,
            meta,
            payload_len,
            verified: Cell::new(false),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn kind(&self) -> &str {
        &self.meta.kind
    }

    /// Deserialize the kind-specific metadata block.
    pub fn typed_meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.meta.clone()).map_err(|e| {
            Error::format(
                self.dir.join(META_FILE),
                FormatError::Metadata(e.to_string()),
            )
        })
    }

    pub fn array_meta(&self, name: &str) -> Result<&ArrayMeta> {
        self.meta.arrays.iter().find(|a| a.name == name).ok_or_else(|| {
            Error::format(
                self.dir.join(META_FILE),
                FormatError::Metadata(format!("missing array '{name}'")),
            )
        })
    }

    /// Hash the full payload once and compare against the declared checksum.
    pub fn verify_checksum(&self) -> Result<()> {
        if self.verified.get() {
            return Ok(());
        }
        let data_path = self.dir.join(DATA_FILE);
        let mut file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 20];
        loop {
            let n = file.read(&mut buf).map_err(|e| Error::io(&data_path, e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let actual = hex::encode(hasher.finalize());
        if actual != self.meta.payload_sha256 {
            return Err(Error::format(
                &data_path,
                FormatError::Checksum {
                    declared: self.meta.payload_sha256.clone(),
                    actual,
                },
            ));
        }
        self.verified.set(true);
        Ok(())
    }

    fn read_raw(&self, name: &str, expect: Dtype) -> Result<Vec<u8>> {
        self.verify_checksum()?;
        let a = self.array_meta(name)?;
        if a.dtype != expect {
            return Err(Error::format(
                self.dir.join(META_FILE),
                FormatError::Metadata(format!(
                    "array '{name}' has dtype {:?}, expected {:?}",
                    a.dtype, expect
                )),
            ));
        }
        let data_path = self.dir.join(DATA_FILE);
        let mut file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if a.offset + a.len_bytes > self.payload_len {
            return Err(Error::format(
                &data_path,
                FormatError::Truncated {
                    expected: a.offset + a.len_bytes,
                    found: self.payload_len,
                },
            ));
        }
        file.seek(SeekFrom::Start(a.offset))
            .map_err(|e| Error::io(&data_path, e))?;
        let mut bytes = vec![0u8; a.len_bytes as usize];
        file.read_exact(&mut bytes)
            .map_err(|e| Error::io(&data_path, e))?;
        Ok(bytes)
    }

    pub fn read_f32(&self, name: &str) -> Result<Vec<f32>> {
        let bytes = self.read_raw(name, Dtype::F32)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn read_f64(&self, name: &str) -> Result<Vec<f64>> {
        let bytes = self.read_raw(name, Dtype::F64)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn read_i64(&self, name: &str) -> Result<Vec<i64>> {
        let bytes = self.read_raw(name, Dtype::I64)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn read_u8(&self, name: &str) -> Result<Vec<u8>> {
        self.read_raw(name, Dtype::U8)
    }
}

/// Builder that accumulates arrays in memory, then writes both files.
pub struct ContainerWriter {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayMeta>,
    payload: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(kind: &str, meta: impl Serialize) -> Result<Self> {
        let meta = serde_json::to_value(meta)
            .map_err(|e| Error::Config(format!("unserializable container metadata: {e}")))?;
        Ok(ContainerWriter {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
            payload: MAGIC.to_vec(),
        })
    }

    fn push(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) {
        assert_eq!(
            bytes.len(),
            shape.iter().product::<usize>() * dtype.size(),
            "array '{name}' byte length does not match shape"
        );
        assert!(
            self.arrays.iter().all(|a| a.name != name),
            "duplicate array name '{name}'"
        );
        self.arrays.push(ArrayMeta {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset: self.payload.len() as u64,
            len_bytes: bytes.len() as u64,
        });
        self.payload.extend_from_slice(&bytes);
    }

    pub fn add_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> &mut Self {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Dtype::F32, shape, bytes);
        self
    }

    pub fn add_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> &mut Self {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Dtype::F64, shape, bytes);
        self
    }

    pub fn add_i64(&mut self, name: &str, shape: &[usize], data: &[i64]) -> &mut Self {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Dtype::I64, shape, bytes);
        self
    }

    pub fn add_u8(&mut self, name: &str, shape: &[usize], data: &[u8]) -> &mut Self {
        self.push(name, Dtype::U8, shape, data.to_vec());
        self
    }

    /// Write `meta.json` + `data.bin` under `dir` (created if absent;
    /// existing files are replaced atomically-enough via full rewrite).
    pub fn write(self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let digest = hex::encode(Sha256::digest(&self.payload));
        let meta = ContainerMeta {
            format: "flowfill-container".to_string(),
            version: VERSION,
            kind: self.kind,
            payload_sha256: digest,
            arrays: self.arrays,
            meta: self.meta,
        };
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, &self.payload).map_err(|e| Error::io(&data_path, e))?;
        let meta_path = dir.join(META_FILE);
        let mut text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Config(format!("metadata serialization failed: {e}")))?;
        text.push('\n');
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }
}

/// SHA-256 of a file, hex-encoded (used for manifests).
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, FormatError};
    use serde_json::json;

    fn sample_writer() -> ContainerWriter {
        let mut w = ContainerWriter::new("dataset", json!({"runs": 2, "note": "x"})).unwrap();
        w.add_f32("frames", &[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        w.add_i64("run_index", &[2], &[0, 1]);
        w.add_u8("split", &[2], &[0, 1]);
        w
    }

    #[test]
    fn round_trip_preserves_payload_and_metadata() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c");
        sample_writer().write(&dir).unwrap();
        let c = Container::open(&dir).unwrap();
        assert_eq!(c.kind(), "dataset");
        assert_eq!(c.meta.meta["runs"], json!(2));
        assert_eq!(
            c.read_f32("frames").unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
        );
        assert_eq!(c.read_i64("run_index").unwrap(), vec![0, 1]);
        assert_eq!(c.read_u8("split").unwrap(), vec![0, 1]);
    }

    #[test]
    fn identical_content_writes_identical_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
        sample_writer().write(&d1).unwrap();
        sample_writer().write(&d2).unwrap();
        for f in [META_FILE, DATA_FILE] {
            assert_eq!(
                fs::read(d1.join(f)).unwrap(),
                fs::read(d2.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c");
        sample_writer().write(&dir).unwrap();
        let mut bytes = fs::read(dir.join(DATA_FILE)).unwrap();
        bytes[0] ^= 0xFF;
        fs::write(dir.join(DATA_FILE), &bytes).unwrap();
        match Container::open(&dir) {
            Err(Error::Format {
                kind: FormatError::BadMagic,
                ..
            }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported_distinctly() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c");
        sample_writer().write(&dir).unwrap();
        let bytes = fs::read(dir.join(DATA_FILE)).unwrap();
        fs::write(dir.join(DATA_FILE), &bytes[..bytes.len() - 5]).unwrap();
        match Container::open(&dir) {
            Err(Error::Format {
                kind: FormatError::Truncated { expected, found },
                ..
            }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(found, bytes.len() as u64 - 5);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn flipped_payload_byte_fails_checksum_but_not_open() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c");
        sample_writer().write(&dir).unwrap();
        let mut bytes = fs::read(dir.join(DATA_FILE)).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(dir.join(DATA_FILE), &bytes).unwrap();
        // Metadata stays accessible (lazy hash)...
        let c = Container::open(&dir).unwrap();
        assert_eq!(c.kind(), "dataset");
        // ...but the first array read detects the corruption.
        match c.read_f32("frames") {
            Err(Error::Format {
                kind: FormatError::Checksum { .. },
                ..
            }) => {}
            other => panic!("expected Checksum, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c");
        sample_writer().write(&dir).unwrap();
        let text = fs::read_to_string(dir.join(META_FILE)).unwrap();
        fs::write(
            dir.join(META_FILE),
            text.replace("\"version\": 1", "\"version\": 99"),
        )
        .unwrap();
        match Container::open(&dir) {
            Err(Error::Format {
                kind: FormatError::Version { found: 99, .. },
                ..
            }) => {}
            other => panic!("expected Version, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_on_read_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c");
        sample_writer().write(&dir).unwrap();
        let c = Container::open(&dir).unwrap();
        assert!(c.read_f64("frames").is_err());
        assert!(c.read_f32("missing").is_err());
    }
}
