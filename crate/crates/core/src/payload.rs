//! Zero-copy data plane: one named shared-memory segment per batch.
//!
//! A segment is an 80-byte [`SegmentHeader`] followed by the payload. The
//! producer writes it once, seals it, and announces its name; consumers map the
//! name read-only. Releasing unlinks the name, but mappings taken earlier stay
//! readable until dropped.
//!
//! Header layout (little-endian, packed):
//!
//! | offset | size | field       |
//! |--------|------|-------------|
//! | 0      | 4    | magic `TSKB`|
//! | 4      | 2    | version     |
//! | 6      | 4    | epoch       |
//! | 10     | 8    | batch_index |
//! | 18     | 1    | dtype code  |
//! | 19     | 1    | ndim        |
//! | 20     | 32   | shape, 8 × u32, unused entries zero |
//! | 52     | 8    | byte_len    |
//! | 60     | 4    | checksum    |
//! | 64     | 16   | reserved    |

use std::fs::{File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use memmap2::{Mmap, MmapMut};
use thiserror::Error;

use crate::wire::{self, Announce, DType, MAX_NDIM, MAX_SEGMENT_NAME_LEN};

pub const HEADER_LEN: usize = 80;
pub const SEGMENT_MAGIC: [u8; 4] = *b"TSKB";
pub const SEGMENT_VERSION: u16 = 1;
pub const DEFAULT_SHM_DIR: &str = "/dev/shm";

const CREATE_ATTEMPTS: usize = 3;

static LIVE_VIEWS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`BatchView`] mappings currently held by this process.
pub fn live_views() -> usize {
    LIVE_VIEWS.load(Ordering::SeqCst)
}

#[derive(Debug, Error)]
pub enum PayloadError {
    #[error("shared memory exhausted creating {name}: {source}")]
    Resource { name: String, source: io::Error },
    #[error("segment name collision for {0} after {CREATE_ATTEMPTS} attempts")]
    NameCollision(String),
    #[error("segment {0} no longer exists")]
    StaleHandle(String),
    #[error("segment {name} is corrupt: {reason}")]
    Corrupt { name: String, reason: String },
    #[error("invalid segment name {0:?}")]
    InvalidName(String),
    #[error("shape {shape:?} of {dtype} does not describe {len} bytes")]
    ShapeMismatch { shape: Vec<u64>, dtype: DType, len: usize },
    #[error("i/o error on segment {name}: {source}")]
    Io { name: String, source: io::Error },
}

/// Identity and metadata of one prepared batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDescriptor {
    pub epoch: u32,
    pub batch_index: u64,
    pub segment_name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub byte_len: u64,
    pub checksum: u32,
}

impl BatchDescriptor {
    pub fn to_announce(&self) -> Announce {
        Announce {
            epoch: self.epoch,
            batch_index: self.batch_index,
            segment_name: self.segment_name.clone(),
            byte_len: self.byte_len,
            dtype: self.dtype,
            shape: self.shape.clone(),
            checksum: self.checksum,
        }
    }
}

impl From<Announce> for BatchDescriptor {
    fn from(a: Announce) -> Self {
        BatchDescriptor {
            epoch: a.epoch,
            batch_index: a.batch_index,
            segment_name: a.segment_name,
            dtype: a.dtype,
            shape: a.shape,
            byte_len: a.byte_len,
            checksum: a.checksum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentHeader {
    pub version: u16,
    pub epoch: u32,
    pub batch_index: u64,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub byte_len: u64,
    pub checksum: u32,
}

impl SegmentHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&SEGMENT_MAGIC);
        h[4..6].copy_from_slice(&self.version.to_le_bytes());
        h[6..10].copy_from_slice(&self.epoch.to_le_bytes());
        h[10..18].copy_from_slice(&self.batch_index.to_le_bytes());
        h[18] = self.dtype.code();
        h[19] = self.shape.len() as u8;
        for (i, d) in self.shape.iter().enumerate() {
            let at = 20 + 4 * i;
            h[at..at + 4].copy_from_slice(&(*d as u32).to_le_bytes());
        }
        h[52..60].copy_from_slice(&self.byte_len.to_le_bytes());
        h[60..64].copy_from_slice(&self.checksum.to_le_bytes());
        h
    }

    /// Parses and validates a header; `Err` carries the reason.
    pub fn decode(h: &[u8]) -> Result<SegmentHeader, String> {
        if h.len() < HEADER_LEN {
            return Err(format!("{} bytes is shorter than the header", h.len()));
        }
        if h[0..4] != SEGMENT_MAGIC {
            return Err(format!("bad magic {:02x?}", &h[0..4]));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != SEGMENT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dtype = DType::from_code(h[18]).ok_or_else(|| format!("unknown dtype {}", h[18]))?;
        let ndim = h[19] as usize;
        if ndim > MAX_NDIM {
            return Err(format!("ndim {ndim} exceeds {MAX_NDIM}"));
        }
        let shape = (0..ndim)
            .map(|i| {
                let at = 20 + 4 * i;
                u32::from_le_bytes(h[at..at + 4].try_into().unwrap()) as u64
            })
            .collect::<Vec<_>>();
        let byte_len = u64::from_le_bytes(h[52..60].try_into().unwrap());
        if wire::shape_byte_len(&shape, dtype) != Some(byte_len) {
            return Err(format!("shape {shape:?} of {dtype} does not match byte_len {byte_len}"));
        }
        Ok(SegmentHeader {
            version,
            epoch: u32::from_le_bytes(h[6..10].try_into().unwrap()),
            batch_index: u64::from_le_bytes(h[10..18].try_into().unwrap()),
            dtype,
            shape,
            byte_len,
            checksum: u32::from_le_bytes(h[60..64].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentState {
    Writable,
    Sealed,
    Released,
}

/// Producer-side handle to one batch segment.
#[derive(Debug)]
pub struct SharedPayload {
    pub segment_name: String,
    pub total_bytes: u64,
    state: SegmentState,
    path: PathBuf,
}

impl SharedPayload {
    pub fn state(&self) -> SegmentState {
        self.state
    }
}

/// Directory that backs named segments (`/dev/shm` on Linux).
#[derive(Debug, Clone)]
pub struct SegmentStore {
    dir: PathBuf,
    pid: u32,
}

impl Default for SegmentStore {
    fn default() -> Self {
        Self::new(DEFAULT_SHM_DIR)
    }
}

impl SegmentStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SegmentStore {
            dir: dir.into(),
            pid: std::process::id(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn segment_name(&self, epoch: u32, batch_index: u64) -> String {
        format!("tsk-{}-{}-{}", self.pid, epoch, batch_index)
    }

    fn path_of(&self, name: &str) -> Result<PathBuf, PayloadError> {
        if name.is_empty()
            || name.len() > MAX_SEGMENT_NAME_LEN
            || name.contains('/')
            || name == "."
            || name == ".."
        {
            return Err(PayloadError::InvalidName(name.to_owned()));
        }
        Ok(self.dir.join(name))
    }

    /// Writes `bytes` once into a fresh segment and seals it.
    pub fn create_segment(
        &self,
        epoch: u32,
        batch_index: u64,
        dtype: DType,
        shape: &[u64],
        bytes: &[u8],
    ) -> Result<(SharedPayload, BatchDescriptor), PayloadError> {
        if shape.len() > MAX_NDIM
            || shape.iter().any(|&d| d > u32::MAX as u64)
            || wire::shape_byte_len(shape, dtype) != Some(bytes.len() as u64)
        {
            return Err(PayloadError::ShapeMismatch {
                shape: shape.to_vec(),
                dtype,
                len: bytes.len(),
            });
        }
        let base = self.segment_name(epoch, batch_index);
        let (name, path, file) = self.create_unique(&base)?;
        let total = HEADER_LEN + bytes.len();
        let io_err = |source| PayloadError::Io {
            name: name.clone(),
            source,
        };
        let mut payload = SharedPayload {
            segment_name: name.clone(),
            total_bytes: total as u64,
            state: SegmentState::Writable,
            path,
        };
        let written = (|| -> Result<u32, PayloadError> {
            file.set_len(total as u64).map_err(|source| PayloadError::Resource {
                name: name.clone(),
                source,
            })?;
            // SAFETY: the file was created exclusively by us and has just been
            // sized; nobody else writes to it.
            let mut map = unsafe { MmapMut::map_mut(&file) }.map_err(io_err)?;
            map[HEADER_LEN..].copy_from_slice(bytes);
            let sum = wire::checksum(&map[HEADER_LEN..]);
            let header = SegmentHeader {
                version: SEGMENT_VERSION,
                epoch,
                batch_index,
                dtype,
                shape: shape.to_vec(),
                byte_len: bytes.len() as u64,
                checksum: sum,
            };
            map[..HEADER_LEN].copy_from_slice(&header.encode());
            Ok(sum)
        })();
        let checksum = match written {
            Ok(sum) => sum,
            Err(e) => {
                let _ = std::fs::remove_file(&payload.path);
                return Err(e);
            }
        };
        payload.state = SegmentState::Sealed;
        let desc = BatchDescriptor {
            epoch,
            batch_index,
            segment_name: name,
            dtype,
            shape: shape.to_vec(),
            byte_len: bytes.len() as u64,
            checksum,
        };
        Ok((payload, desc))
    }

    fn create_unique(&self, base: &str) -> Result<(String, PathBuf, File), PayloadError> {
        for attempt in 0..CREATE_ATTEMPTS {
            let name = if attempt == 0 {
                base.to_owned()
            } else {
                format!("{base}-r{attempt}")
            };
            let path = self.path_of(&name)?;
            match OpenOptions::new()
                .read(true)
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(f) => return Ok((name, path, f)),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(source) => return Err(PayloadError::Resource { name, source }),
            }
        }
        Err(PayloadError::NameCollision(base.to_owned()))
    }

    /// Maps a segment read-only and parses its header.
    pub fn map_segment(&self, name: &str, verify_checksum: bool) -> Result<BatchView, PayloadError> {
        let path = self.path_of(name)?;
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(PayloadError::StaleHandle(name.to_owned()))
            }
            Err(source) => {
                return Err(PayloadError::Io {
                    name: name.to_owned(),
                    source,
                })
            }
        };
        let corrupt = |reason: String| PayloadError::Corrupt {
            name: name.to_owned(),
            reason,
        };
        // SAFETY: sealed segments are never written after announcement.
        let map = unsafe { Mmap::map(&file) }.map_err(|source| PayloadError::Io {
            name: name.to_owned(),
            source,
        })?;
        let header = SegmentHeader::decode(&map).map_err(corrupt)?;
        if (map.len() - HEADER_LEN) as u64 != header.byte_len {
            return Err(corrupt(format!(
                "segment holds {} payload bytes, header says {}",
                map.len() - HEADER_LEN,
                header.byte_len
            )));
        }
        if verify_checksum {
            let actual = wire::checksum(&map[HEADER_LEN..]);
            if actual != header.checksum {
                return Err(corrupt(format!(
                    "checksum {actual:#010x} != recorded {:#010x}",
                    header.checksum
                )));
            }
        }
        LIVE_VIEWS.fetch_add(1, Ordering::SeqCst);
        Ok(BatchView {
            descriptor: BatchDescriptor {
                epoch: header.epoch,
                batch_index: header.batch_index,
                segment_name: name.to_owned(),
                dtype: header.dtype,
                shape: header.shape,
                byte_len: header.byte_len,
                checksum: header.checksum,
            },
            map,
        })
    }

    /// Unlinks the segment name. Idempotent.
    pub fn release_segment(&self, payload: &mut SharedPayload) {
        if payload.state == SegmentState::Released {
            return;
        }
        if let Err(e) = std::fs::remove_file(&payload.path) {
            if e.kind() != io::ErrorKind::NotFound {
                log::warn!("unlinking {}: {e}", payload.segment_name);
            }
        }
        payload.state = SegmentState::Released;
    }

    /// Names of segments in the store created by this process.
    pub fn own_segments(&self) -> io::Result<Vec<String>> {
        let prefix = format!("tsk-{}-", self.pid);
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.starts_with(&prefix) {
                out.push(name);
            }
        }
        Ok(out)
    }
}

/// Read-only view of one mapped batch. Contents never change while held.
#[derive(Debug)]
pub struct BatchView {
    pub descriptor: BatchDescriptor,
    map: Mmap,
}

impl BatchView {
    pub fn bytes(&self) -> &[u8] {
        &self.map[HEADER_LEN..]
    }

    pub fn len(&self) -> usize {
        self.map.len() - HEADER_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recomputes the payload checksum.
    pub fn checksum(&self) -> u32 {
        wire::checksum(self.bytes())
    }
}

impl Drop for BatchView {
    fn drop(&mut self) {
        LIVE_VIEWS.fetch_sub(1, Ordering::SeqCst);
    }
}
