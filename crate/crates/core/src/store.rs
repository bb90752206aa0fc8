//! Run manifests and snapshot files.
//!
//! A snapshot file is an ASCII header followed by binary frames:
//!
//! ```text
//! KGSP-SNAPSHOT
//! schema_version=1
//! manifest={...json...}
//! status={...json...}
//! points=<nodes per field>
//! frames=<frame count>
//! <empty line>
//! frame*: time f64 | phi f64 x points | psi f64 x points | crc32 u32
//! ```
//!
//! All numbers in the binary section are little-endian; the CRC-32 covers the
//! time and both arrays of its frame. Fields are flattened row-major, axis 0 slowest.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lattice::GridSpec;
use crate::scheme::{PhysicsParams, SolverConfig};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "KGSP-SNAPSHOT";
const MAX_HEADER_LINE: usize = 1 << 20;
const MAX_HEADER_LINES: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("schema version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checksum mismatch in frame {frame}")]
    ChecksumMismatch { frame: usize },
    #[error("malformed snapshot: {0}")]
    Malformed(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// State modification applied at a sample time, used to build runs with a
/// known defect (for testing the detectors).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    /// `phi_k += amplitude * (-1)^k` along axis 0.
    Alternating { time: f64, amplitude: f64 },
    /// `phi += amplitude * cos(2 pi x)` along axis 0.
    Mode { time: f64, amplitude: f64 },
}

impl Perturbation {
    pub fn time(&self) -> f64 {
        match *self {
            Perturbation::Alternating { time, .. } | Perturbation::Mode { time, .. } => time,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub grid: GridSpec<f64>,
    pub physics: PhysicsParams<f64>,
    pub solver: SolverConfig<f64>,
    pub initial_amplitude: f64,
    pub snapshot_cadence: f64,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<Perturbation>,
}

/// Step counts derived from a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_sample: u64,
    pub samples: u64,
}

fn integer_ratio(num: f64, den: f64) -> Option<u64> {
    let r = num / den;
    let n = r.round();
    if n >= 0.0 && (r - n).abs() <= 1e-9 * n.max(1.0) {
        Some(n as u64)
    } else {
        None
    }
}

impl RunManifest {
    /// Checks the physics and solver settings and that the time step divides
    /// the cadence and the cadence divides `t_end`.
    pub fn schedule(&self) -> Result<Schedule, StoreError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(StoreError::VersionMismatch { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        self.physics.validate().map_err(|e| StoreError::InvalidManifest(e.to_string()))?;
        self.solver.validate().map_err(|e| StoreError::InvalidManifest(e.to_string()))?;
        if !(self.snapshot_cadence > 0.0) {
            return Err(StoreError::InvalidManifest("snapshot cadence must be positive".into()));
        }
        if !(self.t_end >= 0.0) {
            return Err(StoreError::InvalidManifest("t_end must be non-negative".into()));
        }
        let steps_per_sample =
            integer_ratio(self.snapshot_cadence, self.grid.dt()).filter(|&s| s > 0).ok_or_else(|| {
                StoreError::InvalidManifest(format!(
                    "time step {} does not divide the snapshot cadence {}",
                    self.grid.dt(),
                    self.snapshot_cadence
                ))
            })?;
        let samples = integer_ratio(self.t_end, self.snapshot_cadence).ok_or_else(|| {
            StoreError::InvalidManifest(format!(
                "snapshot cadence {} does not divide t_end {}",
                self.snapshot_cadence, self.t_end
            ))
        })?;
        Ok(Schedule { steps_per_sample, samples })
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// File name used for this run inside an output directory.
    pub fn file_name(&self) -> String {
        format!("run-{}.kgs", &self.hash()[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed { time: f64, reason: String },
}

impl RunStatus {
    pub fn failure_time(&self) -> Option<f64> {
        match self {
            RunStatus::Completed => None,
            RunStatus::Failed { time, .. } => Some(*time),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    pub manifest: RunManifest,
    pub frames: Vec<Frame>,
    pub status: RunStatus,
}

impl SnapshotSeries {
    pub fn new(manifest: RunManifest) -> Self {
        Self { manifest, frames: Vec::new(), status: RunStatus::Completed }
    }

    /// Appends a frame; times must increase and array lengths match the grid.
    pub fn push(&mut self, frame: Frame) -> Result<(), StoreError> {
        let n = self.manifest.grid.len();
        if frame.phi.len() != n || frame.psi.len() != n {
            return Err(StoreError::Malformed(format!("frame arrays must have {n} values")));
        }
        if let Some(last) = self.frames.last() {
            if !(frame.time > last.time) {
                return Err(StoreError::Malformed(format!("frame time {} does not follow {}", frame.time, last.time)));
            }
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Frame recorded at exactly `time`, if any.
    pub fn frame_at(&self, time: f64) -> Option<&Frame> {
        self.frames.binary_search_by(|f| f.time.total_cmp(&time)).ok().map(|i| &self.frames[i])
    }
}

fn frame_bytes(points: usize) -> u64 {
    8 + 16 * points as u64 + 4
}

/// Writes `series` to `path` atomically (temporary file, then rename).
pub fn write_series(path: &Path, series: &SnapshotSeries) -> Result<(), StoreError> {
    let tmp = temp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_series_to(&mut w, series)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn write_series_to<W: Write>(w: &mut W, series: &SnapshotSeries) -> Result<(), StoreError> {
    let points = series.manifest.grid.len();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "schema_version={}", series.manifest.schema_version)?;
    writeln!(w, "manifest={}", serde_json::to_string(&series.manifest)?)?;
    writeln!(w, "status={}", serde_json::to_string(&series.status)?)?;
    writeln!(w, "points={points}")?;
    writeln!(w, "frames={}", series.frames.len())?;
    writeln!(w)?;
    let mut buf = Vec::with_capacity(frame_bytes(points) as usize);
    for frame in &series.frames {
        if frame.phi.len() != points || frame.psi.len() != points {
            return Err(StoreError::Malformed(format!("frame arrays must have {points} values")));
        }
        buf.clear();
        buf.extend_from_slice(&frame.time.to_le_bytes());
        for v in frame.phi.iter().chain(&frame.psi) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Header {
    schema_version: u32,
    manifest: RunManifest,
    status: RunStatus,
    points: usize,
    frames: usize,
    bytes: u64,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header, StoreError> {
    let mut lines = Vec::new();
    let mut bytes = 0u64;
    loop {
        if lines.len() > MAX_HEADER_LINES {
            return Err(StoreError::Malformed("header too long".into()));
        }
        let mut line = Vec::new();
        let n = r.by_ref().take(MAX_HEADER_LINE as u64).read_until(b'\n', &mut line)?;
        bytes += n as u64;
        if n == 0 {
            return Err(StoreError::Malformed("unterminated header".into()));
        }
        if line.last() != Some(&b'\n') {
            return Err(StoreError::Malformed("header line too long or unterminated".into()));
        }
        line.pop();
        let text = String::from_utf8(line).map_err(|_| StoreError::Malformed("header is not UTF-8".into()))?;
        if text.is_empty() {
            break;
        }
        lines.push(text);
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(StoreError::Malformed("missing snapshot magic".into()));
    }
    let field = |key: &str| -> Result<&str, StoreError> {
        lines[1..]
            .iter()
            .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
            .ok_or_else(|| StoreError::Malformed(format!("missing header key {key}")))
    };
    let parse_int = |key: &str| -> Result<u64, StoreError> {
        field(key)?.trim().parse().map_err(|_| StoreError::Malformed(format!("bad integer for {key}")))
    };
    let schema_version = parse_int("schema_version")? as u32;
    if schema_version != SCHEMA_VERSION {
        return Err(StoreError::VersionMismatch { found: schema_version, expected: SCHEMA_VERSION });
    }
    let manifest: RunManifest = serde_json::from_str(field("manifest")?)?;
    let status: RunStatus = serde_json::from_str(field("status")?)?;
    let points = parse_int("points")? as usize;
    let frames = parse_int("frames")? as usize;
    if points != manifest.grid.len() {
        return Err(StoreError::Malformed(format!(
            "header declares {points} points but the manifest grid has {}",
            manifest.grid.len()
        )));
    }
    Ok(Header { schema_version, manifest, status, points, frames, bytes })
}

/// Reads a snapshot file, validating sizes against the file length before
/// allocating any frame storage.
pub fn read_series(path: &Path) -> Result<SnapshotSeries, StoreError> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    let expected = (header.frames as u64)
        .checked_mul(frame_bytes(header.points))
        .ok_or_else(|| StoreError::Malformed("declared sizes overflow".into()))?;
    let found = len.saturating_sub(header.bytes);
    if found < expected {
        return Err(StoreError::Truncated { expected, found });
    }
    if found > expected {
        return Err(StoreError::Malformed(format!("{} trailing bytes after the last frame", found - expected)));
    }
    read_frames(&mut r, header)
}

/// Reads a snapshot from an arbitrary stream (sizes are checked frame by frame).
pub fn read_series_from<R: Read>(r: R) -> Result<SnapshotSeries, StoreError> {
    let mut r = BufReader::new(r);
    let header = read_header(&mut r)?;
    read_frames(&mut r, header)
}

fn read_frames<R: Read>(r: &mut R, header: Header) -> Result<SnapshotSeries, StoreError> {
    debug_assert_eq!(header.schema_version, SCHEMA_VERSION);
    let points = header.points;
    let frame_len = frame_bytes(points) as usize;
    let mut series = SnapshotSeries { manifest: header.manifest, frames: Vec::new(), status: header.status };
    let mut buf = vec![0u8; frame_len];
    for index in 0..header.frames {
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                StoreError::Truncated {
                    expected: (header.frames * frame_len) as u64,
                    found: (index * frame_len) as u64,
                }
            } else {
                StoreError::Io(e)
            }
        })?;
        let body = &buf[..frame_len - 4];
        let stored = u32::from_le_bytes(buf[frame_len - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(StoreError::ChecksumMismatch { frame: index });
        }
        let value = |i: usize| f64::from_le_bytes(body[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        let frame = Frame {
            time: value(0),
            phi: (1..=points).map(value).collect(),
            psi: (points + 1..=2 * points).map(value).collect(),
        };
        series.push(frame)?;
    }
    Ok(series)
}

/// Writes `time,node,x,phi,psi` rows, `x` being the axis-0 coordinate.
/// Values use the shortest representation that round-trips exactly.
pub fn export_csv<W: Write>(series: &SnapshotSeries, w: &mut W) -> Result<(), StoreError> {
    let grid = &series.manifest.grid;
    let inner: usize = grid.points()[1..].iter().product();
    writeln!(w, "time,node,x,phi,psi")?;
    for frame in &series.frames {
        for (node, (phi, psi)) in frame.phi.iter().zip(&frame.psi).enumerate() {
            let x = grid.coordinate(0, node / inner);
            writeln!(w, "{:?},{},{:?},{:?},{:?}", frame.time, node, x, phi, psi)?;
        }
    }
    Ok(())
}
