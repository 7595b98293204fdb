//! Dataset representation, recording ingestion, and preprocessing.
//!
//! Raw recordings are per-subject point-cloud sequences (x, y, z in meters,
//! v in m/s). Preprocessing slides a window of `n_frames` frames with step
//! `step`, resamples every frame to exactly `n_points` points, and centers
//! each frame's feature columns — producing the fixed-shape labeled windows
//! the network trains on. Partitioning splits subjects into known/unknown
//! sets plus a calibration subject drawn from the unknowns.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FEATURES: usize = 4;

const MAGIC: &[u8; 4] = b"MMGT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: expected \"MMGT\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("parse error at byte {offset}: {what}")]
    Parse { offset: u64, what: String },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: u64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot resample an empty frame to {0} points")]
    EmptyFrame(usize),
    #[error("invalid partition request: {0}")]
    BadPartition(String),
}

/// One radar frame: a variable-length list of (x, y, z, v) points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFrame {
    pub points: Vec<[f64; FEATURES]>,
    pub timestamp_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    FreeWalk,
    Smartphone,
    HandsInPockets,
}

impl Modality {
    pub fn as_u8(self) -> u8 {
        match self {
            Modality::FreeWalk => 0,
            Modality::Smartphone => 1,
            Modality::HandsInPockets => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Modality> {
        match v {
            0 => Some(Modality::FreeWalk),
            1 => Some(Modality::Smartphone),
            2 => Some(Modality::HandsInPockets),
            _ => None,
        }
    }

    pub fn all() -> [Modality; 3] {
        [Modality::FreeWalk, Modality::Smartphone, Modality::HandsInPockets]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::FreeWalk => "free_walk",
            Modality::Smartphone => "smartphone",
            Modality::HandsInPockets => "hands_in_pockets",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "free_walk" => Some(Modality::FreeWalk),
            "smartphone" => Some(Modality::Smartphone),
            "hands_in_pockets" => Some(Modality::HandsInPockets),
            _ => None,
        }
    }
}

/// A contiguous recording of one subject under one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingSegment {
    pub subject_id: u32,
    pub modality: Modality,
    pub frame_rate_hz: f32,
    pub frames: Vec<PointFrame>,
}

/// A window of consecutive raw frames, still referencing its segment.
#[derive(Debug, Clone, Copy)]
pub struct RawWindow<'a> {
    pub frames: &'a [PointFrame],
    pub start_frame: usize,
}

/// Fixed-shape preprocessed window: `n_frames × n_points × 4`, each frame's
/// feature columns mean-centered.
#[derive(Debug, Clone)]
pub struct WindowedSequence {
    /// Row-major `[n_frames, n_points, 4]`.
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub n_points: usize,
    pub label: u32,
    pub modality: Modality,
    pub segment_id: u32,
    pub start_frame: u32,
}

impl WindowedSequence {
    pub fn at(&self, frame: usize, point: usize, feature: usize) -> f64 {
        self.data[(frame * self.n_points + point) * FEATURES + feature]
    }
}

/// Subject-level known/unknown split plus the calibration subject and the
/// window-level train/val/test index lists over the known windows (filled by
/// the training split).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub known: Vec<u32>,
    pub unknown: Vec<u32>,
    pub calibration_subject: u32,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

// ----- recording serialization ----------------------------------------------

struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

/// Parse a recording from the little-endian binary format:
/// magic "MMGT", version u32, subject_id u32, modality u8, frame_rate f32,
/// frame_count u32, then per frame a point_count u32 followed by
/// point_count × 4 × f32 (x, y, z, v).
pub fn load_recording(path: &Path) -> Result<RecordingSegment, DataError> {
    let file = File::open(path)?;
    let mut r = CountingReader { inner: BufReader::new(file), pos: 0 };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| DataError::BadMagic)?;
    if &magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let subject_id = r.read_u32::<LittleEndian>()?;
    let modality_byte = r.read_u8()?;
    let modality = Modality::from_u8(modality_byte).ok_or_else(|| DataError::Parse {
        offset: r.pos - 1,
        what: format!("unknown modality tag {}", modality_byte),
    })?;
    let frame_rate_hz = r.read_f32::<LittleEndian>()?;
    if !frame_rate_hz.is_finite() || frame_rate_hz <= 0.0 {
        return Err(DataError::Parse {
            offset: r.pos - 4,
            what: format!("invalid frame rate {}", frame_rate_hz),
        });
    }
    let frame_count = r.read_u32::<LittleEndian>()?;

    // Capacity hints are capped: counts come from the wire and a corrupt
    // value must fail with a parse error, not an allocation failure.
    let mut frames = Vec::with_capacity((frame_count as usize).min(1 << 16));
    for fi in 0..frame_count {
        let point_count = r.read_u32::<LittleEndian>().map_err(|e| truncated(&r, fi, e))?;
        let mut points = Vec::with_capacity((point_count as usize).min(1 << 16));
        for _ in 0..point_count {
            let mut p = [0.0f64; FEATURES];
            for c in p.iter_mut() {
                let v = r.read_f32::<LittleEndian>().map_err(|e| truncated(&r, fi, e))?;
                if !v.is_finite() {
                    return Err(DataError::NonFinite { offset: r.pos - 4 });
                }
                *c = v as f64;
            }
            points.push(p);
        }
        frames.push(PointFrame { points, timestamp_index: fi });
    }
    Ok(RecordingSegment { subject_id, modality, frame_rate_hz, frames })
}

fn truncated<R>(r: &CountingReader<R>, frame: u32, e: std::io::Error) -> DataError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        DataError::Parse { offset: r.pos, what: format!("truncated payload in frame {}", frame) }
    } else {
        DataError::Io(e)
    }
}

pub fn write_recording(path: &Path, seg: &RecordingSegment) -> Result<(), DataError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(seg.subject_id)?;
    w.write_u8(seg.modality.as_u8())?;
    w.write_f32::<LittleEndian>(seg.frame_rate_hz)?;
    w.write_u32::<LittleEndian>(seg.frames.len() as u32)?;
    for frame in &seg.frames {
        w.write_u32::<LittleEndian>(frame.points.len() as u32)?;
        for p in &frame.points {
            for &c in p {
                w.write_f32::<LittleEndian>(c as f32)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse the CSV interchange format (columns: frame,x,y,z,v; header row
/// optional). Frame indices may skip values; skipped frames become empty.
pub fn load_recording_csv(
    path: &Path,
    subject_id: u32,
    modality: Modality,
    frame_rate_hz: f32,
) -> Result<RecordingSegment, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)?;
    let mut rows: Vec<(u32, [f64; FEATURES])> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(DataError::Parse {
                offset: i as u64,
                what: format!("expected 5 columns (frame,x,y,z,v), got {}", rec.len()),
            });
        }
        // Tolerate a single header line.
        if i == 0 && rec[0].parse::<u32>().is_err() {
            continue;
        }
        let parse = |field: &str, what: &str| -> Result<f64, DataError> {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                offset: i as u64,
                what: format!("bad {} value {:?} in row {}", what, field, i + 1),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { offset: i as u64 });
            }
            Ok(v)
        };
        let frame: u32 = rec[0].trim().parse().map_err(|_| DataError::Parse {
            offset: i as u64,
            what: format!("bad frame index {:?} in row {}", &rec[0], i + 1),
        })?;
        rows.push((
            frame,
            [
                parse(&rec[1], "x")?,
                parse(&rec[2], "y")?,
                parse(&rec[3], "z")?,
                parse(&rec[4], "v")?,
            ],
        ));
    }
    let n_frames = rows.iter().map(|(f, _)| f + 1).max().unwrap_or(0);
    let mut frames: Vec<PointFrame> = (0..n_frames)
        .map(|fi| PointFrame { points: Vec::new(), timestamp_index: fi })
        .collect();
    for (fi, p) in rows {
        frames[fi as usize].points.push(p);
    }
    Ok(RecordingSegment { subject_id, modality, frame_rate_hz, frames })
}

// ----- preprocessing ---------------------------------------------------------

/// Enumerate windows starting at frames 0, s, 2s, ... with start + n_f ≤ L.
pub fn window_segment(seg: &RecordingSegment, n_frames: usize, step: usize) -> Vec<RawWindow<'_>> {
    assert!(n_frames >= 1, "window_segment: n_frames must be >= 1");
    assert!(step >= 1, "window_segment: step must be >= 1");
    let l = seg.frames.len();
    if l < n_frames {
        return Vec::new();
    }
    (0..=(l - n_frames))
        .step_by(step)
        .map(|start| RawWindow { frames: &seg.frames[start..start + n_frames], start_frame: start })
        .collect()
}

/// Force a frame to exactly `n_points` points: uniformly subsample excess
/// points, or keep every original and pad with uniformly drawn duplicates.
pub fn resample_frame(
    frame: &PointFrame,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<PointFrame, DataError> {
    let n = frame.points.len();
    if n == n_points {
        return Ok(frame.clone());
    }
    if n == 0 {
        return Err(DataError::EmptyFrame(n_points));
    }
    let points = if n > n_points {
        // Uniform subset, kept in original order.
        let mut idx = rand::seq::index::sample(rng, n, n_points).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| frame.points[i]).collect()
    } else {
        let mut pts = frame.points.clone();
        for _ in n..n_points {
            pts.push(frame.points[rng.gen_range(0..n)]);
        }
        pts
    };
    Ok(PointFrame { points, timestamp_index: frame.timestamp_index })
}

/// Subtract each frame's per-feature mean in place. The trailing velocity
/// column participates unless `center_velocity` is false.
pub fn center_frames(data: &mut [f64], n_frames: usize, n_points: usize, center_velocity: bool) {
    let cols = if center_velocity { FEATURES } else { FEATURES - 1 };
    for f in 0..n_frames {
        let base = f * n_points * FEATURES;
        for c in 0..cols {
            let mut mean = 0.0;
            for p in 0..n_points {
                mean += data[base + p * FEATURES + c];
            }
            mean /= n_points as f64;
            for p in 0..n_points {
                data[base + p * FEATURES + c] -= mean;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub n_frames: usize,
    pub n_points: usize,
    pub step: usize,
    pub center_velocity: bool,
    pub seed: u64,
}

/// Windows from one segment: slide, drop windows containing empty frames,
/// resample every frame to `n_points`, center per frame. Returns the windows
/// and the dropped-window count (logged by callers).
pub fn windows_from_segment(
    seg: &RecordingSegment,
    segment_id: u32,
    cfg: &PreprocessConfig,
) -> Result<(Vec<WindowedSequence>, usize), DataError> {
    let raw = window_segment(seg, cfg.n_frames, cfg.step);
    let mut out = Vec::with_capacity(raw.len());
    let mut dropped = 0usize;
    for w in raw {
        if w.frames.iter().any(|f| f.points.is_empty()) {
            dropped += 1;
            continue;
        }
        // Per-window RNG keyed by segment and start frame, so a window's
        // resampling never depends on how many windows preceded it.
        let mut rng = crate::seeds::rng_for_indexed(
            cfg.seed,
            "resample",
            ((segment_id as u64) << 32) | w.start_frame as u64,
        );
        let mut data = Vec::with_capacity(cfg.n_frames * cfg.n_points * FEATURES);
        for frame in w.frames {
            let rs = resample_frame(frame, cfg.n_points, &mut rng)?;
            for p in &rs.points {
                data.extend_from_slice(p);
            }
        }
        center_frames(&mut data, cfg.n_frames, cfg.n_points, cfg.center_velocity);
        out.push(WindowedSequence {
            data,
            n_frames: cfg.n_frames,
            n_points: cfg.n_points,
            label: seg.subject_id,
            modality: seg.modality,
            segment_id,
            start_frame: w.start_frame as u32,
        });
    }
    Ok((out, dropped))
}

// ----- partitioning ----------------------------------------------------------

/// Uniformly random known/unknown subject split with a calibration subject
/// drawn from the unknowns; deterministic for a fixed seed.
pub fn make_partition(
    subjects: &[u32],
    n_unknown: usize,
    seed: u64,
) -> Result<DatasetPartition, DataError> {
    let mut ids: Vec<u32> = subjects.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != subjects.len() {
        return Err(DataError::BadPartition("duplicate subject ids".into()));
    }
    if n_unknown < 1 || n_unknown > ids.len().saturating_sub(1) {
        return Err(DataError::BadPartition(format!(
            "need 1 <= n_unknown <= {} for {} subjects, got {}",
            ids.len().saturating_sub(1),
            ids.len(),
            n_unknown
        )));
    }
    let mut rng = crate::seeds::rng_for(seed, "partition");
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut rng);
    let mut unknown: Vec<u32> = shuffled[..n_unknown].to_vec();
    let mut known: Vec<u32> = shuffled[n_unknown..].to_vec();
    let calibration_subject = unknown[rng.gen_range(0..unknown.len())];
    known.sort_unstable();
    unknown.sort_unstable();
    Ok(DatasetPartition {
        known,
        unknown,
        calibration_subject,
        train_idx: Vec::new(),
        val_idx: Vec::new(),
        test_idx: Vec::new(),
        seed,
    })
}
