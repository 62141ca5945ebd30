//! Feature files and corpus manifests.
//!
//! Feature files (`.dsf`) are a 16-byte header followed by a row-major
//! little-endian `f32` matrix:
//!
//! | offset | size | field                |
//! |--------|------|----------------------|
//! | 0      | 4    | magic `DSF1`         |
//! | 4      | 4    | `u32` frame count T  |
//! | 8      | 4    | `u32` bin count F    |
//! | 12     | 4    | `u32` frame rate     |
//!
//! Manifests are JSON lines; relative paths resolve against the manifest's
//! directory.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

pub const FEATURE_MAGIC: &[u8; 4] = b"DSF1";
pub const FEATURE_HEADER_LEN: usize = 16;

pub fn encode_features(f: &FeatureSequence) -> Vec<u8> {
    let (t, n) = f.values.dim();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * t * n);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&f.frame_rate.to_le_bytes());
    for v in f.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    if bytes.len() < FEATURE_HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing DSF1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, n, rate) = (word(4), word(8), word(12) as u32);
    let body = &bytes[FEATURE_HEADER_LEN..];
    if body.len() != 4 * t * n {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", 4 * t * n, body.len())));
    }
    let data: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let values = Array2::from_shape_vec((t, n), data).map_err(|e| Error::format(path, e.to_string()))?;
    FeatureSequence::new(values, rate).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_features(path: &Path, f: &FeatureSequence) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut fh| fh.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// One utterance in a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    pub speaker_id: String,
    /// Recording session (chapter).
    pub session_id: String,
    /// Environment or emotion label.
    pub style_id: String,
    pub duration_s: f64,
    /// Optional split tag: `train`, `test`, `unseen_speaker` or `unseen_style`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: PathBuf) -> Self {
        Manifest { records, base_dir }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let fh = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(fh).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            records.push(rec);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { records, base_dir })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let fh = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(fh);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("manifest record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolve_features(&self, r: &ManifestRecord) -> Result<PathBuf> {
        r.feature_path
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Validation(format!("{} has no feature_path", r.utterance_id)))
    }

    pub fn resolve_audio(&self, r: &ManifestRecord) -> Result<PathBuf> {
        r.audio_path
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Validation(format!("{} has no audio_path", r.utterance_id)))
    }

    pub fn load_features(&self, r: &ManifestRecord) -> Result<FeatureSequence> {
        read_features(&self.resolve_features(r)?)
    }

    /// Rejects duplicate ids, records without any path, and dangling paths.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation("manifest is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut problems = Vec::new();
        for r in &self.records {
            if !seen.insert(r.utterance_id.as_str()) {
                problems.push(format!("duplicate utterance_id {}", r.utterance_id));
            }
            if r.audio_path.is_none() && r.feature_path.is_none() {
                problems.push(format!("{} has neither audio_path nor feature_path", r.utterance_id));
            }
            for p in [&r.audio_path, &r.feature_path].into_iter().flatten() {
                if !self.resolve(p).is_file() {
                    problems.push(format!("{}: missing file {p}", r.utterance_id));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        self.records.iter().map(|r| r.speaker_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn filter_split(&self, split: &str) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| r.split.as_deref() == Some(split)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Records tagged `train`, or every record when no split tags exist.
    pub fn training_records(&self) -> Manifest {
        if self.records.iter().any(|r| r.split.is_some()) {
            self.filter_split("train")
        } else {
            self.clone()
        }
    }
}
