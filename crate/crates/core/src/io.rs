//! RTTM and manifest files, binary feature matrices, and annotation
//! canonicalisation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::anchors::Interval;
use crate::pipeline::{Annotation, Turn};

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// canonical form

/// Merges overlapping or touching same-speaker turns, drops empty ones, and
/// sorts by (start, speaker).
pub fn canonicalize(annotation: &Annotation) -> Annotation {
    let mut by_speaker: BTreeMap<&str, Vec<Interval>> = BTreeMap::new();
    for t in &annotation.turns {
        if t.interval.end > t.interval.start {
            by_speaker.entry(&t.speaker).or_default().push(t.interval);
        }
    }
    let mut turns = Vec::new();
    for (speaker, mut ivs) in by_speaker {
        ivs.sort_by(|a, b| a.start.total_cmp(&b.start));
        let mut cur = ivs[0];
        for iv in &ivs[1..] {
            if iv.start <= cur.end {
                cur.end = cur.end.max(iv.end);
            } else {
                turns.push(Turn {
                    speaker: speaker.to_owned(),
                    interval: cur,
                });
                cur = *iv;
            }
        }
        turns.push(Turn {
            speaker: speaker.to_owned(),
            interval: cur,
        });
    }
    turns.sort_by(|a, b| {
        a.interval
            .start
            .total_cmp(&b.interval.start)
            .then_with(|| a.speaker.cmp(&b.speaker))
    });
    Annotation {
        recording: annotation.recording.clone(),
        turns,
    }
}

// ---------------------------------------------------------------------------
// RTTM

/// Parses `SPEAKER <file> <chan> <tbeg> <tdur> <ortho> <stype> <name> <conf> <slat>`
/// lines. Other record types and blank lines are skipped.
pub fn parse_rttm(text: &str, path: &Path) -> Result<BTreeMap<String, Annotation>> {
    let mut out: BTreeMap<String, Annotation> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"SPEAKER") {
            continue;
        }
        let err = |msg: String| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad onset {:?}", fields[3])))?;
        let dur: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("bad duration {:?}", fields[4])))?;
        if !onset.is_finite() || !dur.is_finite() || onset < 0.0 {
            return Err(err(format!("invalid onset {onset}")));
        }
        if dur < 0.0 {
            return Err(err(format!("negative duration {dur}")));
        }
        let file = fields[1];
        out.entry(file.to_owned())
            .or_insert_with(|| Annotation::new(file))
            .turns
            .push(Turn::new(fields[7], onset, onset + dur));
    }
    Ok(out)
}

pub fn read_rttm(path: &Path) -> Result<BTreeMap<String, Annotation>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_rttm(&text, path)
}

/// One line per turn sorted by (file, onset, speaker); times printed with three
/// decimals, rounding exact ties to even.
pub fn format_rttm<'a>(annotations: impl IntoIterator<Item = &'a Annotation>) -> String {
    let mut rows: Vec<(&str, f64, &str, f64)> = Vec::new();
    for ann in annotations {
        for t in &ann.turns {
            rows.push((&ann.recording, t.interval.start, &t.speaker, t.interval.length()));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(b.2)));
    let mut s = String::new();
    for (file, onset, spk, dur) in rows {
        let _ = writeln!(s, "SPEAKER {file} 1 {onset:.3} {dur:.3} <NA> <NA> {spk} <NA> <NA>");
    }
    s
}

pub fn write_rttm<'a>(annotations: impl IntoIterator<Item = &'a Annotation>, path: &Path) -> Result<()> {
    write_atomic(path, format_rttm(annotations).as_bytes())
}

// ---------------------------------------------------------------------------
// manifests

/// One mixture: `id \t feature path \t rttm path \t duration seconds`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub rttm: PathBuf,
    pub duration: f64,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.3}",
            e.id,
            e.features.display(),
            e.rttm.display(),
            e.duration
        );
    }
    s
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        if f.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let duration: f64 = f[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad duration {:?}", f[3])))?;
        out.push(ManifestEntry {
            id: f[0].to_owned(),
            features: base.join(f[1]),
            rttm: base.join(f[2]),
            duration,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// feature matrices

const FEAT_MAGIC: &[u8; 8] = b"RPNSDFT1";

/// Binary `[freq, frames]` matrix: magic, u32 rows, u32 cols, f64 frame shift,
/// then row-major little-endian f64 values.
pub fn encode_features(rows: usize, cols: usize, frame_shift_s: f64, data: &[f64]) -> Vec<u8> {
    let mut b = Vec::with_capacity(24 + data.len() * 8);
    b.extend_from_slice(FEAT_MAGIC);
    b.extend_from_slice(&(rows as u32).to_le_bytes());
    b.extend_from_slice(&(cols as u32).to_le_bytes());
    b.extend_from_slice(&frame_shift_s.to_le_bytes());
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

/// Inverse of [`encode_features`]: `(rows, cols, frame_shift_s, data)`.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<(usize, usize, f64, Vec<f64>)> {
    let bad = |msg: &str| IoError::Format {
        path: path.to_path_buf(),
        msg: msg.to_owned(),
    };
    if bytes.len() < 24 || &bytes[..8] != FEAT_MAGIC {
        return Err(bad("not a feature file (bad magic)"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let shift = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = &bytes[24..];
    if body.len() != rows * cols * 8 {
        return Err(bad("truncated feature matrix"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, shift, data))
}
