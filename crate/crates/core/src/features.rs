//! Magnitude STFT features from 8 kHz PCM, fixed-length chunking, and
//! synthetic Gaussian "speakers" for desk-scale experiments.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::pipeline::Annotation;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 8000;
pub const FRAME_SIZE: usize = 512;
pub const FRAME_SHIFT: usize = 80;
/// Seconds per feature frame at the reference configuration.
pub const FRAME_SHIFT_S: f64 = FRAME_SHIFT as f64 / SAMPLE_RATE as f64;
pub const CHUNK_FRAMES: usize = 1000;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio has {len} samples, fewer than one {frame_size}-sample frame")]
    TooShort { len: usize, frame_size: usize },
    #[error("frame size {frame_size} must be >= frame shift {frame_shift} > 0")]
    BadFraming { frame_size: usize, frame_shift: usize },
    #[error("speaker {0:?} is not defined by the synthetic speaker spec")]
    UnknownSpeaker(String),
    #[error("{path}: {msg}")]
    Wav { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Where a chunk sits in its recording.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChunkOrigin {
    pub recording: String,
    pub start_frame: usize,
}

/// `[freq_bins, frames]` non-negative feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureChunk {
    pub matrix: Tensor,
    pub frame_shift_s: f64,
    pub origin: ChunkOrigin,
    /// Frames holding real data; the rest is zero padding.
    pub valid_frames: usize,
}

impl FeatureChunk {
    pub fn new(matrix: Tensor, frame_shift_s: f64, recording: impl Into<String>) -> Self {
        let valid_frames = matrix.shape()[1];
        FeatureChunk {
            matrix,
            frame_shift_s,
            origin: ChunkOrigin {
                recording: recording.into(),
                start_frame: 0,
            },
            valid_frames,
        }
    }

    pub fn freq_bins(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn duration_s(&self) -> f64 {
        self.valid_frames as f64 * self.frame_shift_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub frame_size: usize,
    pub frame_shift: usize,
    /// Apply `ln(1 + |X|)` instead of plain magnitudes.
    pub log_compress: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_size: FRAME_SIZE,
            frame_shift: FRAME_SHIFT,
            log_compress: false,
        }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of frames produced for `len` samples: one per hop start inside the
/// signal, the tail zero-padded so the last frame is complete.
pub fn num_frames(len: usize, frame_shift: usize) -> usize {
    len.div_ceil(frame_shift)
}

/// Magnitude spectra of Hann-windowed frames, `frame_size/2 + 1` bins each.
pub fn stft_features(samples: &[f64], cfg: &StftConfig) -> Result<Tensor> {
    let (n, hop) = (cfg.frame_size, cfg.frame_shift);
    if hop == 0 || n < hop {
        return Err(FeatureError::BadFraming {
            frame_size: n,
            frame_shift: hop,
        });
    }
    if samples.len() < n {
        return Err(FeatureError::TooShort {
            len: samples.len(),
            frame_size: n,
        });
    }
    let frames = num_frames(samples.len(), hop);
    let bins = n / 2 + 1;
    let window = hann(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = vec![0.0; bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = samples.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let m = buf[k].norm();
            out[k * frames + f] = if cfg.log_compress { m.ln_1p() } else { m };
        }
    }
    Ok(Tensor::new(vec![bins, frames], out).expect("shape matches"))
}

/// Splits `[freq, frames]` features into `chunk_frames`-wide windows every
/// `hop_frames`. The last chunk is zero-padded and records its valid length.
pub fn chunk_recording(features: &FeatureChunk, chunk_frames: usize, hop_frames: usize) -> Vec<FeatureChunk> {
    assert!(chunk_frames > 0 && hop_frames > 0, "chunk and hop must be positive");
    let (bins, total) = (features.freq_bins(), features.frames());
    let src = features.matrix.data();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let valid = chunk_frames.min(total.saturating_sub(start));
        let mut data = vec![0.0; bins * chunk_frames];
        for b in 0..bins {
            let from = &src[b * total + start..b * total + start + valid];
            data[b * chunk_frames..b * chunk_frames + valid].copy_from_slice(from);
        }
        out.push(FeatureChunk {
            matrix: Tensor::new(vec![bins, chunk_frames], data).expect("shape matches"),
            frame_shift_s: features.frame_shift_s,
            origin: ChunkOrigin {
                recording: features.origin.recording.clone(),
                start_frame: features.origin.start_frame + start,
            },
            valid_frames: valid,
        });
        if start + chunk_frames >= total {
            break;
        }
        start += hop_frames;
    }
    out
}

// ---------------------------------------------------------------------------
// WAV

/// Reads 16-bit mono 8 kHz PCM into `[-1, 1)` floats.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let err = |msg: String| FeatureError::Wav {
        path: path.display().to_string(),
        msg,
    };
    let reader = hound::WavReader::open(path).map_err(|e| err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(err(format!(
            "{} channels; only mono is supported, sum the channels into one before feature extraction",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(err("only 16-bit signed PCM is supported".into()));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(err(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| err(e.to_string())))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let err = |msg: String| FeatureError::Wav {
        path: path.display().to_string(),
        msg,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| err(e.to_string()))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(v).map_err(|e| err(e.to_string()))?;
    }
    w.finalize().map_err(|e| err(e.to_string()))
}

// ---------------------------------------------------------------------------
// synthetic speakers

/// Isotropic Gaussian feature generator for one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerGenerator {
    pub name: String,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeakerSpec {
    pub dims: usize,
    /// Scale of the half-normal background present in every frame.
    pub noise_level: f64,
    pub speakers: Vec<SpeakerGenerator>,
}

impl SyntheticSpeakerSpec {
    /// `count` speakers named `{prefix}{i}` whose means are
    /// `energy + separation·z` (clipped at zero), `z ~ N(0, I)`.
    pub fn random(prefix: &str, count: usize, dims: usize, separation: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let speakers = (0..count)
            .map(|i| SpeakerGenerator {
                name: format!("{prefix}{i}"),
                mean: (0..dims)
                    .map(|_| (1.0 + separation * normal.sample(&mut rng)).max(0.0))
                    .collect(),
                std: 0.3,
            })
            .collect();
        SyntheticSpeakerSpec {
            dims,
            noise_level: 0.3,
            speakers,
        }
    }

    pub fn find(&self, name: &str) -> Option<(usize, &SpeakerGenerator)> {
        self.speakers.iter().enumerate().find(|(_, s)| s.name == name)
    }
}

/// Seed of the independent stream behind one component: 0 is the noise floor,
/// `1 + i` is speaker `i` of the spec.
fn component_seed(seed: u64, component: u64) -> u64 {
    seed ^ component.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-frame activity of `name` in `annotation` (frame centre inside a turn).
pub fn activity(annotation: &Annotation, name: &str, frames: usize, frame_shift_s: f64) -> Vec<bool> {
    let mut act = vec![false; frames];
    for t in annotation.turns.iter().filter(|t| t.speaker == name) {
        for (f, a) in act.iter_mut().enumerate() {
            let c = (f as f64 + 0.5) * frame_shift_s;
            if c >= t.interval.start && c < t.interval.end {
                *a = true;
            }
        }
    }
    act
}

/// Additive pieces of a synthetic chunk: noise floor, then one matrix per
/// speaker of the annotation (zero where that speaker is silent).
pub fn synthetic_components(
    spec: &SyntheticSpeakerSpec,
    annotation: &Annotation,
    frames: usize,
    frame_shift_s: f64,
    seed: u64,
) -> Result<(Tensor, Vec<(String, Tensor)>)> {
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(component_seed(seed, 0));
    let noise_dist = Normal::new(0.0, spec.noise_level.max(0.0)).expect("valid normal");
    let noise = Tensor::from_fn(&[dims, frames], |_| noise_dist.sample(&mut rng).abs());

    let mut parts = Vec::new();
    for name in annotation.speakers() {
        let (idx, gen) = spec
            .find(&name)
            .ok_or_else(|| FeatureError::UnknownSpeaker(name.clone()))?;
        let act = activity(annotation, &name, frames, frame_shift_s);
        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(seed, 1 + idx as u64));
        let dist = Normal::new(0.0, gen.std).expect("valid normal");
        // draw every frame so values do not depend on where the speaker is active
        let mut m = Tensor::zeros(&[dims, frames]);
        for f in 0..frames {
            for d in 0..dims {
                let v = (gen.mean[d] + dist.sample(&mut rng)).max(0.0);
                if act[f] {
                    m.data_mut()[d * frames + f] = v;
                }
            }
        }
        parts.push((name, m));
    }
    Ok((noise, parts))
}

/// Sum of the noise floor and every active speaker's generator output.
pub fn synthetic_features(
    spec: &SyntheticSpeakerSpec,
    annotation: &Annotation,
    frames: usize,
    frame_shift_s: f64,
    seed: u64,
) -> Result<FeatureChunk> {
    let (mut total, parts) = synthetic_components(spec, annotation, frames, frame_shift_s, seed)?;
    for (_, p) in &parts {
        total.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
    }
    Ok(FeatureChunk::new(total, frame_shift_s, annotation.recording.clone()))
}
