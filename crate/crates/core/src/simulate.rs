//! Multi-speaker mixture simulation: each speaker alternates exponential
//! silences of mean β with log-normal utterances, and the timelines are
//! overlaid.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{self, FeatureChunk, FeatureError, StftConfig, SyntheticSpeakerSpec, SAMPLE_RATE};
use crate::io::{self, IoError, ManifestEntry};
use crate::pipeline::{Annotation, Turn};
use crate::scoring::{overlap_stats, OverlapStats};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation spec: {0}")]
    Spec(String),
    #[error("speaker inventory exhausted: {0}")]
    InventoryExhausted(String),
    #[error("output paths overlap: {0} and {1}")]
    OverlappingOutputs(PathBuf, PathBuf),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

/// Log-normal utterance durations, parameterized by median and log-space spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceLength {
    pub median_s: f64,
    pub sigma: f64,
}

impl Default for UtteranceLength {
    fn default() -> Self {
        UtteranceLength {
            median_s: 2.0,
            sigma: 0.5,
        }
    }
}

/// A speaker backed by real recordings, consumed front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct WavSpeaker {
    pub name: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inventory {
    Synthetic(SyntheticSpeakerSpec),
    WavPool(Vec<WavSpeaker>),
}

impl Inventory {
    pub fn speaker_names(&self) -> Vec<String> {
        match self {
            Inventory::Synthetic(s) => s.speakers.iter().map(|g| g.name.clone()).collect(),
            Inventory::WavPool(p) => p.iter().map(|w| w.name.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Inventory::Synthetic(s) => s.speakers.len(),
            Inventory::WavPool(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits into two inventories with no speaker in common; the second gets
    /// `second` speakers taken from the end.
    pub fn split(&self, second: usize) -> Result<(Inventory, Inventory)> {
        if second == 0 || second >= self.len() {
            return Err(SimulationError::Spec(format!(
                "cannot move {second} of {} speakers into a disjoint split",
                self.len()
            )));
        }
        let cut = self.len() - second;
        Ok(match self {
            Inventory::Synthetic(s) => {
                let mut a = s.clone();
                let mut b = s.clone();
                a.speakers.truncate(cut);
                b.speakers.drain(..cut);
                (Inventory::Synthetic(a), Inventory::Synthetic(b))
            }
            Inventory::WavPool(p) => (
                Inventory::WavPool(p[..cut].to_vec()),
                Inventory::WavPool(p[cut..].to_vec()),
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub num_speakers: usize,
    /// Mean silence gap in seconds.
    pub beta: f64,
    pub utterance: UtteranceLength,
    pub duration_s: f64,
    pub num_mixtures: usize,
    pub inventory: Inventory,
    pub seed: u64,
    /// Frame shift of the synthetic feature chunks.
    pub frame_shift_s: f64,
    pub id_prefix: String,
}

impl SimulationSpec {
    pub fn synthetic(inventory: SyntheticSpeakerSpec, beta: f64, num_mixtures: usize, seed: u64) -> Self {
        SimulationSpec {
            num_speakers: 2,
            beta,
            utterance: UtteranceLength::default(),
            duration_s: 10.0,
            num_mixtures,
            inventory: Inventory::Synthetic(inventory),
            seed,
            frame_shift_s: features::FRAME_SHIFT_S,
            id_prefix: "mix".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimulationError::Spec(m.into()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.num_speakers == 0 {
            return bad("num_speakers must be at least 1");
        }
        if !(self.duration_s > 0.0 && self.frame_shift_s > 0.0) {
            return bad("duration and frame shift must be positive");
        }
        if !(self.utterance.median_s > 0.0 && self.utterance.sigma >= 0.0) {
            return bad("utterance median must be positive and sigma non-negative");
        }
        if self.inventory.is_empty() {
            return Err(SimulationError::InventoryExhausted("inventory is empty".into()));
        }
        Ok(())
    }

    pub fn mixture_id(&self, index: usize) -> String {
        format!("{}{:05}", self.id_prefix, index)
    }

    /// Independent stream per mixture, derived from the corpus seed.
    pub fn mixture_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// What the generator drew, for checking the annotation against it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerativeTrace {
    /// Per speaker, every silence gap drawn (seconds).
    pub gaps: Vec<Vec<f64>>,
    /// Per speaker, every utterance placed `(start, end)`, end clipped to the mixture.
    pub utterances: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub annotation: Annotation,
    pub features: FeatureChunk,
    /// Mixed waveform in WAV-pool mode.
    pub audio: Option<Vec<f64>>,
    pub trace: GenerativeTrace,
}

/// Alternates silence and speech for one speaker until `duration_s`.
pub fn speaker_timeline<R: rand::Rng + ?Sized>(
    beta: f64,
    utterance: UtteranceLength,
    duration_s: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let gap = Exp::new(1.0 / beta).expect("beta > 0");
    let len = LogNormal::new(utterance.median_s.ln(), utterance.sigma).expect("valid log-normal");
    let (mut gaps, mut utts) = (Vec::new(), Vec::new());
    let mut t = 0.0;
    loop {
        let g: f64 = gap.sample(rng);
        gaps.push(g);
        t += g;
        if t >= duration_s {
            break;
        }
        let u: f64 = len.sample(rng);
        let end = (t + u).min(duration_s);
        utts.push((t, end));
        t += u;
        if t >= duration_s {
            break;
        }
    }
    (gaps, utts)
}

/// Generates mixture `index` of `spec`.
pub fn simulate_mixture(spec: &SimulationSpec, index: usize) -> Result<Mixture> {
    spec.validate()?;
    let mut rng = spec.mixture_rng(index);
    let names = spec.inventory.speaker_names();
    if names.len() < spec.num_speakers {
        return Err(SimulationError::InventoryExhausted(format!(
            "{} speakers per mixture but only {} in the inventory",
            spec.num_speakers,
            names.len()
        )));
    }
    let mut chosen = sample(&mut rng, names.len(), spec.num_speakers).into_vec();
    chosen.sort_unstable();

    let id = spec.mixture_id(index);
    let mut annotation = Annotation::new(id.clone());
    let mut trace = GenerativeTrace::default();
    for &s in &chosen {
        let (gaps, utts) = speaker_timeline(spec.beta, spec.utterance, spec.duration_s, &mut rng);
        for &(a, b) in &utts {
            annotation.turns.push(Turn::new(names[s].clone(), a, b));
        }
        trace.gaps.push(gaps);
        trace.utterances.push(utts);
    }
    let feature_seed = rand::Rng::next_u64(&mut rng);

    match &spec.inventory {
        Inventory::Synthetic(gen) => {
            let frames = (spec.duration_s / spec.frame_shift_s).round() as usize;
            let features = features::synthetic_features(gen, &annotation, frames, spec.frame_shift_s, feature_seed)?;
            Ok(Mixture {
                annotation,
                features,
                audio: None,
                trace,
            })
        }
        Inventory::WavPool(pool) => {
            let total = (spec.duration_s * SAMPLE_RATE as f64).round() as usize;
            let mut mix = vec![0.0; total];
            for (k, &s) in chosen.iter().enumerate() {
                let source = load_pool(&pool[s])?;
                let mut cursor = 0;
                for &(a, b) in &trace.utterances[k] {
                    let (from, to) = (
                        (a * SAMPLE_RATE as f64) as usize,
                        ((b * SAMPLE_RATE as f64) as usize).min(total),
                    );
                    let need = to.saturating_sub(from);
                    if cursor + need > source.len() {
                        return Err(SimulationError::InventoryExhausted(format!(
                            "speaker {} has {:.2} s of audio, mixture {id} needs more",
                            pool[s].name,
                            source.len() as f64 / SAMPLE_RATE as f64
                        )));
                    }
                    for (m, x) in mix[from..to].iter_mut().zip(&source[cursor..cursor + need]) {
                        *m += x;
                    }
                    cursor += need;
                }
            }
            let matrix = features::stft_features(
                &mix,
                &StftConfig {
                    log_compress: true,
                    ..Default::default()
                },
            )?;
            let features = FeatureChunk::new(matrix, features::FRAME_SHIFT_S, id);
            Ok(Mixture {
                annotation,
                features,
                audio: Some(mix),
                trace,
            })
        }
    }
}

fn load_pool(speaker: &WavSpeaker) -> Result<Vec<f64>> {
    let mut all = Vec::new();
    for f in &speaker.files {
        all.extend(features::read_wav(f)?);
    }
    Ok(all)
}

/// What `build_corpus` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub manifest: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub stats: OverlapStats,
    pub speakers: BTreeSet<String>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const STATS_NAME: &str = "stats.txt";

pub fn format_stats(stats: &OverlapStats, mixtures: usize) -> String {
    format!(
        "mixtures = {mixtures}\nt_spk_ge1 = {:.3}\nt_spk_ge2 = {:.3}\noverlap_ratio = {:.4}\n",
        stats.t_spk_ge1, stats.t_spk_ge2, stats.overlap_ratio
    )
}

/// Generates every mixture (in parallel) and writes features, one RTTM per
/// mixture, the manifest and overlap statistics under `out_dir`.
pub fn build_corpus(spec: &SimulationSpec, out_dir: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io::io_err(out_dir))?;
    let results: Vec<Result<(ManifestEntry, OverlapStats, Vec<String>)>> = (0..spec.num_mixtures)
        .into_par_iter()
        .map(|i| {
            let m = simulate_mixture(spec, i)?;
            let id = m.annotation.recording.clone();
            let feat_name = format!("{id}.feat");
            let rttm_name = format!("{id}.rttm");
            let f = &m.features;
            let blob = io::encode_features(f.freq_bins(), f.frames(), f.frame_shift_s, f.matrix.data());
            io::write_atomic(&out_dir.join(&feat_name), &blob)?;
            let canon = io::canonicalize(&m.annotation);
            io::write_rttm([&canon], &out_dir.join(&rttm_name))?;
            Ok((
                ManifestEntry {
                    id,
                    features: PathBuf::from(feat_name),
                    rttm: PathBuf::from(rttm_name),
                    duration: spec.duration_s,
                },
                overlap_stats(&canon),
                canon.speakers(),
            ))
        })
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut parts = Vec::with_capacity(results.len());
    let mut speakers = BTreeSet::new();
    for r in results {
        let (e, s, spk) = r?;
        entries.push(e);
        parts.push(s);
        speakers.extend(spk);
    }
    let stats = OverlapStats::combine(&parts);
    let manifest = out_dir.join(MANIFEST_NAME);
    io::write_atomic(&manifest, io::format_manifest(&entries).as_bytes())?;
    io::write_atomic(
        &out_dir.join(STATS_NAME),
        format_stats(&stats, entries.len()).as_bytes(),
    )?;
    Ok(CorpusSummary {
        manifest,
        entries,
        stats,
        speakers,
    })
}

fn nested(a: &Path, b: &Path) -> bool {
    a.starts_with(b) || b.starts_with(a)
}

/// Train and dev corpora whose speakers are disjoint: the last `dev_speakers`
/// of the inventory are reserved for dev.
pub fn build_split(
    spec: &SimulationSpec,
    dev_mixtures: usize,
    dev_speakers: usize,
    train_dir: &Path,
    dev_dir: &Path,
) -> Result<(CorpusSummary, CorpusSummary)> {
    if nested(train_dir, dev_dir) {
        return Err(SimulationError::OverlappingOutputs(
            train_dir.to_path_buf(),
            dev_dir.to_path_buf(),
        ));
    }
    let (train_inv, dev_inv) = spec.inventory.split(dev_speakers)?;
    let train_spec = SimulationSpec {
        inventory: train_inv,
        ..spec.clone()
    };
    let dev_spec = SimulationSpec {
        inventory: dev_inv,
        num_mixtures: dev_mixtures,
        seed: spec.seed ^ 0xD5A6_1266_F0C9_392C,
        id_prefix: format!("{}dev", spec.id_prefix),
        ..spec.clone()
    };
    let train = build_corpus(&train_spec, train_dir)?;
    let dev = build_corpus(&dev_spec, dev_dir)?;
    if let Some(s) = train.speakers.intersection(&dev.speakers).next() {
        return Err(SimulationError::Spec(format!("speaker {s} appears in both splits")));
    }
    Ok((train, dev))
}
