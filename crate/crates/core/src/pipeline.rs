//! Turning per-chunk proposals into a recording-level diarization hypothesis:
//! score thresholding, K-means over embeddings, per-cluster NMS, merging.

use std::collections::BTreeSet;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::Interval;
use crate::io::canonicalize;
use crate::proposals::{nms, ProposalSet};

/// One speaker turn; the interval is in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub speaker: String,
    pub interval: Interval,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, start: f64, end: f64) -> Self {
        Turn {
            speaker: speaker.into(),
            interval: Interval { start, end },
        }
    }
}

/// Speaker turns of one recording, used for both references and hypotheses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub recording: String,
    pub turns: Vec<Turn>,
}

impl Annotation {
    pub fn new(recording: impl Into<String>) -> Self {
        Annotation {
            recording: recording.into(),
            turns: Vec::new(),
        }
    }

    pub fn with_turns(recording: impl Into<String>, turns: Vec<Turn>) -> Self {
        Annotation {
            recording: recording.into(),
            turns,
        }
    }

    pub fn push(&mut self, speaker: impl Into<String>, start: f64, end: f64) {
        self.turns.push(Turn::new(speaker, start, end));
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Distinct speaker labels, sorted.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.turns.iter().map(|t| t.speaker.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers().len()
    }

    /// Latest turn end, 0 when empty.
    pub fn end(&self) -> f64 {
        self.turns.iter().map(|t| t.interval.end).fold(0.0, f64::max)
    }

    pub fn canonical(&self) -> Annotation {
        canonicalize(self)
    }

    /// Turns restricted to `[start, end)` seconds and re-based to `start`.
    pub fn window(&self, start: f64, end: f64) -> Annotation {
        let win = Interval { start, end };
        let turns = self
            .turns
            .iter()
            .filter_map(|t| {
                t.interval.intersect(&win).map(|iv| Turn {
                    speaker: t.speaker.clone(),
                    interval: iv.shifted(-start),
                })
            })
            .collect();
        Annotation {
            recording: self.recording.clone(),
            turns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NumSpeakers {
    Fixed(usize),
    /// Elbow estimate capped at `k_max`.
    Auto {
        k_max: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 5,
            max_iter: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    /// Proposals scoring below this are dropped.
    pub gamma: f64,
    pub nms_threshold: f64,
    pub num_speakers: NumSpeakers,
    pub kmeans: KMeansConfig,
    /// Scale each embedding to unit length before clustering.
    pub length_norm: bool,
    /// Relative WCSS reduction below which `Auto` stops adding clusters.
    pub elbow_factor: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            gamma: 0.5,
            nms_threshold: 0.3,
            num_speakers: NumSpeakers::Fixed(2),
            kmeans: KMeansConfig::default(),
            length_norm: true,
            elbow_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutput {
    pub annotation: Annotation,
    /// Kept turns before same-speaker merging: (cluster, interval in seconds).
    pub kept: Vec<(usize, Interval)>,
    pub clusters: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PostprocessError {
    #[error("proposal {index} of chunk {chunk} survives the threshold but has no embedding")]
    MissingEmbedding { chunk: usize, index: usize },
    #[error("embedding dimension mismatch: {0} vs {1}")]
    EmbeddingDim(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Score threshold, global clustering, per-cluster NMS, and merge.
///
/// `chunks` hold chunk-relative frame intervals with `chunk_origin` set;
/// `frame_shift_s` converts frames to seconds.
pub fn postprocess(
    recording: &str,
    chunks: &[ProposalSet],
    frame_shift_s: f64,
    cfg: &PostprocessConfig,
) -> Result<PostprocessOutput, PostprocessError> {
    if !(0.0..=1.0).contains(&cfg.gamma) || !(0.0..=1.0).contains(&cfg.nms_threshold) {
        return Err(PostprocessError::Config(format!(
            "gamma {} and nms_threshold {} must lie in [0, 1]",
            cfg.gamma, cfg.nms_threshold
        )));
    }
    let mut intervals = Vec::new();
    let mut scores = Vec::new();
    let mut embeddings: Vec<Vec<f64>> = Vec::new();
    for (c, set) in chunks.iter().enumerate() {
        for i in 0..set.len() {
            if set.scores[i] < cfg.gamma {
                continue;
            }
            let emb = set
                .embeddings
                .as_ref()
                .and_then(|e| e.get(i))
                .ok_or(PostprocessError::MissingEmbedding { chunk: c, index: i })?;
            if let Some(first) = embeddings.first() {
                if first.len() != emb.len() {
                    return Err(PostprocessError::EmbeddingDim(first.len(), emb.len()));
                }
            }
            intervals.push(set.intervals[i].shifted(set.chunk_origin));
            scores.push(set.scores[i]);
            let mut emb = emb.clone();
            if cfg.length_norm {
                let norm = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    emb.iter_mut().for_each(|x| *x /= norm);
                }
            }
            embeddings.push(emb);
        }
    }
    let mut warnings = Vec::new();
    if intervals.is_empty() {
        return Ok(PostprocessOutput {
            annotation: Annotation::new(recording),
            kept: vec![],
            clusters: 0,
            warnings,
        });
    }
    let mut k = match cfg.num_speakers {
        NumSpeakers::Fixed(k) => k.max(1),
        NumSpeakers::Auto { k_max } => estimate_num_speakers(&embeddings, k_max, cfg.elbow_factor, &cfg.kmeans),
    };
    if k > intervals.len() {
        warnings.push(format!(
            "{recording}: {k} clusters requested but only {} proposals survive; using {}",
            intervals.len(),
            intervals.len()
        ));
        k = intervals.len();
    }
    let km = kmeans(&embeddings, k, &cfg.kmeans);
    if km.k < k {
        warnings.push(format!(
            "{recording}: only {} distinct embeddings; using k = {}",
            km.k, km.k
        ));
    }

    let mut kept = Vec::new();
    let mut ann = Annotation::new(recording);
    for cluster in 0..km.k {
        let members: Vec<usize> = (0..intervals.len()).filter(|&i| km.labels[i] == cluster).collect();
        let ivs: Vec<Interval> = members.iter().map(|&i| intervals[i]).collect();
        let sc: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
        for local in nms(&ivs, &sc, cfg.nms_threshold) {
            let secs = ivs[local].scaled(frame_shift_s);
            kept.push((cluster, secs));
            ann.turns.push(Turn {
                speaker: format!("spk{cluster}"),
                interval: secs,
            });
        }
    }
    Ok(PostprocessOutput {
        annotation: canonicalize(&ann),
        kept,
        clusters: km.k,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// K-means

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster per row, numbered by first appearance.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// Effective cluster count (may be below the request for duplicate rows).
    pub k: usize,
    /// WCSS after every Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_rows(rows: &[Vec<f64>], cap: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for r in rows {
        if !seen.iter().any(|s| *s == r) {
            seen.push(r);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(row, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(rows: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let dim = rows[0].len();
    let mut labels = vec![usize::MAX; rows.len()];
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut wcss = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let (c, d) = nearest(r, &centroids);
            wcss += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        trace.push(wcss);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        for (c, cen) in centroids.iter_mut().enumerate() {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                *cen = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let final_wcss: f64 = rows.iter().zip(&labels).map(|(r, &l)| sq_dist(r, &centroids[l])).sum();
    if trace.last() != Some(&final_wcss) {
        trace.push(final_wcss);
    }
    (labels, centroids, trace)
}

/// Lloyd's algorithm with farthest-point seeding (first seed random), best of
/// `restarts` by within-cluster sum of squares.
pub fn kmeans(rows: &[Vec<f64>], k: usize, cfg: &KMeansConfig) -> KMeansResult {
    assert!(!rows.is_empty(), "kmeans needs at least one row");
    let k = k.clamp(1, rows.len()).min(distinct_rows(rows, k));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let first = rng.random_range(0..rows.len());
        let mut centroids = vec![rows[first].clone()];
        let mut min_d: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
        while centroids.len() < k {
            let far = (0..rows.len()).fold(0, |b, i| if min_d[i] > min_d[b] { i } else { b });
            centroids.push(rows[far].clone());
            for (i, r) in rows.iter().enumerate() {
                min_d[i] = min_d[i].min(sq_dist(r, &centroids[centroids.len() - 1]));
            }
        }
        let run = lloyd(rows, centroids, cfg.max_iter);
        let better = match &best {
            None => true,
            Some(b) => run.2.last() < b.2.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (labels, centroids, trace) = best.expect("at least one restart");
    // renumber by first appearance
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in &labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    let mut ordered = vec![Vec::new(); next];
    for (old, &new) in map.iter().enumerate() {
        if new != usize::MAX {
            ordered[new] = centroids[old].clone();
        }
    }
    KMeansResult {
        labels: labels.iter().map(|&l| map[l]).collect(),
        wcss: *trace.last().unwrap_or(&0.0),
        centroids: ordered,
        k: next,
        trace,
    }
}

/// Picks the `k ≤ k_max` whose step from `k - 1` clusters gives the largest
/// relative WCSS drop, provided that drop is at least `elbow_factor`;
/// otherwise 1. Outside the oracle-count evaluation setting.
pub fn estimate_num_speakers(rows: &[Vec<f64>], k_max: usize, elbow_factor: f64, cfg: &KMeansConfig) -> usize {
    let k_max = k_max.clamp(1, rows.len().max(1));
    if rows.len() < 2 {
        return 1;
    }
    let mut prev = kmeans(rows, 1, cfg).wcss;
    let (mut best_k, mut best_drop) = (1, 0.0);
    for k in 2..=k_max {
        if prev <= 0.0 {
            break;
        }
        let next = kmeans(rows, k, cfg).wcss;
        let drop = 1.0 - next / prev;
        if drop >= elbow_factor && drop > best_drop {
            best_k = k;
            best_drop = drop;
        }
        prev = next;
    }
    best_k
}
