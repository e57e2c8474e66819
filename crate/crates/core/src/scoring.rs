//! Diarization error rate on a fixed time grid, with reference-boundary
//! collars, optional exclusion of overlapped reference speech, and a global
//! one-to-one speaker mapping. Also overlap statistics by interval sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::pipeline::Annotation;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("{0}: no reference speech left to score")]
    EmptyReference(String),
    #[error("invalid scoring configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    /// Seconds excluded on each side of every reference turn boundary.
    pub collar_s: f64,
    pub score_overlap: bool,
    pub frame_step_s: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            collar_s: 0.0,
            score_overlap: true,
            frame_step_s: 0.001,
        }
    }
}

impl ScoringConfig {
    pub fn with_collar(collar_s: f64, score_overlap: bool) -> Self {
        ScoringConfig {
            collar_s,
            score_overlap,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), ScoringError> {
        if !(self.frame_step_s > 0.0) || !self.collar_s.is_finite() || self.collar_s < 0.0 {
            return Err(ScoringError::Config(format!(
                "collar {} must be >= 0 and frame step {} > 0",
                self.collar_s, self.frame_step_s
            )));
        }
        let ratio = self.collar_s / self.frame_step_s;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(ScoringError::Config(format!(
                "frame step {} does not divide collar {}",
                self.frame_step_s, self.collar_s
            )));
        }
        Ok(())
    }
}

/// Error components as fractions of scored reference speaker time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerReport {
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    /// Speech/non-speech errors as fractions of scored reference speech time.
    pub sad_miss: f64,
    pub sad_false_alarm: f64,
    /// Scored reference speaker time in seconds (the DER denominator).
    pub scored_time: f64,
    /// Scored time with at least one reference speaker, seconds.
    pub scored_speech: f64,
}

/// Raw accumulated seconds, summable across recordings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerTotals {
    pub ref_time: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub speech: f64,
    pub sad_miss: f64,
    pub sad_false_alarm: f64,
}

impl DerTotals {
    pub fn add(&mut self, o: &DerTotals) {
        self.ref_time += o.ref_time;
        self.miss += o.miss;
        self.false_alarm += o.false_alarm;
        self.confusion += o.confusion;
        self.speech += o.speech;
        self.sad_miss += o.sad_miss;
        self.sad_false_alarm += o.sad_false_alarm;
    }

    pub fn report(&self) -> DerReport {
        let r = self.ref_time.max(f64::MIN_POSITIVE);
        let s = self.speech.max(f64::MIN_POSITIVE);
        let (miss, fa, cf) = (self.miss / r, self.false_alarm / r, self.confusion / r);
        DerReport {
            der: miss + fa + cf,
            miss,
            false_alarm: fa,
            confusion: cf,
            sad_miss: self.sad_miss / s,
            sad_false_alarm: self.sad_false_alarm / s,
            scored_time: self.ref_time,
            scored_speech: self.speech,
        }
    }
}

/// First frame whose centre is at or after `t`.
fn frame_at(t: f64, step: f64) -> i64 {
    (t / step - 0.5).ceil() as i64
}

/// Speaker activity on the frame grid as half-open frame ranges per speaker.
struct Grid {
    speakers: Vec<String>,
    ranges: Vec<Vec<(i64, i64)>>,
}

fn to_grid(ann: &Annotation, step: f64) -> Grid {
    let canon = ann.canonical();
    let mut map: BTreeMap<String, Vec<(i64, i64)>> = BTreeMap::new();
    for t in &canon.turns {
        let (a, b) = (frame_at(t.interval.start, step), frame_at(t.interval.end, step));
        if b > a {
            map.entry(t.speaker.clone()).or_default().push((a, b));
        }
    }
    let (speakers, ranges) = map.into_iter().unzip();
    Grid { speakers, ranges }
}

/// Scoring mask as sorted disjoint excluded frame ranges.
fn collar_ranges(ann: &Annotation, collar: f64, step: f64) -> Vec<(i64, i64)> {
    if collar <= 0.0 {
        return vec![];
    }
    let mut out: Vec<(i64, i64)> = Vec::new();
    for t in &ann.canonical().turns {
        for b in [t.interval.start, t.interval.end] {
            out.push((frame_at(b - collar, step), frame_at(b + collar, step)));
        }
    }
    out.sort_unstable();
    let mut merged: Vec<(i64, i64)> = Vec::new();
    for r in out {
        match merged.last_mut() {
            Some(last) if r.0 <= last.1 => last.1 = last.1.max(r.1),
            _ => merged.push(r),
        }
    }
    merged
}

/// Piecewise-constant activity: breakpoints and, per piece, the lists of
/// active reference and hypothesis speakers plus collar exclusion.
struct Sweep {
    pieces: Vec<(i64, i64, Vec<usize>, Vec<usize>, bool)>,
}

fn sweep(refg: &Grid, hypg: &Grid, excluded: &[(i64, i64)]) -> Sweep {
    let mut cuts: Vec<i64> = vec![0];
    for g in [refg, hypg] {
        for rs in &g.ranges {
            for &(a, b) in rs {
                cuts.push(a.max(0));
                cuts.push(b.max(0));
            }
        }
    }
    for &(a, b) in excluded {
        cuts.push(a.max(0));
        cuts.push(b.max(0));
    }
    cuts.sort_unstable();
    cuts.dedup();
    let active = |g: &Grid, a: i64| -> Vec<usize> {
        (0..g.ranges.len())
            .filter(|&s| g.ranges[s].iter().any(|&(x, y)| x <= a && a < y))
            .collect()
    };
    let mut pieces = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let skip = excluded.iter().any(|&(x, y)| x <= a && a < y);
        pieces.push((a, b, active(refg, a), active(hypg, a), skip));
    }
    Sweep { pieces }
}

fn scored_pieces<'a>(sw: &'a Sweep, score_overlap: bool) -> impl Iterator<Item = (f64, &'a [usize], &'a [usize])> + 'a {
    sw.pieces.iter().filter_map(move |(a, b, r, h, skip)| {
        if *skip || (!score_overlap && r.len() >= 2) {
            None
        } else {
            Some(((b - a) as f64, r.as_slice(), h.as_slice()))
        }
    })
}

/// Maximum-weight one-to-one assignment on a rectangular matrix.
/// Returns, for each row, the assigned column (if any).
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    // square cost matrix for the Hungarian method (minimisation)
    let n = rows.max(cols);
    let max = weights.iter().flatten().cloned().fold(0.0, f64::max);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            max - weights[i][j]
        } else {
            max
        }
    };
    // e-maxx style O(n^3) with potentials; 1-based internally
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols && weights[i - 1][j - 1] > 0.0 {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Hypothesis speaker → reference speaker, maximising jointly attributed time.
/// Computed over the whole recording without collars.
pub fn optimal_speaker_map(reference: &Annotation, hypothesis: &Annotation) -> BTreeMap<String, String> {
    let step = ScoringConfig::default().frame_step_s;
    let (refg, hypg) = (to_grid(reference, step), to_grid(hypothesis, step));
    let sw = sweep(&refg, &hypg, &[]);
    let overlap = overlap_matrix(&sw, refg.speakers.len(), hypg.speakers.len(), true);
    let assign = max_weight_assignment(&transpose(&overlap));
    let mut out = BTreeMap::new();
    for (h, r) in assign.iter().enumerate() {
        if let Some(r) = r {
            out.insert(hypg.speakers[h].clone(), refg.speakers[*r].clone());
        }
    }
    out
}

fn overlap_matrix(sw: &Sweep, nref: usize, nhyp: usize, score_overlap: bool) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; nhyp]; nref];
    for (len, r, h) in scored_pieces(sw, score_overlap) {
        for &ri in r {
            for &hi in h {
                m[ri][hi] += len;
            }
        }
    }
    m
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, |r| r.len());
    (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Accumulated error seconds for one recording.
pub fn der_totals(
    reference: &Annotation,
    hypothesis: &Annotation,
    cfg: &ScoringConfig,
) -> Result<DerTotals, ScoringError> {
    cfg.validate()?;
    let step = cfg.frame_step_s;
    let refg = to_grid(reference, step);
    let hypg = to_grid(hypothesis, step);
    let excluded = collar_ranges(reference, cfg.collar_s, step);
    let sw = sweep(&refg, &hypg, &excluded);

    let overlap = overlap_matrix(&sw, refg.speakers.len(), hypg.speakers.len(), cfg.score_overlap);
    // ref speaker index → mapped hyp speaker index
    let ref_to_hyp = max_weight_assignment(&overlap);

    let mut t = DerTotals::default();
    for (len, r, h) in scored_pieces(&sw, cfg.score_overlap) {
        let (nr, nh) = (r.len() as f64, h.len() as f64);
        let correct = r
            .iter()
            .filter(|&&ri| ref_to_hyp[ri].is_some_and(|hi| h.contains(&hi)))
            .count() as f64;
        t.ref_time += nr * len;
        t.miss += (nr - nh).max(0.0) * len;
        t.false_alarm += (nh - nr).max(0.0) * len;
        t.confusion += (nr.min(nh) - correct) * len;
        if nr > 0.0 {
            t.speech += len;
            if nh == 0.0 {
                t.sad_miss += len;
            }
        } else if nh > 0.0 {
            t.sad_false_alarm += len;
        }
    }
    for v in [
        &mut t.ref_time,
        &mut t.miss,
        &mut t.false_alarm,
        &mut t.confusion,
        &mut t.speech,
        &mut t.sad_miss,
        &mut t.sad_false_alarm,
    ] {
        *v *= step;
    }
    if t.ref_time <= 0.0 {
        return Err(ScoringError::EmptyReference(reference.recording.clone()));
    }
    Ok(t)
}

pub fn der(reference: &Annotation, hypothesis: &Annotation, cfg: &ScoringConfig) -> Result<DerReport, ScoringError> {
    Ok(der_totals(reference, hypothesis, cfg)?.report())
}

/// Per-recording reports plus the time-weighted corpus total.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub recordings: Vec<(String, DerReport)>,
    pub total: DerReport,
}

/// Scores every reference recording against its hypothesis (missing → empty).
pub fn score_corpus(
    references: &BTreeMap<String, Annotation>,
    hypotheses: &BTreeMap<String, Annotation>,
    cfg: &ScoringConfig,
) -> Result<CorpusReport, ScoringError> {
    let mut totals = DerTotals::default();
    let mut recordings = Vec::new();
    for (id, r) in references {
        let empty = Annotation::new(id.clone());
        let h = hypotheses.get(id).unwrap_or(&empty);
        let t = der_totals(r, h, cfg)?;
        totals.add(&t);
        recordings.push((id.clone(), t.report()));
    }
    Ok(CorpusReport {
        recordings,
        total: totals.report(),
    })
}

impl CorpusReport {
    /// Aligned percentage table: DER then MI/FA/CF, then SAD MI/FA.
    pub fn table(&self) -> String {
        let width = self
            .recordings
            .iter()
            .map(|(id, _)| id.len())
            .chain([8])
            .max()
            .unwrap_or(8);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$} {:>7} {:>6} {:>6} {:>6} {:>7} {:>7} {:>9}",
            "recording", "DER", "MI", "FA", "CF", "SAD-MI", "SAD-FA", "scored(s)"
        );
        let row = |s: &mut String, id: &str, r: &DerReport| {
            let _ = writeln!(
                s,
                "{:<width$} {:>7.2} {:>6.2} {:>6.2} {:>6.2} {:>7.2} {:>7.2} {:>9.2}",
                id,
                100.0 * r.der,
                100.0 * r.miss,
                100.0 * r.false_alarm,
                100.0 * r.confusion,
                100.0 * r.sad_miss,
                100.0 * r.sad_false_alarm,
                r.scored_time
            );
        };
        for (id, r) in &self.recordings {
            row(&mut s, id, r);
        }
        row(&mut s, "TOTAL", &self.total);
        s
    }

    /// `key=value` lines for the corpus total, fractions not percentages.
    pub fn key_values(&self) -> String {
        let t = &self.total;
        format!(
            "der={:.6}\nmiss={:.6}\nfalse_alarm={:.6}\nconfusion={:.6}\nsad_miss={:.6}\nsad_false_alarm={:.6}\nscored_time={:.3}\n",
            t.der, t.miss, t.false_alarm, t.confusion, t.sad_miss, t.sad_false_alarm, t.scored_time
        )
    }
}

// ---------------------------------------------------------------------------
// overlap statistics

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverlapStats {
    /// Seconds with at least one active speaker.
    pub t_spk_ge1: f64,
    /// Seconds with at least two active speakers.
    pub t_spk_ge2: f64,
    pub overlap_ratio: f64,
}

impl OverlapStats {
    pub fn from_times(t1: f64, t2: f64) -> Self {
        OverlapStats {
            t_spk_ge1: t1,
            t_spk_ge2: t2,
            overlap_ratio: if t1 > 0.0 { t2 / t1 } else { 0.0 },
        }
    }

    pub fn combine(parts: &[OverlapStats]) -> Self {
        let t1 = parts.iter().map(|p| p.t_spk_ge1).sum();
        let t2 = parts.iter().map(|p| p.t_spk_ge2).sum();
        Self::from_times(t1, t2)
    }
}

/// Exact event sweep over canonical turns.
pub fn overlap_stats(reference: &Annotation) -> OverlapStats {
    let canon = reference.canonical();
    let mut events: Vec<(f64, i32)> = Vec::with_capacity(2 * canon.turns.len());
    for t in &canon.turns {
        events.push((t.interval.start, 1));
        events.push((t.interval.end, -1));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut t1, mut t2) = (0.0, 0.0);
    let mut active = 0;
    let mut prev = 0.0;
    for (time, delta) in events {
        let span = time - prev;
        if active >= 1 {
            t1 += span;
        }
        if active >= 2 {
            t2 += span;
        }
        active += delta;
        prev = time;
    }
    OverlapStats::from_times(t1, t2)
}
