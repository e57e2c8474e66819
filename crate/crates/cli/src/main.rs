//! `rpnsd`: corpus simulation, training, adaptation, inference and scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use rpnsd::features::{self, chunk_recording, FeatureChunk, StftConfig, SyntheticSpeakerSpec};
use rpnsd::io::{self, ManifestEntry};
use rpnsd::model::{ModelConfig, TrainExample, Trainer, ADAPT_LR};
use rpnsd::pipeline::{Annotation, NumSpeakers, PostprocessConfig};
use rpnsd::scoring::{overlap_stats, score_corpus, OverlapStats, ScoringConfig};
use rpnsd::simulate::{self, Inventory, SimulationSpec, UtteranceLength, WavSpeaker};
use rpnsd::tensor::Tensor;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "rpnsd", version, about = "Speaker diarization with segment proposals")]
struct Cli {
    /// Worker threads for per-recording work.
    #[arg(long, global = true, env = "RPNSD_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated mixture corpus.
    Simulate(SimulateArgs),
    /// Train a model from a feature manifest.
    Train(TrainArgs),
    /// Adapt a trained model to a new speaker set.
    Adapt(AdaptArgs),
    /// Diarize recordings and write a hypothesis RTTM.
    Infer(InferArgs),
    /// Score a hypothesis RTTM against a reference.
    Score(ScoreArgs),
    /// Overlap statistics of an RTTM.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Mean silence gap between one speaker's utterances, seconds.
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 10)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Size of the synthetic speaker inventory.
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 2)]
    speakers_per_mixture: usize,
    /// Feature dimensions of synthetic speakers.
    #[arg(long, default_value_t = 32)]
    dims: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 2.0)]
    utt_median: f64,
    #[arg(long, default_value_t = 0.5)]
    utt_sigma: f64,
    /// Also write a dev split with this many mixtures and disjoint speakers.
    #[arg(long)]
    dev_num: Option<usize>,
    /// Speakers reserved for the dev split.
    #[arg(long, default_value_t = 4)]
    dev_speakers: usize,
    /// Tab-separated `speaker<TAB>wav path` lines; switches to audio mixing.
    #[arg(long)]
    wav_pool: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// `key = value` model config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = ADAPT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature manifest (its RTTM column feeds `--num-speakers oracle`).
    #[arg(long, conflicts_with = "wav")]
    manifest: Option<PathBuf>,
    /// 8 kHz mono WAV files; the recording id is the file stem.
    #[arg(long, num_args = 1..)]
    wav: Vec<PathBuf>,
    /// Hypothesis RTTM to write.
    #[arg(long)]
    out: PathBuf,
    /// `oracle`, a fixed count, or `auto`.
    #[arg(long, default_value = "oracle", value_parser = parse_num_speakers)]
    num_speakers: SpeakerCount,
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0.3)]
    nms: f64,
    /// Cluster raw embeddings instead of unit-length ones.
    #[arg(long)]
    raw_embeddings: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    /// Forgiveness collar around reference boundaries, seconds.
    #[arg(long, default_value_t = 0.0)]
    collar: f64,
    /// Score overlapped speech too.
    #[arg(long)]
    score_overlap: bool,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    rttm: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SpeakerCount {
    Oracle,
    Fixed(usize),
    Auto,
}

fn parse_num_speakers(s: &str) -> std::result::Result<SpeakerCount, String> {
    match s {
        "oracle" => Ok(SpeakerCount::Oracle),
        "auto" => Ok(SpeakerCount::Auto),
        _ => match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(SpeakerCount::Fixed(k)),
            _ => Err(format!("expected oracle, auto or a positive count, got {s:?}")),
        },
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes()).map_err(data)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// simulate

fn read_wav_pool(path: &Path) -> Result<Vec<WavSpeaker>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pool: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (spk, wav) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Data(format!("{}:{}: expected speaker<TAB>path", path.display(), n + 1)))?;
        pool.entry(spk.trim().to_owned())
            .or_default()
            .push(base.join(wav.trim()));
    }
    Ok(pool
        .into_iter()
        .map(|(name, files)| WavSpeaker { name, files })
        .collect())
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let inventory = match &a.wav_pool {
        Some(p) => Inventory::WavPool(read_wav_pool(p)?),
        None => Inventory::Synthetic(SyntheticSpeakerSpec::random(
            "spk",
            a.speakers,
            a.dims,
            a.separation,
            a.seed,
        )),
    };
    let spec = SimulationSpec {
        num_speakers: a.speakers_per_mixture,
        beta: a.beta,
        utterance: UtteranceLength {
            median_s: a.utt_median,
            sigma: a.utt_sigma,
        },
        duration_s: a.duration,
        num_mixtures: a.num,
        inventory,
        seed: a.seed,
        frame_shift_s: features::FRAME_SHIFT_S,
        id_prefix: "mix".into(),
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(&a.out)?;
    let mut echo = String::new();
    let _ = writeln!(echo, "beta = {}", a.beta);
    let _ = writeln!(echo, "dev_num = {}", a.dev_num.map_or("none".into(), |n| n.to_string()));
    let _ = writeln!(echo, "dev_speakers = {}", a.dev_speakers);
    let _ = writeln!(echo, "dims = {}", a.dims);
    let _ = writeln!(echo, "duration = {}", a.duration);
    let _ = writeln!(echo, "num = {}", a.num);
    let _ = writeln!(echo, "seed = {}", a.seed);
    let _ = writeln!(echo, "separation = {}", a.separation);
    let _ = writeln!(echo, "speakers = {}", a.speakers);
    let _ = writeln!(echo, "speakers_per_mixture = {}", a.speakers_per_mixture);
    let _ = writeln!(echo, "utt_median = {}", a.utt_median);
    let _ = writeln!(echo, "utt_sigma = {}", a.utt_sigma);
    let _ = writeln!(
        echo,
        "wav_pool = {}",
        a.wav_pool.as_ref().map_or("none".into(), |p| p.display().to_string())
    );
    write_text(&a.out.join("simulate.conf"), &echo)?;
    match a.dev_num {
        None => {
            let s = simulate::build_corpus(&spec, &a.out).map_err(data)?;
            println!(
                "{} mixtures, overlap ratio {:.4}, manifest {}",
                s.entries.len(),
                s.stats.overlap_ratio,
                s.manifest.display()
            );
        }
        Some(dev) => {
            let (tr, dv) = simulate::build_split(&spec, dev, a.dev_speakers, &a.out.join("train"), &a.out.join("dev"))
                .map_err(data)?;
            println!(
                "train {} mixtures (overlap {:.4}), dev {} mixtures (overlap {:.4})",
                tr.entries.len(),
                tr.stats.overlap_ratio,
                dv.entries.len(),
                dv.stats.overlap_ratio
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train / adapt

struct Recording {
    features: FeatureChunk,
    reference: Option<Annotation>,
}

fn load_entry(e: &ManifestEntry, with_ref: bool) -> Result<Recording> {
    let bytes = std::fs::read(&e.features).map_err(|err| CliError::Data(format!("{}: {err}", e.features.display())))?;
    let (rows, cols, shift, values) = io::decode_features(&bytes, &e.features).map_err(data)?;
    let matrix = Tensor::new(vec![rows, cols], values).map_err(data)?;
    let features = FeatureChunk::new(matrix, shift, e.id.clone());
    let reference = if with_ref {
        let map = io::read_rttm(&e.rttm).map_err(data)?;
        Some(map.get(&e.id).cloned().unwrap_or_else(|| Annotation::new(e.id.clone())))
    } else {
        None
    };
    Ok(Recording { features, reference })
}

fn load_manifest(path: &Path, with_ref: bool) -> Result<(Vec<ManifestEntry>, Vec<Recording>)> {
    let entries = io::read_manifest(path).map_err(data)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("{}: manifest is empty", path.display())));
    }
    let recs = entries
        .par_iter()
        .map(|e| load_entry(e, with_ref))
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, recs))
}

fn speakers_of(recs: &[Recording]) -> Vec<String> {
    let set: BTreeSet<String> = recs
        .iter()
        .filter_map(|r| r.reference.as_ref())
        .flat_map(|a| a.speakers())
        .collect();
    set.into_iter().collect()
}

/// Model-sized chunks with chunk-relative truth.
fn examples(recs: &[Recording], frames: usize, speakers: &[String]) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for r in recs {
        let reference = r.reference.as_ref().expect("training recordings carry references");
        for c in chunk_recording(&r.features, frames, frames) {
            let start = c.origin.start_frame as f64 * c.frame_shift_s;
            let win = reference.window(start, start + c.valid_frames as f64 * c.frame_shift_s);
            out.push(TrainExample::new(c, &win, speakers).map_err(data)?);
        }
    }
    Ok(out)
}

fn run_training(trainer: &mut Trainer, ex: &[TrainExample], steps: u64, batch: usize, out: &Path) -> Result<()> {
    if batch == 0 {
        return Err(CliError::Usage("--batch must be positive".into()));
    }
    let mut log = String::from("step\trpn_cls\trpn_reg\trcnn_cls\trcnn_reg\tspk_cls\ttotal\n");
    let mut cursor = 0;
    for _ in 0..steps {
        let b: Vec<TrainExample> = (0..batch).map(|k| ex[(cursor + k) % ex.len()].clone()).collect();
        cursor = (cursor + batch) % ex.len();
        let bd = trainer.train_step(&b).map_err(data)?;
        let _ = writeln!(
            log,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            trainer.step,
            bd.rpn_cls,
            bd.rpn_reg,
            bd.rcnn_cls,
            bd.rcnn_reg,
            bd.spk_cls,
            bd.total()
        );
    }
    write_text(&out.join("loss.log"), &log)?;
    write_text(&out.join("config.txt"), &trainer.model.config.to_text())?;
    trainer.save(&out.join("model.ckpt")).map_err(data)?;
    println!(
        "{} steps, checkpoint {}",
        trainer.step,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            ModelConfig::from_text(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => ModelConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let (_, recs) = load_manifest(&a.manifest, true)?;
    cfg.speakers = speakers_of(&recs);
    cfg.freq_bins = recs[0].features.freq_bins();
    let ex = examples(&recs, cfg.frames, &cfg.speakers)?;
    let model = rpnsd::model::Model::new(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(&a.out)?;
    let mut trainer = Trainer::new(model);
    run_training(&mut trainer, &ex, a.steps, a.batch, &a.out)
}

fn adapt_cmd(a: &AdaptArgs) -> Result<()> {
    let base = Trainer::load(&a.checkpoint).map_err(data)?;
    let (_, recs) = load_manifest(&a.manifest, true)?;
    let speakers = speakers_of(&recs);
    if recs[0].features.freq_bins() != base.model.config.freq_bins {
        return Err(CliError::Data(format!(
            "features have {} bins, the checkpoint expects {}",
            recs[0].features.freq_bins(),
            base.model.config.freq_bins
        )));
    }
    let mut trainer = base.into_adaptation(speakers, a.lr, a.seed).map_err(data)?;
    let ex = examples(&recs, trainer.model.config.frames, &trainer.model.config.speakers)?;
    create_dir(&a.out)?;
    run_training(&mut trainer, &ex, a.steps, a.batch, &a.out)
}

// ---------------------------------------------------------------------------
// infer / score / stats

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let trainer = Trainer::load(&a.checkpoint).map_err(data)?;
    let model = &trainer.model;
    let recs: Vec<Recording> = match (&a.manifest, a.wav.is_empty()) {
        (Some(m), _) => load_manifest(m, a.num_speakers == SpeakerCount::Oracle)?.1,
        (None, false) => {
            if a.num_speakers == SpeakerCount::Oracle {
                return Err(CliError::Usage(
                    "--num-speakers oracle needs --manifest with reference RTTMs".into(),
                ));
            }
            a.wav
                .par_iter()
                .map(|p| {
                    let samples = features::read_wav(p).map_err(data)?;
                    let cfg = StftConfig {
                        log_compress: true,
                        ..Default::default()
                    };
                    let m = features::stft_features(&samples, &cfg).map_err(data)?;
                    let id = p.file_stem().map_or("rec".into(), |s| s.to_string_lossy().into_owned());
                    Ok(Recording {
                        features: FeatureChunk::new(m, features::FRAME_SHIFT_S, id),
                        reference: None,
                    })
                })
                .collect::<Result<_>>()?
        }
        (None, true) => return Err(CliError::Usage("give --manifest or --wav".into())),
    };
    let outs = recs
        .par_iter()
        .map(|r| {
            let num_speakers = match a.num_speakers {
                SpeakerCount::Fixed(k) => NumSpeakers::Fixed(k),
                SpeakerCount::Auto => NumSpeakers::Auto { k_max: a.k_max },
                SpeakerCount::Oracle => NumSpeakers::Fixed(r.reference.as_ref().map_or(1, |x| x.num_speakers()).max(1)),
            };
            let cfg = PostprocessConfig {
                gamma: a.gamma,
                nms_threshold: a.nms,
                num_speakers,
                length_norm: !a.raw_embeddings,
                ..Default::default()
            };
            model.diarize(&r.features, &cfg).map_err(data)
        })
        .collect::<Result<Vec<_>>>()?;
    for o in &outs {
        for w in &o.warnings {
            eprintln!("warning: {w}");
        }
    }
    let anns: Vec<Annotation> = outs.iter().map(|o| io::canonicalize(&o.annotation)).collect();
    io::write_rttm(&anns, &a.out).map_err(data)?;
    let echo = format!(
        "checkpoint = {}\ngamma = {}\nk_max = {}\nnms = {}\nnum_speakers = {:?}\nraw_embeddings = {}\n",
        a.checkpoint.display(),
        a.gamma,
        a.k_max,
        a.nms,
        a.num_speakers,
        a.raw_embeddings
    );
    write_text(&a.out.with_extension("conf"), &echo)?;
    println!("{} recordings diarized, hypothesis {}", anns.len(), a.out.display());
    Ok(())
}

fn score_cmd(a: &ScoreArgs) -> Result<()> {
    let refs = io::read_rttm(&a.reference).map_err(data)?;
    let hyps = io::read_rttm(&a.hyp).map_err(data)?;
    let cfg = ScoringConfig::with_collar(a.collar, a.score_overlap);
    let report = score_corpus(&refs, &hyps, &cfg).map_err(data)?;
    let table = report.table();
    print!("{table}");
    if let Some(out) = &a.out {
        write_text(out, &table)?;
    }
    Ok(())
}

fn stats_cmd(a: &StatsArgs) -> Result<()> {
    let anns = io::read_rttm(&a.rttm).map_err(data)?;
    let parts: Vec<OverlapStats> = anns.values().map(overlap_stats).collect();
    let s = OverlapStats::combine(&parts);
    let text = format!(
        "recordings = {}\nt_spk_ge1 = {:.3}\nt_spk_ge2 = {:.3}\noverlap_ratio = {:.4}\n",
        anns.len(),
        s.t_spk_ge1,
        s.t_spk_ge2,
        s.overlap_ratio
    );
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Stats(a) => stats_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
            })
        }
    }
}
