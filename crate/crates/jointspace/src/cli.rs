//! Command-line interface. Every subcommand writes its primary output to the
//! given writer; diagnostics go through `log` to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use jointspace_core::dataset::{
    clean_manifest, compute_stats, construct_captions, expand_pairs, CaptionMode, PairManifest,
};
use jointspace_core::encoders::Modality;
use jointspace_core::jointspace::{build_prompt, zero_shot_classify, Head, ScaleConvention, DEFAULT_PROMPT_TEMPLATE};
use jointspace_core::retrieval::{top_n, ApNorm, Direction, RetrievalReport};
use log::{info, warn};
use serde::Serialize;

use crate::audio::{read_wav, resolve, FsProbe};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{read_checkpoint, read_features, read_index, write_features, write_index, Dtype};
use crate::manifest::{read_entries, write_entries};
use crate::pipeline::{
    build_indexes, direction_name, embed_audio, embed_text, encode_audio, evaluate, report_csv, train_from_features,
    train_run, Corpus, CropPolicy,
};
use crate::synth::{write_corpus, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "jointspace",
    version,
    about = "Contrastive audio-text joint embeddings at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop unusable entries and write a cleaned, captioned manifest.
    Ingest(IngestArgs),
    /// Corpus statistics as JSON.
    Stats(StatsArgs),
    /// Train projections; writes checkpoints, history.csv and summary.json.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on a test manifest.
    Evaluate(EvaluateArgs),
    /// Top-N search of an index with a text or audio query.
    Retrieve(RetrieveArgs),
    /// Zero-shot classification of one clip against text labels.
    Zeroshot(ZeroshotArgs),
    /// Write embedding indexes and/or raw feature caches for a manifest.
    ExportEmbeddings(ExportArgs),
    /// Generate the synthetic WAV corpus.
    Synth(SynthArgs),
    /// Train and evaluate once per caption mode and report both.
    AblateCaptions(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    #[value(alias = "t2a")]
    TextToAudio,
    #[value(alias = "a2t")]
    AudioToText,
    Both,
}

impl DirectionArg {
    fn directions(self) -> Vec<Direction> {
        match self {
            DirectionArg::TextToAudio => vec![Direction::TextToAudio],
            DirectionArg::AudioToText => vec![Direction::AudioToText],
            DirectionArg::Both => vec![Direction::TextToAudio, Direction::AudioToText],
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub caption_mode: Option<CaptionMode>,
    /// Cleaned manifest (default: `<stem>.cleaned.jsonl` next to the input).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the cleaning report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub caption_mode: Option<CaptionMode>,
}

/// Flags that override keys of the run config.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Keep the logit scale at its initial value.
    #[arg(long)]
    pub freeze_scale: bool,
    /// Multiply logits by τ instead of dividing.
    #[arg(long)]
    pub literal_tau: bool,
    #[arg(long)]
    pub caption_mode: Option<CaptionMode>,
    /// Encode each clip once instead of fresh crops every epoch.
    #[arg(long)]
    pub static_crops: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.proj_dim {
            cfg.train.proj_dim = v;
        }
        if let Some(v) = self.tau {
            cfg.train.tau = v;
        }
        if self.freeze_scale {
            cfg.train.freeze_scale = true;
        }
        if self.literal_tau {
            cfg.train.scale_convention = ScaleConvention::Literal;
        }
        if let Some(v) = self.caption_mode {
            cfg.caption_mode = v;
        }
        if self.static_crops {
            cfg.train.static_crops = true;
        }
        if let Some(p) = &self.manifest {
            cfg.paths.train_manifest = Some(p.clone());
        }
        if let Some(p) = &self.val_manifest {
            cfg.paths.val_manifest = Some(p.clone());
        }
        if let Some(p) = &self.test_manifest {
            cfg.paths.test_manifest = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.paths.output_dir = Some(p.clone());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Train on cached paired features (audio file, then text file).
    #[arg(long, num_args = 2, value_names = ["AUDIO", "TEXT"])]
    pub from_features: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// AP@K denominator: min_rel_k or rel.
    #[arg(long, default_value = "min_rel_k")]
    pub ap_norm: ApNorm,
    #[arg(long)]
    pub center_crop: bool,
    /// Evaluation crop seed (default: the checkpoint's training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caption mode (default: the one the checkpoint was trained with).
    #[arg(long)]
    pub caption_mode: Option<CaptionMode>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, conflicts_with = "audio", required_unless_present = "audio")]
    pub text: Option<String>,
    #[arg(long)]
    pub audio: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    /// Class labels, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub labels: Vec<String>,
    #[arg(long, default_value = "softmax")]
    pub head: Head,
    #[arg(long, default_value = DEFAULT_PROMPT_TEMPLATE)]
    pub template: String,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Project with this checkpoint and write `audio.index`, `text.index`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write paired encoder outputs `audio.feat`, `text.feat`.
    #[arg(long)]
    pub features: bool,
    /// Encoder settings when no checkpoint is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "f32")]
    pub dtype: Dtype,
    #[arg(long)]
    pub center_crop: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub caption_mode: Option<CaptionMode>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub clips_per_class: usize,
    #[arg(long, default_value_t = 1.5)]
    pub seconds: f64,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

fn json_line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    emit(out, &s)
}

/// Full precision for CSV, four decimals for tables.
fn number(v: f64, format: Format) -> String {
    if format == Format::Table {
        format!("{v:.4}")
    } else {
        v.to_string()
    }
}

fn emit(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes()).map_err(|e| Error::write("<stdout>", e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Stats(a) => stats(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Retrieve(a) => retrieve(a, out),
        Command::Zeroshot(a) => zeroshot(a, out),
        Command::ExportEmbeddings(a) => export(a, out),
        Command::Synth(a) => synth(a, out),
        Command::AblateCaptions(a) => ablate(a, out),
    }
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> Result<()> {
    let entries = read_entries(&a.manifest)?;
    let base = base_dir(&a.manifest);
    let mode = a.caption_mode.unwrap_or_default();
    let (manifest, report) = clean_manifest(
        entries,
        mode,
        a.manifest.display().to_string(),
        &FsProbe { base: base.clone() },
    );
    let dest = a.out.unwrap_or_else(|| {
        let stem = a.manifest.file_stem().unwrap_or_default().to_string_lossy();
        base.join(format!("{stem}.cleaned.jsonl"))
    });
    let mut kept = manifest.entries;
    // keep relative audio paths valid from the output's directory
    let same_dir = fs::canonicalize(&base).ok() == fs::canonicalize(base_dir(&dest)).ok();
    if !same_dir {
        for e in &mut kept {
            e.audio_path = resolve(&base, &e.audio_path).display().to_string();
        }
    }
    write_entries(&dest, &kept)?;
    info!("wrote {} entries to {}", kept.len(), dest.display());
    if let Some(p) = &a.report {
        let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
        s.push('\n');
        fs::write(p, s).map_err(|e| Error::write(p, e))?;
    }
    json_line(out, &report)
}

fn stats(a: StatsArgs, out: &mut dyn Write) -> Result<()> {
    let entries = read_entries(&a.manifest)?;
    let mode = a.caption_mode.unwrap_or_default();
    let mut captioned = Vec::with_capacity(entries.len());
    for e in entries {
        let id = e.id.clone();
        match construct_captions(PairManifest::new(vec![e], ""), mode) {
            Ok(m) => captioned.extend(m.entries),
            Err(err) => warn!("{id}: skipped ({err})"),
        }
    }
    let manifest = expand_pairs(PairManifest::new(captioned, a.manifest.display().to_string()));
    let (stats, warnings) = compute_stats(
        &manifest,
        &FsProbe {
            base: base_dir(&a.manifest),
        },
    );
    for w in warnings {
        warn!("{w}");
    }
    json_line(out, &stats)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let out_dir = cfg
        .paths
        .output_dir
        .clone()
        .ok_or_else(|| Error::Usage("an output directory is required (--out or paths.output_dir)".into()))?;
    let summary = match a.from_features {
        Some(files) => {
            let (audio, _) = read_features(&files[0])?;
            let (text, _) = read_features(&files[1])?;
            if audio.modality != Modality::Audio || text.modality != Modality::Text {
                return Err(Error::Usage(
                    "--from-features expects the audio file first, then the text file".into(),
                ));
            }
            train_from_features(&cfg, audio, text, &out_dir)?
        }
        None => train_run(&cfg, &out_dir)?,
    };
    fs::write(out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::write(&out_dir, e))?;
    emit(
        out,
        &format!(
            "trained {} epochs on {} pairs; final loss {}; best epoch {}; outputs in {}\n",
            summary.epochs,
            summary.n_train_pairs,
            summary.final_mean_loss,
            summary.best_epoch,
            out_dir.display()
        ),
    )
}

fn write_reports(out: &mut dyn Write, reports: &[RetrievalReport], format: Format) -> Result<()> {
    match format {
        Format::Json => json_line(out, &reports),
        Format::Csv => emit(out, &report_csv(reports)),
        Format::Table => {
            let mut s = String::new();
            for r in reports {
                s.push_str(&format!("{} ({} queries)\n", direction_name(r.direction), r.n_queries));
                s.push_str(&format!("  mAP@10  {:.4}\n", r.map_at_10));
                for (k, v) in &r.recall_at {
                    s.push_str(&format!("  R@{k:<5} {v:.4}\n"));
                }
            }
            emit(out, &s)
        }
    }
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let (model, meta) = read_checkpoint(&a.checkpoint)?;
    let corpus = Corpus::load(
        &a.manifest,
        a.caption_mode.unwrap_or(meta.caption_mode),
        &meta.encoders.mel,
    )?;
    let policy = if a.center_crop {
        CropPolicy::Center
    } else {
        CropPolicy::Eval {
            seed: a.seed.unwrap_or(meta.train.seed),
        }
    };
    let reports = evaluate(
        &model,
        &meta.encoders,
        &corpus,
        &a.direction.directions(),
        policy,
        a.ap_norm,
    )?;
    write_reports(out, &reports, a.format)
}

#[derive(Serialize)]
struct Row<'a> {
    rank: usize,
    id: &'a str,
    score: f64,
}

fn retrieve(a: RetrieveArgs, out: &mut dyn Write) -> Result<()> {
    let (model, meta) = read_checkpoint(&a.checkpoint)?;
    let index = read_index(&a.index)?;
    let query = match (&a.text, &a.audio) {
        (Some(t), _) => embed_text(&model, &meta.encoders, t)?,
        (None, Some(p)) => {
            let w = read_wav(p)?;
            embed_audio(&model, &meta.encoders, &w)?
        }
        (None, None) => return Err(Error::Usage("give --text or --audio".into())),
    };
    let hits = top_n(&query, &index, a.n)?;
    let rows: Vec<Row<'_>> = hits
        .iter()
        .enumerate()
        .map(|(i, h)| Row {
            rank: i + 1,
            id: &h.id,
            score: h.score,
        })
        .collect();
    match a.format {
        Format::Json => json_line(out, &rows),
        Format::Csv | Format::Table => {
            let sep = if a.format == Format::Csv { "," } else { "\t" };
            let mut s = format!("rank{sep}id{sep}score\n");
            for r in rows {
                s.push_str(&format!("{}{sep}{}{sep}{}\n", r.rank, r.id, number(r.score, a.format)));
            }
            emit(out, &s)
        }
    }
}

#[derive(Serialize)]
struct ClassScore {
    label: String,
    prompt: String,
    logit: f64,
    probability: f64,
    predicted: bool,
}

fn zeroshot(a: ZeroshotArgs, out: &mut dyn Write) -> Result<()> {
    let (model, meta) = read_checkpoint(&a.checkpoint)?;
    let labels: Vec<String> = a
        .labels
        .iter()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let prompts = labels
        .iter()
        .map(|l| build_prompt(l, &a.template))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let clip = read_wav(&a.audio)?;
    let emb = embed_audio(&model, &meta.encoders, &clip)?;
    let result = zero_shot_classify(&model, &emb, &prompts, |t| meta.encoders.encode_text(t), a.head)?;
    let rows: Vec<ClassScore> = labels
        .into_iter()
        .zip(prompts)
        .enumerate()
        .map(|(i, (label, prompt))| ClassScore {
            label,
            prompt,
            logit: result.logits[i],
            probability: result.probabilities[i],
            predicted: result.predicted.contains(&i),
        })
        .collect();
    match a.format {
        Format::Json => json_line(out, &rows),
        Format::Csv | Format::Table => {
            let sep = if a.format == Format::Csv { "," } else { "\t" };
            let mut s = format!("label{sep}probability{sep}predicted\n");
            for r in rows {
                s.push_str(&format!(
                    "{}{sep}{}{sep}{}\n",
                    r.label,
                    number(r.probability, a.format),
                    r.predicted
                ));
            }
            emit(out, &s)
        }
    }
}

fn export(a: ExportArgs, out: &mut dyn Write) -> Result<()> {
    if a.checkpoint.is_none() && !a.features {
        return Err(Error::Usage(
            "nothing to export: pass --checkpoint and/or --features".into(),
        ));
    }
    let ckpt = match &a.checkpoint {
        Some(p) => Some(read_checkpoint(p)?),
        None => None,
    };
    let (encoders, default_mode, default_seed) = match (&ckpt, &a.config) {
        (Some((_, meta)), _) => (meta.encoders, meta.caption_mode, meta.train.seed),
        (None, Some(c)) => {
            let cfg = RunConfig::load(c)?;
            (cfg.encoders(), cfg.caption_mode, cfg.seed)
        }
        (None, None) => {
            let cfg = RunConfig::default();
            (cfg.encoders(), cfg.caption_mode, cfg.seed)
        }
    };
    encoders.validate()?;
    let corpus = Corpus::load(&a.manifest, a.caption_mode.unwrap_or(default_mode), &encoders.mel)?;
    let policy = if a.center_crop {
        CropPolicy::Center
    } else {
        CropPolicy::Eval {
            seed: a.seed.unwrap_or(default_seed),
        }
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::write(&a.out_dir, e))?;
    let mut written = Vec::new();
    if let Some((model, _)) = &ckpt {
        let (audio, text) = build_indexes(model, &encoders, &corpus, policy)?;
        for (name, index) in [("audio.index", &audio), ("text.index", &text)] {
            let p = a.out_dir.join(name);
            write_index(&p, index)?;
            written.push(p);
        }
    }
    if a.features {
        let audio = encode_audio(&encoders, &corpus, &corpus.pair_audio, policy, 0)?;
        let text = encoders.encode_texts(&corpus.captions())?;
        for (name, feats) in [("audio.feat", &audio), ("text.feat", &text)] {
            let p = a.out_dir.join(name);
            write_features(&p, feats, a.dtype)?;
            written.push(p);
        }
    }
    let mut s = String::new();
    for p in written {
        s.push_str(&format!("{}\n", p.display()));
    }
    emit(out, &s)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.seconds > 0.0 && a.seconds.is_finite()) || a.clips_per_class == 0 || a.sample_rate == 0 {
        return Err(Error::Usage(
            "need positive --seconds, --clips-per-class and --sample-rate".into(),
        ));
    }
    let spec = SynthSpec {
        clips_per_class: a.clips_per_class,
        sample_rate: a.sample_rate,
        seconds: a.seconds,
        seed: a.seed,
    };
    let manifest = write_corpus(&a.out, &spec)?;
    emit(out, &format!("{}\n", manifest.display()))
}

#[derive(Serialize)]
struct AblationResult {
    caption_mode: CaptionMode,
    final_mean_loss: f64,
    reports: Vec<RetrievalReport>,
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let base = a.overrides.resolve()?;
    let out_dir = base
        .paths
        .output_dir
        .clone()
        .ok_or_else(|| Error::Usage("an output directory is required (--out or paths.output_dir)".into()))?;
    let test =
        base.paths.test_manifest.clone().ok_or_else(|| {
            Error::Usage("a test manifest is required (--test-manifest or paths.test_manifest)".into())
        })?;
    let mut results = Vec::new();
    for mode in [CaptionMode::TitlePlusDescription, CaptionMode::DescriptionOnly] {
        let cfg = RunConfig {
            caption_mode: mode,
            ..base.clone()
        };
        let dir = out_dir.join(serde_json::to_value(mode).unwrap().as_str().unwrap());
        info!("caption mode {mode:?}");
        let summary = train_run(&cfg, &dir)?;
        let (model, meta) = read_checkpoint(&dir.join("final.ckpt"))?;
        let corpus = Corpus::load(&test, mode, &meta.encoders.mel)?;
        let policy = if cfg.eval.center_crop {
            CropPolicy::Center
        } else {
            CropPolicy::Eval { seed: cfg.seed }
        };
        let reports = evaluate(
            &model,
            &meta.encoders,
            &corpus,
            &[Direction::TextToAudio, Direction::AudioToText],
            policy,
            cfg.eval.ap_norm,
        )?;
        results.push(AblationResult {
            caption_mode: mode,
            final_mean_loss: summary.final_mean_loss,
            reports,
        });
    }
    let mut s = serde_json::to_string_pretty(&results).expect("ablation serializes");
    s.push('\n');
    let p = out_dir.join("ablation.json");
    fs::write(&p, &s).map_err(|e| Error::write(&p, e))?;
    emit(out, &s)
}
