//! End-to-end steps shared by the CLI and the tests: loading a corpus,
//! encoding it, training with checkpoint/history output, and evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jointspace_core::dataset::{CaptionMode, PairManifest};
use jointspace_core::dsp::{resample, MelParams, Waveform};
use jointspace_core::encoders::{Crop, Encoders, FeatureMatrix, Modality};
use jointspace_core::jointspace::{project, ProjectionModel};
use jointspace_core::retrieval::{evaluate_indexes, ApNorm, Direction, EmbeddingIndex, RetrievalReport};
use jointspace_core::rng::substream;
use jointspace_core::training::{train, EpochRecord, PairSource, StaticPairs, TrainConfig, TrainOutcome};
use jointspace_core::Matrix;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resolve};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{write_checkpoint, CheckpointMeta};
use crate::manifest::load_pairs;

/// An expanded manifest with every distinct recording decoded once and
/// resampled to the mel front end's rate.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: PairManifest,
    /// Distinct recordings in first-seen order.
    pub audio_keys: Vec<String>,
    pub clips: Vec<Waveform>,
    /// Recording of each entry, as an index into `audio_keys`.
    pub pair_audio: Vec<usize>,
}

impl Corpus {
    pub fn load(path: &Path, mode: CaptionMode, mel: &MelParams) -> Result<Self> {
        let manifest = load_pairs(path, mode)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_manifest(manifest, &base, mel)
    }

    pub fn from_manifest(manifest: PairManifest, base: &Path, mel: &MelParams) -> Result<Self> {
        manifest.captions()?;
        let mut audio_keys: Vec<String> = Vec::new();
        let mut paths: Vec<PathBuf> = Vec::new();
        let mut slot: HashMap<String, usize> = HashMap::new();
        let mut pair_audio = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let key = e.audio_key().to_string();
            let i = *slot.entry(key.clone()).or_insert_with(|| {
                audio_keys.push(key);
                paths.push(resolve(base, &e.audio_path));
                audio_keys.len() - 1
            });
            pair_audio.push(i);
        }
        let clips = paths
            .par_iter()
            .map(|p| {
                let w = read_wav(p)?;
                if w.is_empty() {
                    return Err(Error::Wav {
                        path: p.clone(),
                        reason: "no samples".into(),
                    });
                }
                if w.sample_rate == mel.sample_rate {
                    Ok(w)
                } else {
                    Ok(resample(&w, mel.sample_rate)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            audio_keys,
            clips,
            pair_audio,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.manifest.len()
    }

    pub fn captions(&self) -> Vec<&str> {
        self.manifest.captions().expect("checked at load")
    }

    pub fn caption_ids(&self) -> Vec<String> {
        self.manifest.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Recording key of every caption, aligned with [`Corpus::caption_ids`].
    pub fn caption_audio(&self) -> Vec<String> {
        self.pair_audio.iter().map(|&i| self.audio_keys[i].clone()).collect()
    }
}

/// Where the audio encoders' analysis windows come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPolicy {
    /// Fresh random crops every epoch (`crop/{epoch}/{audio}`).
    PerEpoch {
        seed: u64,
    },
    /// One random crop per recording for the whole run (`crop/static/{audio}`).
    Static {
        seed: u64,
    },
    /// Seeded evaluation crops (`eval-crop/{audio}`).
    Eval {
        seed: u64,
    },
    Center,
}

impl CropPolicy {
    fn stream(&self, epoch: usize, key: &str) -> Option<(u64, String)> {
        match *self {
            CropPolicy::PerEpoch { seed } => Some((seed, format!("crop/{epoch}/{key}"))),
            CropPolicy::Static { seed } => Some((seed, format!("crop/static/{key}"))),
            CropPolicy::Eval { seed } => Some((seed, format!("eval-crop/{key}"))),
            CropPolicy::Center => None,
        }
    }

    fn varies_by_epoch(&self) -> bool {
        matches!(self, CropPolicy::PerEpoch { .. })
    }
}

/// Audio features of recordings `keys` (indexes into `corpus.audio_keys`).
/// Each recording draws from its own named substream, so the result does not
/// depend on thread scheduling.
pub fn encode_audio(
    encoders: &Encoders,
    corpus: &Corpus,
    keys: &[usize],
    policy: CropPolicy,
    epoch: usize,
) -> Result<FeatureMatrix> {
    let rows = keys
        .par_iter()
        .map(|&k| {
            let clip = &corpus.clips[k];
            let v = match policy.stream(epoch, &corpus.audio_keys[k]) {
                Some((seed, name)) => encoders.encode_audio(clip, &mut Crop::Random(&mut substream(seed, &name)))?,
                None => encoders.encode_audio(clip, &mut Crop::Center)?,
            };
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix::new(
        Matrix::from_rows(encoders.audio_dim(), rows)?,
        Modality::Audio,
    ))
}

/// Training pairs backed by decoded audio. Text features never change and
/// are computed once; audio features follow the crop policy.
pub struct ManifestPairs<'a> {
    corpus: &'a Corpus,
    encoders: Encoders,
    policy: CropPolicy,
    text: FeatureMatrix,
    /// Per-recording features when they do not change between epochs.
    fixed_audio: Option<FeatureMatrix>,
}

impl<'a> ManifestPairs<'a> {
    pub fn new(corpus: &'a Corpus, encoders: Encoders, policy: CropPolicy) -> Result<Self> {
        encoders.validate()?;
        let text = encoders.encode_texts(&corpus.captions())?;
        let fixed_audio = if policy.varies_by_epoch() {
            None
        } else {
            let all: Vec<usize> = (0..corpus.audio_keys.len()).collect();
            Some(encode_audio(&encoders, corpus, &all, policy, 0)?)
        };
        Ok(Self {
            corpus,
            encoders,
            policy,
            text,
            fixed_audio,
        })
    }

    /// Every pair's features as they would be served at `epoch`.
    pub fn materialize(&self, epoch: usize) -> Result<StaticPairs> {
        let all: Vec<usize> = (0..self.n_pairs()).collect();
        let (a, t) = self.batch(epoch, &all)?;
        Ok(StaticPairs::new(a, t)?)
    }
}

impl PairSource for ManifestPairs<'_> {
    type Error = Error;

    fn n_pairs(&self) -> usize {
        self.corpus.n_pairs()
    }

    fn audio_dim(&self) -> usize {
        self.encoders.audio_dim()
    }

    fn text_dim(&self) -> usize {
        self.encoders.text_dim()
    }

    fn batch(&self, epoch: usize, indices: &[usize]) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let keys: Vec<usize> = indices.iter().map(|&i| self.corpus.pair_audio[i]).collect();
        let audio = match &self.fixed_audio {
            Some(f) => f.select(&keys),
            None => encode_audio(&self.encoders, self.corpus, &keys, self.policy, epoch)?,
        };
        Ok((audio, self.text.select(indices)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub n_train_pairs: usize,
    pub n_val_pairs: Option<usize>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_mean_loss: f64,
    pub final_scale: f64,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,lr,scale\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.mean_loss, r.lr, r.scale).unwrap();
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::write(path, e))
}

fn log_epoch(r: &EpochRecord) {
    match r.val_loss {
        Some(v) => info!(
            "epoch {:>3}  loss {:.6}  val {:.6}  lr {:e}  scale {:.3}",
            r.epoch, r.mean_loss, v, r.lr, r.scale
        ),
        None => info!(
            "epoch {:>3}  loss {:.6}  lr {:e}  scale {:.3}",
            r.epoch, r.mean_loss, r.lr, r.scale
        ),
    }
}

/// Writes `final.ckpt`, `best.ckpt`, `history.csv` and `summary.json`.
fn write_outputs(
    out_dir: &Path,
    outcome: &TrainOutcome,
    meta: CheckpointMeta,
    n_train: usize,
    n_val: Option<usize>,
) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::write(out_dir, e))?;
    let last = outcome.history.last().expect("at least one epoch");
    write_checkpoint(
        &out_dir.join("final.ckpt"),
        &outcome.model,
        &CheckpointMeta {
            epoch: last.epoch,
            ..meta.clone()
        },
    )?;
    write_checkpoint(
        &out_dir.join("best.ckpt"),
        &outcome.best_model,
        &CheckpointMeta {
            epoch: outcome.best_epoch,
            ..meta.clone()
        },
    )?;
    write_text(&out_dir.join("history.csv"), &history_csv(&outcome.history))?;
    let summary = TrainSummary {
        seed: meta.train.seed,
        n_train_pairs: n_train,
        n_val_pairs: n_val,
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        final_mean_loss: last.mean_loss,
        final_scale: last.scale,
        history: outcome.history.clone(),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_text(&out_dir.join("summary.json"), &json)?;
    Ok(summary)
}

fn meta_for(cfg: &RunConfig, train_cfg: &TrainConfig) -> CheckpointMeta {
    let bounds = match train_cfg.scale_convention {
        jointspace_core::jointspace::ScaleConvention::Inverse => jointspace_core::jointspace::SCALE_BOUNDS,
        jointspace_core::jointspace::ScaleConvention::Literal => jointspace_core::jointspace::LITERAL_SCALE_BOUNDS,
    };
    CheckpointMeta {
        encoders: cfg.encoders(),
        caption_mode: cfg.caption_mode,
        train: *train_cfg,
        scale_bounds: bounds,
        normalize: train_cfg.normalize,
        epoch: 0,
    }
}

/// Trains from the manifests named in `cfg`.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_cfg = cfg.train_config();
    let encoders = cfg.encoders();
    let train_path = cfg
        .paths
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::Config("paths.train_manifest is required".into()))?;
    let corpus = Corpus::load(train_path, cfg.caption_mode, &cfg.mel)?;
    info!(
        "{} training pairs over {} recordings",
        corpus.n_pairs(),
        corpus.audio_keys.len()
    );
    let policy = if train_cfg.static_crops {
        CropPolicy::Static { seed: train_cfg.seed }
    } else {
        CropPolicy::PerEpoch { seed: train_cfg.seed }
    };
    let source = ManifestPairs::new(&corpus, encoders, policy)?;
    let val_corpus = match &cfg.paths.val_manifest {
        Some(p) => Some(Corpus::load(p, cfg.caption_mode, &cfg.mel)?),
        None => None,
    };
    let val = match &val_corpus {
        Some(c) => Some(ManifestPairs::new(c, encoders, CropPolicy::Center)?),
        None => None,
    };
    let outcome = train(&source, val.as_ref(), &train_cfg, log_epoch)?;
    write_outputs(
        out_dir,
        &outcome,
        meta_for(cfg, &train_cfg),
        corpus.n_pairs(),
        val_corpus.as_ref().map(Corpus::n_pairs),
    )
}

/// Trains on cached paired features instead of audio.
pub fn train_from_features(
    cfg: &RunConfig,
    audio: FeatureMatrix,
    text: FeatureMatrix,
    out_dir: &Path,
) -> Result<TrainSummary> {
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;
    let pairs = StaticPairs::new(audio, text)?;
    let outcome = train(&pairs, None::<&StaticPairs>, &train_cfg, log_epoch)?;
    write_outputs(out_dir, &outcome, meta_for(cfg, &train_cfg), pairs.audio.n(), None)
}

/// Audio index (one row per recording) and caption index for `corpus`.
pub fn build_indexes(
    model: &ProjectionModel,
    encoders: &Encoders,
    corpus: &Corpus,
    policy: CropPolicy,
) -> Result<(EmbeddingIndex, EmbeddingIndex)> {
    let all: Vec<usize> = (0..corpus.audio_keys.len()).collect();
    let audio_feats = encode_audio(encoders, corpus, &all, policy, 0)?;
    let text_feats = encoders.encode_texts(&corpus.captions())?;
    let audio = EmbeddingIndex::build(model, &audio_feats, corpus.audio_keys.clone())?;
    let captions = EmbeddingIndex::build(model, &text_feats, corpus.caption_ids())?;
    Ok((audio, captions))
}

pub fn evaluate(
    model: &ProjectionModel,
    encoders: &Encoders,
    corpus: &Corpus,
    directions: &[Direction],
    policy: CropPolicy,
    norm: ApNorm,
) -> Result<Vec<RetrievalReport>> {
    let (audio, captions) = build_indexes(model, encoders, corpus, policy)?;
    let caption_audio = corpus.caption_audio();
    directions
        .iter()
        .map(|&d| Ok(evaluate_indexes(&audio, &captions, &caption_audio, d, norm)?))
        .collect()
}

/// Unit-norm joint-space embedding of one text query.
pub fn embed_text(model: &ProjectionModel, encoders: &Encoders, text: &str) -> Result<Vec<f64>> {
    let feats = encoders.encode_texts(&[text])?;
    Ok(unit(project(model, &feats)?.values.into_vec()))
}

/// Unit-norm joint-space embedding of one clip, center-cropped.
pub fn embed_audio(model: &ProjectionModel, encoders: &Encoders, clip: &Waveform) -> Result<Vec<f64>> {
    let v = encoders.encode_audio(clip, &mut Crop::Center)?;
    let feats = FeatureMatrix::new(Matrix::from_vec(1, v.len(), v)?, Modality::Audio);
    Ok(unit(project(model, &feats)?.values.into_vec()))
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    jointspace_core::linalg::normalize_in_place(&mut v);
    v
}

pub fn report_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from("direction,metric,value\n");
    for r in reports {
        let dir = direction_name(r.direction);
        writeln!(out, "{dir},map@10,{}", r.map_at_10).unwrap();
        for (k, v) in &r.recall_at {
            writeln!(out, "{dir},R@{k},{v}").unwrap();
        }
    }
    out
}

pub fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::TextToAudio => "text_to_audio",
        Direction::AudioToText => "audio_to_text",
    }
}
