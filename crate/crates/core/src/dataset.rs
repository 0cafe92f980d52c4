//! Audio-text pair manifests: caption construction, cleaning, multi-caption
//! expansion and corpus statistics.
//!
//! Filesystem access is injected through [`AudioProbe`] so the rules here stay
//! pure; the `jointspace` crate provides the WAV-backed probe.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stopwords;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    DescriptionOnly,
    #[default]
    TitlePlusDescription,
}

impl core::str::FromStr for CaptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "description_only" => Ok(Self::DescriptionOnly),
            "title_plus_description" => Ok(Self::TitlePlusDescription),
            other => Err(Error::invalid(format!("unknown caption mode {other:?}"))),
        }
    }
}

/// One line of a manifest.
///
/// `captions` holds the multi-caption form accepted at parse time; after
/// [`expand_pairs`] every entry carries exactly one `caption` and entries
/// that came from the same audio share `audio_id`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_id: Option<String>,
    pub audio_path: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
    #[serde(default)]
    pub split: Split,
}

impl ManifestEntry {
    /// Key that groups captions of the same recording.
    pub fn audio_key(&self) -> &str {
        self.audio_id.as_deref().unwrap_or(&self.id)
    }

    /// Caption texts already attached to the entry (list form wins over the
    /// single field). Blank strings are ignored.
    pub fn caption_texts(&self) -> Vec<&str> {
        let from_list: Vec<&str> = self
            .captions
            .iter()
            .map(|c| c.trim())
            .filter(|c| !c.is_empty())
            .collect();
        if !from_list.is_empty() {
            return from_list;
        }
        self.caption
            .as_deref()
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .into_iter()
            .collect()
    }

    fn can_caption(&self, mode: CaptionMode) -> bool {
        !self.caption_texts().is_empty()
            || construct_caption(self.title.as_deref(), self.description.as_deref(), mode).is_ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub entries: Vec<ManifestEntry>,
    pub source_label: String,
}

impl PairManifest {
    pub fn new(entries: Vec<ManifestEntry>, source_label: impl Into<String>) -> Self {
        Self {
            entries,
            source_label: source_label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of one split, keeping order.
    pub fn split(&self, split: Split) -> PairManifest {
        PairManifest {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            source_label: self.source_label.clone(),
        }
    }

    /// The single caption of every entry, in order. Fails if the manifest has
    /// not been through [`construct_captions`]/[`expand_pairs`].
    pub fn captions(&self) -> Result<Vec<&str>> {
        self.entries
            .iter()
            .map(|e| match e.caption_texts().as_slice() {
                [one] => Ok(*one),
                [] => Err(Error::CaptionUnavailable),
                _ => Err(Error::invalid(format!(
                    "entry {:?} has several captions; expand the manifest first",
                    e.id
                ))),
            })
            .collect()
    }
}

/// Rejects manifests with repeated ids.
pub fn check_unique_ids(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::invalid(format!("duplicate entry id {:?}", e.id)));
        }
    }
    Ok(())
}

fn non_empty(s: Option<&str>) -> Option<&str> {
    s.map(str::trim).filter(|s| !s.is_empty())
}

/// Builds the caption text for one recording.
///
/// `TitlePlusDescription` joins as `"<title>. <description>"`, dropping the
/// inserted period when the title already ends in `.`, `!` or `?`, and
/// degrading to whichever part is present. `DescriptionOnly` returns the
/// trimmed description.
pub fn construct_caption(title: Option<&str>, description: Option<&str>, mode: CaptionMode) -> Result<String> {
    let description = non_empty(description);
    match mode {
        CaptionMode::DescriptionOnly => description.map(ToString::to_string).ok_or(Error::CaptionUnavailable),
        CaptionMode::TitlePlusDescription => match (non_empty(title), description) {
            (None, None) => Err(Error::CaptionUnavailable),
            (Some(t), None) => Ok(t.to_string()),
            (None, Some(d)) => Ok(d.to_string()),
            (Some(t), Some(d)) => {
                if t.ends_with(['.', '!', '?']) {
                    Ok(format!("{t} {d}"))
                } else {
                    Ok(format!("{t}. {d}"))
                }
            }
        },
    }
}

/// Result of looking at an entry's audio file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioStatus {
    Missing,
    Undecodable,
    Decoded { n_samples: u64, sample_rate: u32 },
}

pub trait AudioProbe {
    fn probe(&self, audio_path: &str) -> AudioStatus;
}

impl<F: Fn(&str) -> AudioStatus> AudioProbe for F {
    fn probe(&self, audio_path: &str) -> AudioStatus {
        self(audio_path)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub dropped_empty_audio: usize,
    pub dropped_missing_file: usize,
    pub dropped_empty_metadata: usize,
    pub kept: usize,
}

impl CleaningReport {
    pub fn total(&self) -> usize {
        self.kept + self.dropped_empty_audio + self.dropped_missing_file + self.dropped_empty_metadata
    }
}

/// Drops entries whose audio is missing or undecodable, decodes to zero
/// samples, or whose metadata cannot produce a caption under `mode`. Kept
/// entries without a caption get one built by [`construct_caption`].
///
/// Checks run in that order, so an entry is counted under the first rule it
/// fails.
pub fn clean_manifest(
    entries: Vec<ManifestEntry>,
    mode: CaptionMode,
    source_label: impl Into<String>,
    probe: &impl AudioProbe,
) -> (PairManifest, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut kept = Vec::with_capacity(entries.len());
    for entry in entries {
        match probe.probe(&entry.audio_path) {
            AudioStatus::Missing | AudioStatus::Undecodable => {
                report.dropped_missing_file += 1;
                continue;
            }
            AudioStatus::Decoded { n_samples: 0, .. } => {
                report.dropped_empty_audio += 1;
                continue;
            }
            AudioStatus::Decoded { .. } => {}
        }
        if !entry.can_caption(mode) {
            report.dropped_empty_metadata += 1;
            continue;
        }
        kept.push(entry);
    }
    report.kept = kept.len();
    let manifest =
        construct_captions(PairManifest::new(kept, source_label), mode).expect("every kept entry can be captioned");
    (manifest, report)
}

/// Fills `caption` on entries that carry neither a caption nor a caption list.
pub fn construct_captions(mut manifest: PairManifest, mode: CaptionMode) -> Result<PairManifest> {
    for e in &mut manifest.entries {
        if e.caption_texts().is_empty() {
            e.caption = Some(construct_caption(e.title.as_deref(), e.description.as_deref(), mode)?);
        }
    }
    Ok(manifest)
}

/// One entry per (audio, caption) combination.
///
/// Multi-caption entries become `<id>#<k>` entries sharing `audio_id`;
/// single-caption entries pass through with their caption normalized into
/// the `caption` field. Idempotent.
pub fn expand_pairs(manifest: PairManifest) -> PairManifest {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in manifest.entries {
        let texts: Vec<String> = entry.caption_texts().into_iter().map(String::from).collect();
        match texts.len() {
            0 => out.push(entry),
            1 => {
                let mut e = entry;
                e.caption = texts.into_iter().next();
                e.captions.clear();
                out.push(e);
            }
            _ => {
                let audio_id = entry.audio_key().to_string();
                for (k, text) in texts.into_iter().enumerate() {
                    let mut e = entry.clone();
                    e.id = format!("{}#{k}", entry.id);
                    e.audio_id = Some(audio_id.clone());
                    e.caption = Some(text);
                    e.captions.clear();
                    out.push(e);
                }
            }
        }
    }
    PairManifest {
        entries: out,
        source_label: manifest.source_label,
    }
}

/// Lowercases and removes ASCII punctuation.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_ascii_punctuation() {
            continue;
        }
        out.extend(c.to_lowercase());
    }
    out
}

/// Whitespace tokens of [`normalize_text`].
pub fn tokenize(text: &str) -> Vec<String> {
    normalize_text(text).split_whitespace().map(String::from).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_audios: usize,
    pub n_captions: usize,
    pub total_duration_s: f64,
    pub max_duration_s: f64,
    pub avg_duration_s: f64,
    pub max_words: usize,
    pub avg_words: f64,
    pub word_frequencies: BTreeMap<String, u64>,
}

/// Corpus statistics in the style of a dataset-description table.
///
/// Durations are per unique recording (`audio_key`); word counts are per
/// caption and include stop-words, while `word_frequencies` excludes them.
/// Entries whose audio cannot be read are skipped and reported in the
/// returned warnings.
pub fn compute_stats(manifest: &PairManifest, probe: &impl AudioProbe) -> (CorpusStats, Vec<String>) {
    let mut warnings = Vec::new();
    let mut durations: BTreeMap<&str, f64> = BTreeMap::new();
    let mut word_counts = Vec::new();
    let mut freqs: BTreeMap<String, u64> = BTreeMap::new();

    for e in &manifest.entries {
        let key = e.audio_key();
        if !durations.contains_key(key) {
            match probe.probe(&e.audio_path) {
                AudioStatus::Decoded { n_samples, sample_rate } if sample_rate > 0 => {
                    durations.insert(key, n_samples as f64 / f64::from(sample_rate));
                }
                status => {
                    warnings.push(format!("{}: unreadable audio {:?} ({status:?})", e.id, e.audio_path));
                    continue;
                }
            }
        }
        let texts = e.caption_texts();
        if texts.is_empty() {
            warnings.push(format!("{}: no caption", e.id));
        }
        for text in texts {
            let tokens = tokenize(text);
            word_counts.push(tokens.len());
            for t in tokens {
                if !stopwords::is_stopword(&t) {
                    *freqs.entry(t).or_insert(0) += 1;
                }
            }
        }
    }

    let n_audios = durations.len();
    let total_duration_s: f64 = durations.values().sum();
    let max_duration_s = durations.values().copied().fold(0.0, f64::max);
    let n_captions = word_counts.len();
    let stats = CorpusStats {
        n_audios,
        n_captions,
        total_duration_s,
        max_duration_s,
        avg_duration_s: if n_audios > 0 {
            total_duration_s / n_audios as f64
        } else {
            0.0
        },
        max_words: word_counts.iter().copied().max().unwrap_or(0),
        avg_words: if n_captions > 0 {
            word_counts.iter().sum::<usize>() as f64 / n_captions as f64
        } else {
            0.0
        },
        word_frequencies: freqs,
    };
    (stats, warnings)
}
