//! Desk-scale encoders behind the `f_a` / `f_t` interface.
//!
//! Audio: a global pooling encoder (per-bin mean and standard deviation over
//! the whole crop) and a chunked pooling encoder (per-bin means over a few
//! contiguous time segments), fused by concatenation. Text: hashed bag of
//! word n-grams, L2-normalized.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::tokenize;
use crate::dsp::{self, MelParams, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::linalg::{normalize_in_place, Matrix};
use crate::rng::{fnv1a64, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

/// Encoder outputs for a batch, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub modality: Modality,
}

impl FeatureMatrix {
    pub fn new(values: Matrix, modality: Modality) -> Self {
        Self { values, modality }
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(indices),
            modality: self.modality,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    AudioGlobalPool {
        crop_seconds: f64,
    },
    AudioChunkedPool {
        crop_seconds: f64,
        n_chunks: usize,
    },
    AudioConcat {
        global_crop_seconds: f64,
        chunked_crop_seconds: f64,
        n_chunks: usize,
    },
    TextHashedNgram {
        n_buckets: usize,
        ngram_range: (usize, usize),
    },
}

impl EncoderSpec {
    pub fn default_audio() -> Self {
        EncoderSpec::AudioConcat {
            global_crop_seconds: 20.0,
            chunked_crop_seconds: 10.0,
            n_chunks: 4,
        }
    }

    pub fn default_text() -> Self {
        EncoderSpec::TextHashedNgram {
            n_buckets: 4096,
            ngram_range: (1, 2),
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            EncoderSpec::TextHashedNgram { .. } => Modality::Text,
            _ => Modality::Audio,
        }
    }

    /// Feature dimension produced for spectrograms with `n_mels` bins.
    pub fn output_dim(&self, n_mels: usize) -> usize {
        match *self {
            EncoderSpec::AudioGlobalPool { .. } => 2 * n_mels,
            EncoderSpec::AudioChunkedPool { n_chunks, .. } => n_chunks * n_mels,
            EncoderSpec::AudioConcat { n_chunks, .. } => 2 * n_mels + n_chunks * n_mels,
            EncoderSpec::TextHashedNgram { n_buckets, .. } => n_buckets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let crop_ok = |s: f64| s > 0.0 && s.is_finite();
        let ok = match *self {
            EncoderSpec::AudioGlobalPool { crop_seconds } => crop_ok(crop_seconds),
            EncoderSpec::AudioChunkedPool { crop_seconds, n_chunks } => crop_ok(crop_seconds) && n_chunks >= 1,
            EncoderSpec::AudioConcat {
                global_crop_seconds,
                chunked_crop_seconds,
                n_chunks,
            } => crop_ok(global_crop_seconds) && crop_ok(chunked_crop_seconds) && n_chunks >= 1,
            EncoderSpec::TextHashedNgram {
                n_buckets,
                ngram_range: (lo, hi),
            } => n_buckets >= 2 && lo >= 1 && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid encoder spec {self:?}")))
        }
    }
}

/// How an audio encoder picks its analysis window.
pub enum Crop<'a> {
    /// Uniformly random window per encoder, drawn in encoder order.
    Random(&'a mut Rng),
    /// Deterministic center window.
    Center,
}

impl Crop<'_> {
    fn apply(&mut self, w: &Waveform, seconds: f64) -> Result<Waveform> {
        match self {
            Crop::Random(rng) => dsp::random_crop_or_pad(w, seconds, rng),
            Crop::Center => dsp::center_crop_or_pad(w, seconds),
        }
    }
}

/// Per-bin mean then per-bin population standard deviation over time.
pub fn encode_audio_global(mel: &MelSpectrogram) -> Vec<f64> {
    let v = &mel.values;
    let t = v.cols() as f64;
    let mut out = vec![0.0; 2 * v.rows()];
    for (m, row) in v.iter_rows().enumerate() {
        let mean = row.iter().sum::<f64>() / t;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t;
        out[m] = mean;
        out[v.rows() + m] = libm::sqrt(var);
    }
    out
}

/// Frame ranges of `n_chunks` contiguous segments covering `n_frames`; the
/// remainder goes to the leading chunks.
pub fn chunk_bounds(n_frames: usize, n_chunks: usize) -> Vec<(usize, usize)> {
    let base = n_frames / n_chunks;
    let rem = n_frames % n_chunks;
    let mut start = 0;
    (0..n_chunks)
        .map(|c| {
            let len = base + usize::from(c < rem);
            let range = (start, start + len);
            start += len;
            range
        })
        .collect()
}

/// Per-chunk per-bin means, chunk blocks in time order.
///
/// When there are fewer frames than chunks, an empty chunk takes the values
/// of the frame at its start position (clamped to the last frame).
pub fn encode_audio_chunked(mel: &MelSpectrogram, n_chunks: usize) -> Result<Vec<f64>> {
    if n_chunks == 0 {
        return Err(Error::invalid("n_chunks must be at least 1"));
    }
    let v = &mel.values;
    let (f, t) = (v.rows(), v.cols());
    let mut out = vec![0.0; n_chunks * f];
    for (c, (start, end)) in chunk_bounds(t, n_chunks).into_iter().enumerate() {
        let block = &mut out[c * f..(c + 1) * f];
        if start == end {
            let frame = start.min(t - 1);
            for (m, b) in block.iter_mut().enumerate() {
                *b = v[(m, frame)];
            }
            continue;
        }
        let len = (end - start) as f64;
        for (m, b) in block.iter_mut().enumerate() {
            *b = v.row(m)[start..end].iter().sum::<f64>() / len;
        }
    }
    Ok(out)
}

fn to_mel(clip: &Waveform, mel: &MelParams) -> Result<Waveform> {
    if clip.sample_rate == mel.sample_rate {
        Ok(clip.clone())
    } else {
        dsp::resample(clip, mel.sample_rate)
    }
}

/// Global-then-chunked features of one clip, each computed on its own crop.
/// With `Crop::Random` the two crops are drawn in that order from the same
/// generator.
pub fn encode_audio_concat(
    clip: &Waveform,
    global_crop_seconds: f64,
    chunked_crop_seconds: f64,
    n_chunks: usize,
    mel: &MelParams,
    crop: &mut Crop<'_>,
) -> Result<Vec<f64>> {
    let clip = to_mel(clip, mel)?;
    let g = crop.apply(&clip, global_crop_seconds)?;
    let c = crop.apply(&clip, chunked_crop_seconds)?;
    let mut out = encode_audio_global(&dsp::log_mel(&g, mel)?);
    out.extend(encode_audio_chunked(&dsp::log_mel(&c, mel)?, n_chunks)?);
    Ok(out)
}

/// Word n-grams of the normalized caption, joined with single spaces.
pub fn word_ngrams(caption: &str, (lo, hi): (usize, usize)) -> Vec<String> {
    let tokens = tokenize(caption);
    let mut grams = Vec::new();
    for n in lo..=hi {
        for window in tokens.windows(n) {
            grams.push(window.join(" "));
        }
    }
    grams
}

/// Hashed n-gram counts (FNV-1a 64, `bucket = hash mod n_buckets`),
/// L2-normalized.
pub fn encode_text_hashed(caption: &str, n_buckets: usize, ngram_range: (usize, usize)) -> Result<Vec<f64>> {
    if n_buckets < 2 {
        return Err(Error::invalid("n_buckets must be at least 2"));
    }
    if ngram_range.0 == 0 || ngram_range.0 > ngram_range.1 {
        return Err(Error::invalid("ngram range must satisfy 1 <= lo <= hi"));
    }
    let mut v = vec![0.0; n_buckets];
    let grams = word_ngrams(caption, ngram_range);
    if grams.is_empty() {
        return Err(Error::DegenerateText);
    }
    for g in grams {
        v[(fnv1a64(g.as_bytes()) % n_buckets as u64) as usize] += 1.0;
    }
    normalize_in_place(&mut v);
    Ok(v)
}

/// The audio and text encoder pair plus the shared mel front end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encoders {
    pub audio: EncoderSpec,
    pub text: EncoderSpec,
    pub mel: MelParams,
}

impl Default for Encoders {
    fn default() -> Self {
        Self {
            audio: EncoderSpec::default_audio(),
            text: EncoderSpec::default_text(),
            mel: MelParams::default(),
        }
    }
}

impl Encoders {
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.audio.validate()?;
        self.text.validate()?;
        if self.audio.modality() != Modality::Audio || self.text.modality() != Modality::Text {
            return Err(Error::invalid("audio/text encoder kinds are swapped"));
        }
        Ok(())
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.output_dim(self.mel.n_mels)
    }

    pub fn text_dim(&self) -> usize {
        self.text.output_dim(self.mel.n_mels)
    }

    pub fn encode_audio(&self, clip: &Waveform, crop: &mut Crop<'_>) -> Result<Vec<f64>> {
        let mel = &self.mel;
        match self.audio {
            EncoderSpec::AudioGlobalPool { crop_seconds } => {
                let w = crop.apply(&to_mel(clip, mel)?, crop_seconds)?;
                Ok(encode_audio_global(&dsp::log_mel(&w, mel)?))
            }
            EncoderSpec::AudioChunkedPool { crop_seconds, n_chunks } => {
                let w = crop.apply(&to_mel(clip, mel)?, crop_seconds)?;
                encode_audio_chunked(&dsp::log_mel(&w, mel)?, n_chunks)
            }
            EncoderSpec::AudioConcat {
                global_crop_seconds,
                chunked_crop_seconds,
                n_chunks,
            } => encode_audio_concat(clip, global_crop_seconds, chunked_crop_seconds, n_chunks, mel, crop),
            EncoderSpec::TextHashedNgram { .. } => Err(Error::invalid("text encoder used for audio")),
        }
    }

    pub fn encode_text(&self, caption: &str) -> Result<Vec<f64>> {
        match self.text {
            EncoderSpec::TextHashedNgram { n_buckets, ngram_range } => {
                encode_text_hashed(caption, n_buckets, ngram_range)
            }
            _ => Err(Error::invalid("audio encoder used for text")),
        }
    }

    pub fn encode_texts<S: AsRef<str>>(&self, captions: &[S]) -> Result<FeatureMatrix> {
        let rows = captions
            .iter()
            .map(|c| self.encode_text(c.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMatrix::new(
            Matrix::from_rows(self.text_dim(), rows)?,
            Modality::Text,
        ))
    }
}
