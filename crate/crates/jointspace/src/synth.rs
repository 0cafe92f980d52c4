//! A small synthetic sound corpus written as WAV files plus a manifest.
//!
//! Each class has its own pair of tone frequencies and tremolo rate. Titles
//! name the class; descriptions are drawn from a generic pool that says
//! nothing about it. Captions built from titles therefore carry the label
//! and description-only captions do not, which is what the caption-mode
//! ablation needs.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use jointspace_core::dataset::{ManifestEntry, Split};
use jointspace_core::dsp::Waveform;
use jointspace_core::rng::substream;
use rand::Rng;

use crate::audio::write_wav_i16;
use crate::error::{Error, Result};
use crate::manifest::write_entries;

/// (title, tone frequencies in Hz, tremolo rate in Hz)
const CLASSES: [(&str, [f64; 2], f64); 8] = [
    ("Dog barking", [310.0, 620.0], 3.0),
    ("Crow calling", [880.0, 1320.0], 5.0),
    ("Rain on a roof", [2400.0, 3900.0], 11.0),
    ("Church bell", [440.0, 1100.0], 0.7),
    ("Car engine idling", [95.0, 190.0], 23.0),
    ("Kettle whistling", [2900.0, 3100.0], 0.3),
    ("Frog croaking", [520.0, 780.0], 8.0),
    ("Door creaking", [1500.0, 2050.0], 1.7),
];

const DESCRIPTIONS: [&str; 6] = [
    "A short field recording",
    "Recorded with a handheld recorder",
    "Captured late in the afternoon",
    "A clip from the sound library",
    "Recorded at a distance of a few meters",
    "A mono recording made on location",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub clips_per_class: usize,
    pub sample_rate: u32,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clips_per_class: 8,
            sample_rate: 16_000,
            seconds: 1.5,
            seed: 0,
        }
    }
}

pub fn n_classes() -> usize {
    CLASSES.len()
}

fn clip(class: usize, k: usize, spec: &SynthSpec) -> Waveform {
    let (_, freqs, trem) = CLASSES[class];
    let mut rng = substream(spec.seed, &format!("synth/{class}/{k}"));
    let detune = 1.0 + rng.gen_range(-0.02..0.02);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let n = (spec.seconds * f64::from(spec.sample_rate)).round() as usize;
    let sr = f64::from(spec.sample_rate);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.6 + 0.4 * (2.0 * PI * trem * t + phase).sin();
            let tone: f64 = freqs.iter().map(|f| (2.0 * PI * f * detune * t).sin()).sum::<f64>() / 2.0;
            0.5 * env * tone + 0.02 * rng.gen_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(samples, spec.sample_rate).expect("finite synthetic samples")
}

/// Writes `audio/*.wav` and `manifest.jsonl` under `dir`; every fourth clip
/// of a class goes to the test split. Returns the manifest path.
pub fn write_corpus(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::write(&audio_dir, e))?;
    let mut entries = Vec::new();
    for (c, (title, _, _)) in CLASSES.iter().enumerate() {
        for k in 0..spec.clips_per_class {
            let id = format!("c{c}-{k:02}");
            let rel = format!("audio/{id}.wav");
            write_wav_i16(&dir.join(&rel), &clip(c, k, spec))?;
            let mut rng = substream(spec.seed, &format!("synth/desc/{id}"));
            entries.push(ManifestEntry {
                id,
                audio_path: rel,
                title: Some((*title).to_string()),
                description: Some(DESCRIPTIONS[rng.gen_range(0..DESCRIPTIONS.len())].to_string()),
                split: if k % 4 == 3 { Split::Test } else { Split::Train },
                ..Default::default()
            });
        }
    }
    let all = dir.join("manifest.jsonl");
    write_entries(&all, &entries)?;
    for (name, split) in [("train.jsonl", Split::Train), ("test.jsonl", Split::Test)] {
        let part: Vec<ManifestEntry> = entries.iter().filter(|e| e.split == split).cloned().collect();
        write_entries(&dir.join(name), &part)?;
    }
    Ok(all)
}
