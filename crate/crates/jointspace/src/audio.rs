//! WAV decoding and the filesystem-backed [`AudioProbe`].

use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use jointspace_core::dataset::{AudioProbe, AudioStatus};
use jointspace_core::dsp::Waveform;

use crate::error::{Error, Result};

/// Decodes a WAV file to mono by averaging channels. Integer PCM is scaled by
/// `2^(bits-1)` into [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::read(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let full = f64::from(1u32 << (bits - 1));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / full))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(Error::Wav {
                path: path.to_path_buf(),
                reason: format!("unsupported sample format {fmt:?} at {bits} bits"),
            })
        }
    };
    let channels = usize::from(spec.channels.max(1));
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(Waveform::new(mono, spec.sample_rate)?)
}

/// Writes 16-bit mono PCM with the same `2^15` scale [`read_wav`] uses,
/// saturating at full scale.
pub fn write_wav_i16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::write(path, io),
        other => Error::write(path, std::io::Error::other(other)),
    };
    let mut writer = WavWriter::create(path, spec).map_err(io)?;
    for &s in &w.samples {
        writer
            .write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            .map_err(io)?;
    }
    writer.finalize().map_err(io)
}

/// Resolves manifest audio paths against the manifest's directory.
pub fn resolve(base: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Probes files by decoding them completely.
#[derive(Debug, Clone)]
pub struct FsProbe {
    pub base: PathBuf,
}

impl AudioProbe for FsProbe {
    fn probe(&self, audio_path: &str) -> AudioStatus {
        let path = resolve(&self.base, audio_path);
        if !path.is_file() {
            return AudioStatus::Missing;
        }
        match read_wav(&path) {
            Ok(w) => AudioStatus::Decoded {
                n_samples: w.len() as u64,
                sample_rate: w.sample_rate,
            },
            Err(_) => AudioStatus::Undecodable,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_spec(path: &Path, spec: WavSpec, frames: &[[f64; 2]]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for frame in frames {
            for &s in &frame[..usize::from(spec.channels)] {
                match (spec.sample_format, spec.bits_per_sample) {
                    (SampleFormat::Float, _) => w.write_sample(s as f32).unwrap(),
                    (_, bits) => w.write_sample((s * f64::from(1u32 << (bits - 1))) as i32).unwrap(),
                }
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn decodes_every_supported_layout() {
        let dir = tempfile::tempdir().unwrap();
        let frames = [[0.5, -0.25], [0.0, 0.75], [-1.0, -1.0]];
        for (fmt, bits, channels) in [
            (SampleFormat::Int, 16, 1),
            (SampleFormat::Int, 24, 2),
            (SampleFormat::Int, 32, 2),
            (SampleFormat::Float, 32, 2),
        ] {
            let path = dir.path().join(format!("{bits}-{channels}.wav"));
            let spec = WavSpec {
                channels,
                sample_rate: 8000,
                bits_per_sample: bits,
                sample_format: fmt,
            };
            write_spec(&path, spec, &frames);
            let w = read_wav(&path).unwrap();
            assert_eq!(w.sample_rate, 8000);
            let want: Vec<f64> = frames
                .iter()
                .map(|f| f[..usize::from(channels)].iter().sum::<f64>() / f64::from(channels))
                .collect();
            assert_eq!(w.samples, want, "{fmt:?} {bits} x{channels}");
        }
    }

    #[test]
    fn probe_classifies_files() {
        let dir = tempfile::tempdir().unwrap();
        let probe = FsProbe {
            base: dir.path().to_path_buf(),
        };
        assert_eq!(probe.probe("nope.wav"), AudioStatus::Missing);
        std::fs::write(dir.path().join("junk.wav"), b"not a wav").unwrap();
        assert_eq!(probe.probe("junk.wav"), AudioStatus::Undecodable);
        write_wav_i16(&dir.path().join("empty.wav"), &Waveform::new(vec![], 16_000).unwrap()).unwrap();
        assert_eq!(
            probe.probe("empty.wav"),
            AudioStatus::Decoded {
                n_samples: 0,
                sample_rate: 16_000
            }
        );
    }

    #[test]
    fn i16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform::new((0..100).map(|i| (i as f64 * 0.1).sin() * 0.9).collect(), 22_050).unwrap();
        write_wav_i16(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0);
        }
    }
}
