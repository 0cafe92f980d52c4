//! Log-mel front end, windowed-sinc resampling and random crop/pad.
//!
//! Frozen conventions (changing any of them invalidates feature goldens):
//! periodic Hann analysis window, `n_fft = window_size`, centered frames with
//! reflect padding of `window_size / 2` on both sides, power spectrum
//! `|X|²`, HTK mel scale `mel(f) = 2595 log10(1 + f/700)` with unnormalized
//! triangular filters, and `ln(max(x, log_floor))` with `log_floor = 1e-10`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn scaled(&self, c: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelParams {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            window_size: 1024,
            hop_size: 320,
            n_mels: 64,
            f_min: 50.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if self.sample_rate == 0 {
            return Err(Error::invalid("mel sample_rate must be positive"));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::invalid(
                "mel band must satisfy 0 < f_min < f_max <= sample_rate/2",
            ));
        }
        if self.window_size < 2 || self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::invalid("need 0 < hop_size <= window_size and window_size >= 2"));
        }
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::invalid("log_floor must be a small positive number"));
        }
        Ok(())
    }

    /// `1 + floor(n_samples / hop)` for centered framing.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_size
    }

    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }
}

/// Log-power mel spectrogram, `n_mels × n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix,
    pub params: MelParams,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Lower edge, center and upper edge (Hz) of every mel filter.
pub fn mel_band_edges(p: &MelParams) -> Vec<(f64, f64, f64)> {
    let lo = hz_to_mel(p.f_min);
    let hi = hz_to_mel(p.f_max);
    let step = (hi - lo) / (p.n_mels + 1) as f64;
    let hz: Vec<f64> = (0..p.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect();
    hz.windows(3).map(|w| (w[0], w[1], w[2])).collect()
}

/// Center frequency of every mel filter.
pub fn mel_centers(p: &MelParams) -> Vec<f64> {
    mel_band_edges(p).into_iter().map(|(_, c, _)| c).collect()
}

/// Triangular filter matrix, `n_mels × (window_size/2 + 1)`.
pub fn mel_filterbank(p: &MelParams) -> Matrix {
    let n_bins = p.n_bins();
    let bin_hz = f64::from(p.sample_rate) / p.window_size as f64;
    let edges = mel_band_edges(p);
    Matrix::from_fn(p.n_mels, n_bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (lo, c, hi) = edges[m];
        let rise = (f - lo) / (c - lo);
        let fall = (hi - f) / (hi - c);
        rise.min(fall).max(0.0)
    })
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64))
        .collect()
}

/// Index into `0..n` under repeated mirror reflection (edge sample not
/// repeated), valid for offsets of any size.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// In-place complex FFT on split real/imaginary buffers. Radix-2 for powers of
/// two, direct DFT otherwise.
pub fn fft(re: &mut [f64], im: &mut [f64]) {
    FftPlan::new(re.len()).run(re, im);
}

/// Twiddle factors for repeated transforms of one length.
struct FftPlan {
    n: usize,
    /// `(sin, cos)` of `-2πk/n` for `k < n/2`
    twiddles: Vec<(f64, f64)>,
}

impl FftPlan {
    fn new(n: usize) -> Self {
        let twiddles = if n.is_power_of_two() {
            (0..n / 2)
                .map(|k| libm::sincos(-2.0 * PI * k as f64 / n as f64))
                .collect()
        } else {
            Vec::new()
        };
        Self { n, twiddles }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        debug_assert!(re.len() == n && im.len() == n);
        if n <= 1 {
            return;
        }
        if !n.is_power_of_two() {
            dft(re, im);
            return;
        }
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (s, c) = self.twiddles[k * stride];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * c - im[b] * s;
                    let ti = re[b] * s + im[b] * c;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

fn dft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        for t in 0..n {
            let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
            let (s, c) = libm::sincos(ang);
            out_re[k] += re[t] * c - im[t] * s;
            out_im[k] += re[t] * s + im[t] * c;
        }
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// Power spectrogram `|STFT|²`, `(window_size/2 + 1) × n_frames`.
pub fn power_spectrogram(samples: &[f64], p: &MelParams) -> Matrix {
    let n = samples.len();
    let win = hann_window(p.window_size);
    let plan = FftPlan::new(p.window_size);
    let pad = (p.window_size / 2) as isize;
    let n_frames = p.n_frames(n);
    let n_bins = p.n_bins();
    let mut spec = Matrix::zeros(n_bins, n_frames);
    let mut re = vec![0.0; p.window_size];
    let mut im = vec![0.0; p.window_size];
    for t in 0..n_frames {
        let start = (t * p.hop_size) as isize - pad;
        for (i, (r, w)) in re.iter_mut().zip(&win).enumerate() {
            *r = samples[reflect_index(start + i as isize, n)] * w;
        }
        im.iter_mut().for_each(|v| *v = 0.0);
        plan.run(&mut re, &mut im);
        for k in 0..n_bins {
            spec[(k, t)] = re[k] * re[k] + im[k] * im[k];
        }
    }
    spec
}

/// Log-mel spectrogram of `w`, which must already be at `p.sample_rate`.
pub fn log_mel(w: &Waveform, p: &MelParams) -> Result<MelSpectrogram> {
    p.validate()?;
    if w.sample_rate != p.sample_rate {
        return Err(Error::invalid(alloc::format!(
            "waveform is at {} Hz but mel front end expects {} Hz",
            w.sample_rate,
            p.sample_rate
        )));
    }
    if w.is_empty() {
        return Err(Error::invalid("cannot compute a spectrogram of an empty waveform"));
    }
    let power = power_spectrogram(&w.samples, p);
    let mut values = mel_filterbank(p).matmul(&power)?;
    let floor = p.log_floor;
    for v in values.as_mut_slice() {
        *v = libm::log(v.max(floor));
    }
    Ok(MelSpectrogram { values, params: *p })
}

/// Half-width of the resampling kernel in input-rate samples (64 taps total).
pub const RESAMPLE_HALF_TAPS: usize = 32;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        libm::sin(PI * x) / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel of 64 taps
/// (measured at the lower of the two rates). Output length is
/// `round(len · target / source)`; equal rates return the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let src = f64::from(w.sample_rate);
    let dst = f64::from(target_rate);
    let ratio = dst / src;
    let n_out = libm::round(w.len() as f64 * ratio) as usize;
    // cutoff relative to the input Nyquist; below 1 when downsampling
    let cutoff = ratio.min(1.0);
    let half_width = RESAMPLE_HALF_TAPS as f64 / cutoff;
    let n_in = w.len() as isize;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let t = j as f64 / ratio;
        let lo = libm::ceil(t - half_width) as isize;
        let hi = libm::floor(t + half_width) as isize;
        let mut acc = 0.0;
        for k in lo.max(0)..=hi.min(n_in - 1) {
            let x = t - k as f64;
            let window = 0.5 + 0.5 * libm::cos(PI * x / half_width);
            acc += w.samples[k as usize] * cutoff * sinc(cutoff * x) * window;
        }
        out.push(acc);
    }
    Ok(Waveform {
        samples: out,
        sample_rate: target_rate,
    })
}

/// Length-`round(target_s · rate)` window of `w`: a uniformly random
/// contiguous crop when longer, cyclic repetition when shorter, identity when
/// equal. An empty input yields silence.
pub fn random_crop_or_pad(w: &Waveform, target_s: f64, rng: &mut Rng) -> Result<Waveform> {
    if !(target_s > 0.0 && target_s.is_finite()) {
        return Err(Error::invalid("crop length must be positive"));
    }
    let target = (libm::round(target_s * f64::from(w.sample_rate)) as usize).max(1);
    let n = w.len();
    let samples = if n == target {
        w.samples.clone()
    } else if n == 0 {
        vec![0.0; target]
    } else if n > target {
        let start = rng.gen_range(0..=n - target);
        w.samples[start..start + target].to_vec()
    } else {
        w.samples.iter().copied().cycle().take(target).collect()
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Deterministic center crop (or cyclic pad) used at evaluation time.
pub fn center_crop_or_pad(w: &Waveform, target_s: f64) -> Result<Waveform> {
    if !(target_s > 0.0 && target_s.is_finite()) {
        return Err(Error::invalid("crop length must be positive"));
    }
    let target = (libm::round(target_s * f64::from(w.sample_rate)) as usize).max(1);
    let n = w.len();
    let samples = if n > target {
        let start = (n - target) / 2;
        w.samples[start..start + target].to_vec()
    } else if n == 0 {
        vec![0.0; target]
    } else {
        w.samples.iter().copied().cycle().take(target).collect()
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| amp * libm::sin(2.0 * PI * freq * i as f64 / f64::from(rate)))
                .collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn default_frame_and_bin_counts() {
        let p = MelParams::default();
        let w = Waveform::new(vec![0.0; 44_100], 44_100).unwrap();
        let m = log_mel(&w, &p).unwrap();
        assert_eq!(m.n_mels(), 64);
        assert_eq!(m.n_frames(), 138);
    }

    #[test]
    fn silence_maps_to_floor() {
        let p = MelParams::default();
        let w = Waveform::new(vec![0.0; 44_100], 44_100).unwrap();
        let m = log_mel(&w, &p).unwrap();
        let floor = libm::log(p.log_floor);
        assert!(m.values.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_small_scan() {
        let p = MelParams {
            sample_rate: 16_000,
            window_size: 64,
            hop_size: 16,
            n_mels: 8,
            f_min: 50.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        };
        for len in 1..=5 * p.hop_size {
            let w = Waveform::new((0..len).map(|i| (i as f64 * 0.37).sin()).collect(), 16_000).unwrap();
            let m = log_mel(&w, &p).unwrap();
            assert_eq!(m.n_frames(), 1 + len / p.hop_size, "len {len}");
            assert!(m.values.is_finite());
        }
    }

    #[test]
    fn default_params_frame_count_small_scan() {
        let p = MelParams::default();
        for len in 1..=5 * p.hop_size {
            assert_eq!(p.n_frames(len), 1 + len / 320);
        }
        // spot-check the actual framing on lengths shorter than the pad
        for len in [1, 2, 319, 320, 321, 1599, 1600] {
            let w = Waveform::new(vec![0.25; len], 44_100).unwrap();
            assert_eq!(log_mel(&w, &p).unwrap().n_frames(), 1 + len / 320);
        }
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        let w = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(
            log_mel(&w, &MelParams::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = [
            MelParams {
                f_min: 0.0,
                ..Default::default()
            },
            MelParams {
                f_max: 30_000.0,
                ..Default::default()
            },
            MelParams {
                hop_size: 2048,
                ..Default::default()
            },
            MelParams {
                n_mels: 0,
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn amplitude_scaling_shifts_log_power() {
        let p = MelParams::default();
        let w = sine(1000.0, 44_100, 8000, 0.3);
        let base = log_mel(&w, &p).unwrap();
        let c = 2.5;
        let scaled = log_mel(&w.scaled(c), &p).unwrap();
        let floor = libm::log(p.log_floor);
        let shift = 2.0 * libm::log(c);
        let mut checked = 0;
        for (a, b) in base.values.as_slice().iter().zip(scaled.values.as_slice()) {
            if *a > floor + 1.0 {
                assert!((b - a - shift).abs() < 1e-6, "{a} {b}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn filterbank_shape_properties() {
        let p = MelParams::default();
        let fb = mel_filterbank(&p);
        assert!(fb.as_slice().iter().all(|&v| v >= 0.0));
        let centers = mel_centers(&p);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        assert!(centers.iter().all(|&c| (50.0..=8000.0).contains(&c)));
        // each filter covers a contiguous run of bins
        for m in 0..fb.rows() {
            let nz: Vec<usize> = (0..fb.cols()).filter(|&k| fb[(m, k)] > 0.0).collect();
            if let (Some(first), Some(last)) = (nz.first(), nz.last()) {
                assert_eq!(last - first + 1, nz.len(), "filter {m}");
            }
        }
        // each bin feeds a contiguous run of filters
        for k in 0..fb.cols() {
            let nz: Vec<usize> = (0..fb.rows()).filter(|&m| fb[(m, k)] > 0.0).collect();
            if let (Some(first), Some(last)) = (nz.first(), nz.last()) {
                assert_eq!(last - first + 1, nz.len(), "bin {k}");
            }
        }
    }

    #[test]
    fn tone_lands_in_nearest_filter() {
        let p = MelParams::default();
        let w = sine(1000.0, 44_100, 44_100, 0.5);
        let m = log_mel(&w, &p).unwrap();
        let mid = m.n_frames() / 2;
        let argmax = (0..m.n_mels())
            .max_by(|&a, &b| m.values[(a, mid)].total_cmp(&m.values[(b, mid)]))
            .unwrap();
        // filter centers recomputed from the HTK formula directly
        let lo = 2595.0 * (1.0 + 50.0f64 / 700.0).log10();
        let hi = 2595.0 * (1.0 + 8000.0f64 / 700.0).log10();
        let nearest = (0..64)
            .min_by(|&a, &b| {
                let c = |i: usize| {
                    let mel = lo + (hi - lo) * (i + 1) as f64 / 65.0;
                    (700.0 * (10f64.powf(mel / 2595.0) - 1.0) - 1000.0).abs()
                };
                c(a).total_cmp(&c(b))
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn fft_matches_direct_dft() {
        let n = 16;
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64) - 1.3).collect();
        let (mut re, mut im) = (x.clone(), vec![0.0; n]);
        fft(&mut re, &mut im);
        let (mut re2, mut im2) = (x, vec![0.0; n]);
        dft(&mut re2, &mut im2);
        for k in 0..n {
            assert!((re[k] - re2[k]).abs() < 1e-9 && (im[k] - im2[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_preserves_duration() {
        let w = sine(440.0, 22_050, 22_050, 0.5);
        let up = resample(&w, 44_100).unwrap();
        assert_eq!(up.sample_rate, 44_100);
        assert!((up.len() as i64 - 44_100).abs() <= 1);
        let down = resample(&up, 16_000).unwrap();
        assert!((down.len() as i64 - 16_000).abs() <= 1);
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let w = sine(300.0, 16_000, 1234, 0.7);
        assert_eq!(resample(&w, 16_000).unwrap(), w);
        assert!(resample(&w, 0).is_err());
    }

    #[test]
    fn crop_longer_is_deterministic_window() {
        let rate = 100;
        let w = Waveform::new((0..30 * rate).map(|i| i as f64).collect(), rate as u32).unwrap();
        let a = random_crop_or_pad(&w, 20.0, &mut substream(7, "crop")).unwrap();
        let b = random_crop_or_pad(&w, 20.0, &mut substream(7, "crop")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20 * rate);
        let start = a.samples[0] as usize;
        assert!(start <= 10 * rate);
        assert!(a.samples.iter().enumerate().all(|(i, &s)| s == (start + i) as f64));
    }

    #[test]
    fn crop_shorter_repeats_cyclically() {
        let rate = 10u32;
        let w = Waveform::new((0..40).map(|i| i as f64).collect(), rate).unwrap();
        let out = random_crop_or_pad(&w, 10.0, &mut substream(1, "x")).unwrap();
        assert_eq!(out.len(), 100);
        assert!(out.samples.iter().enumerate().all(|(i, &s)| s == (i % 40) as f64));
        let same = random_crop_or_pad(&w, 4.0, &mut substream(1, "x")).unwrap();
        assert_eq!(same, w);
        assert!(random_crop_or_pad(&w, 0.0, &mut substream(1, "x")).is_err());
    }

    #[test]
    fn center_crop() {
        let w = Waveform::new((0..10).map(|i| i as f64).collect(), 1).unwrap();
        assert_eq!(center_crop_or_pad(&w, 4.0).unwrap().samples, [3.0, 4.0, 5.0, 6.0]);
    }
}
