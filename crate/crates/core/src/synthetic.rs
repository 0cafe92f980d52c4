//! Synthetic paired features with a known alignment.
//!
//! Each pair shares a latent vector `z_i`; audio features are `A z_i` and text
//! features `B z_i` for fixed random maps `A`, `B`. Without noise, a pair's
//! two views are linearly recoverable from each other, so a linear projection
//! model can separate every pair.

use rand::Rng as _;

use crate::encoders::{FeatureMatrix, Modality};
use crate::linalg::Matrix;
use crate::rng::{substream, Rng};
use crate::training::StaticPairs;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparableSpec {
    pub n_pairs: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for SeparableSpec {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            latent_dim: 8,
            audio_dim: 32,
            text_dim: 48,
            seed: 2022,
        }
    }
}

/// Standard normal draw (Box-Muller).
pub fn gaussian(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

/// Builds the corpus. The maps depend only on `seed`, the latents on `seed`
/// and `n_pairs`.
pub fn separable_corpus(spec: &SeparableSpec) -> StaticPairs {
    let a = gaussian_matrix(
        spec.audio_dim,
        spec.latent_dim,
        &mut substream(spec.seed, "synthetic/audio-map"),
    );
    let b = gaussian_matrix(
        spec.text_dim,
        spec.latent_dim,
        &mut substream(spec.seed, "synthetic/text-map"),
    );
    let z = gaussian_matrix(
        spec.n_pairs,
        spec.latent_dim,
        &mut substream(spec.seed, "synthetic/latents"),
    );
    let audio = z.matmul_transposed(&a).expect("latent dims agree");
    let text = z.matmul_transposed(&b).expect("latent dims agree");
    StaticPairs {
        audio: FeatureMatrix::new(audio, Modality::Audio),
        text: FeatureMatrix::new(text, Modality::Text),
    }
}
