//! Joint audio-text embedding space.
//!
//! Encoder features are mapped by learnable affine projections into a shared
//! `d`-dimensional space and L2-normalized. Pairwise cosines scaled by the
//! logit scale `s = exp(log_scale)` form the similarity matrix `C` (rows are
//! texts, columns are audios), and training minimizes the symmetric
//! cross-entropy
//!
//! ```text
//! L = ½ · [ mean_i(lse_j C[i,j] − C[i,i]) + mean_j(lse_i C[i,j] − C[j,j]) ]
//! ```
//!
//! whose analytic gradient with respect to every parameter is provided by
//! [`loss_gradients`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMatrix, Modality};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::rng::Rng;

/// Default inverse-temperature clamp.
pub const SCALE_BOUNDS: (f64, f64) = (1.0, 1000.0);
/// Clamp used when the temperature multiplies the logits literally.
pub const LITERAL_SCALE_BOUNDS: (f64, f64) = (1e-4, 1000.0);

/// How the temperature `τ` enters the logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// logits = cos / τ
    #[default]
    Inverse,
    /// logits = τ · cos
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionModel {
    /// `d × V`
    pub w_audio: Matrix,
    pub b_audio: Vec<f64>,
    /// `d × U`
    pub w_text: Matrix,
    pub b_text: Vec<f64>,
    pub log_scale: f64,
    /// Clamp range for `exp(log_scale)`.
    pub scale_bounds: (f64, f64),
    /// L2-normalize projected rows before the similarity.
    pub normalize: bool,
}

/// Gradients with the same layout as [`ProjectionModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub w_audio: Matrix,
    pub b_audio: Vec<f64>,
    pub w_text: Matrix,
    pub b_text: Vec<f64>,
    pub log_scale: f64,
}

impl LossGrads {
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.w_audio.as_slice(),
            &self.b_audio,
            self.w_text.as_slice(),
            &self.b_text,
            core::slice::from_ref(&self.log_scale),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..=limit))
}

impl ProjectionModel {
    /// Uniform Glorot weights, zero biases, `log_scale` from the initial
    /// temperature `tau` under `convention`, clamped.
    pub fn init(
        proj_dim: usize,
        audio_dim: usize,
        text_dim: usize,
        tau: f64,
        convention: ScaleConvention,
        rng: &mut Rng,
    ) -> Result<Self> {
        if proj_dim == 0 || audio_dim == 0 || text_dim == 0 {
            return Err(Error::invalid("projection and feature dims must be positive"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let (scale, bounds) = match convention {
            ScaleConvention::Inverse => (1.0 / tau, SCALE_BOUNDS),
            ScaleConvention::Literal => (tau, LITERAL_SCALE_BOUNDS),
        };
        let w_audio = xavier(proj_dim, audio_dim, rng);
        let w_text = xavier(proj_dim, text_dim, rng);
        let mut model = Self {
            w_audio,
            b_audio: vec![0.0; proj_dim],
            w_text,
            b_text: vec![0.0; proj_dim],
            log_scale: libm::log(scale),
            scale_bounds: bounds,
            normalize: true,
        };
        model.clamp_scale();
        Ok(model)
    }

    pub fn proj_dim(&self) -> usize {
        self.w_audio.rows()
    }

    pub fn audio_dim(&self) -> usize {
        self.w_audio.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.w_text.cols()
    }

    pub fn scale(&self) -> f64 {
        libm::exp(self.log_scale)
    }

    pub fn clamp_scale(&mut self) {
        let (lo, hi) = self.scale_bounds;
        self.log_scale = self.log_scale.clamp(libm::log(lo), libm::log(hi));
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Parameters in checkpoint order: `W_a, b_a, W_t, b_t, log_scale`.
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            self.w_audio.as_slice(),
            &self.b_audio,
            self.w_text.as_slice(),
            &self.b_text,
            core::slice::from_ref(&self.log_scale),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_audio.as_mut_slice(),
            &mut self.b_audio,
            self.w_text.as_mut_slice(),
            &mut self.b_text,
            core::slice::from_mut(&mut self.log_scale),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn weights(&self, modality: Modality) -> (&Matrix, &[f64]) {
        match modality {
            Modality::Audio => (&self.w_audio, &self.b_audio),
            Modality::Text => (&self.w_text, &self.b_text),
        }
    }

    /// Similarity logits for aligned feature batches.
    pub fn logits(&self, audio: &FeatureMatrix, text: &FeatureMatrix) -> Result<SimilarityMatrix> {
        let e_a = project(self, audio)?;
        let e_t = project(self, text)?;
        similarity(&e_t, &e_a, self.scale())
    }
}

/// Projected rows, optionally L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Matrix,
    pub normalized: bool,
}

impl EmbeddingMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Wraps externally produced rows, normalizing them.
    pub fn normalized_from(mut values: Matrix) -> Self {
        for i in 0..values.rows() {
            crate::linalg::normalize_in_place(values.row_mut(i));
        }
        Self {
            values,
            normalized: true,
        }
    }
}

/// `C[i][j] = s · ⟨text_i, audio_j⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub logits: Matrix,
}

impl SimilarityMatrix {
    pub fn new(logits: Matrix) -> Result<Self> {
        if logits.rows() != logits.cols() {
            return Err(Error::shape("SimilarityMatrix", logits.rows(), logits.cols()));
        }
        Ok(Self { logits })
    }

    pub fn n(&self) -> usize {
        self.logits.rows()
    }

    pub fn transposed(&self) -> Self {
        Self {
            logits: self.logits.transpose(),
        }
    }
}

/// `W x + b` for every feature row, without normalization.
fn affine(model: &ProjectionModel, feats: &FeatureMatrix) -> Result<Matrix> {
    let (w, b) = model.weights(feats.modality);
    if feats.dim() != w.cols() {
        return Err(Error::shape("project", w.cols(), feats.dim()));
    }
    let mut z = feats.values.matmul_transposed(w)?;
    for i in 0..z.rows() {
        for (v, bias) in z.row_mut(i).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(z)
}

/// Projects features of either modality into the joint space.
pub fn project(model: &ProjectionModel, feats: &FeatureMatrix) -> Result<EmbeddingMatrix> {
    let mut values = affine(model, feats)?;
    if model.normalize {
        for i in 0..values.rows() {
            crate::linalg::normalize_in_place(values.row_mut(i));
        }
    }
    Ok(EmbeddingMatrix {
        values,
        normalized: model.normalize,
    })
}

pub fn similarity(e_text: &EmbeddingMatrix, e_audio: &EmbeddingMatrix, scale: f64) -> Result<SimilarityMatrix> {
    if e_text.n() != e_audio.n() {
        return Err(Error::shape("similarity rows", e_text.n(), e_audio.n()));
    }
    if e_text.dim() != e_audio.dim() {
        return Err(Error::shape("similarity dim", e_text.dim(), e_audio.dim()));
    }
    let mut logits = e_text.values.matmul_transposed(&e_audio.values)?;
    logits.scale(scale);
    SimilarityMatrix::new(logits)
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(values.map(|v| libm::exp(v - max)).sum::<f64>())
}

fn row_lse(c: &Matrix) -> Vec<f64> {
    (0..c.rows()).map(|i| logsumexp(c.row(i).iter().copied())).collect()
}

fn col_lse(c: &Matrix) -> Vec<f64> {
    (0..c.cols())
        .map(|j| logsumexp((0..c.rows()).map(move |i| c[(i, j)])))
        .collect()
}

/// Symmetric cross-entropy over rows (text queries) and columns (audio
/// queries), matched pairs on the diagonal. Non-negative.
pub fn contrastive_loss(c: &SimilarityMatrix) -> f64 {
    let n = c.n();
    if n == 0 {
        return 0.0;
    }
    let m = &c.logits;
    let rows = row_lse(m);
    let cols = col_lse(m);
    let mut row_term = 0.0;
    let mut col_term = 0.0;
    for i in 0..n {
        row_term += rows[i] - m[(i, i)];
        col_term += cols[i] - m[(i, i)];
    }
    0.5 * (row_term / n as f64 + col_term / n as f64)
}

/// `∂L/∂C = (P_row − I + P_col − I) / 2N`.
fn loss_wrt_logits(c: &SimilarityMatrix) -> Matrix {
    let n = c.n();
    let m = &c.logits;
    let rows = row_lse(m);
    let cols = col_lse(m);
    let k = 0.5 / n as f64;
    Matrix::from_fn(n, n, |i, j| {
        let p_row = libm::exp(m[(i, j)] - rows[i]);
        let p_col = libm::exp(m[(i, j)] - cols[j]);
        let eye = if i == j { 2.0 } else { 0.0 };
        k * (p_row + p_col - eye)
    })
}

/// Pulls `∂L/∂e` back through row normalization: `(g − ê(ê·g)) / ‖z‖`.
fn normalization_backward(z: &Matrix, grad_e: &mut Matrix) {
    for i in 0..z.rows() {
        let zi = z.row(i);
        let nz = norm(zi);
        if nz == 0.0 {
            continue;
        }
        let proj = dot(zi, grad_e.row(i)) / nz;
        for (g, &zv) in grad_e.row_mut(i).iter_mut().zip(zi) {
            *g = (*g - zv / nz * proj) / nz;
        }
    }
}

/// Loss of the aligned batch and its exact gradient with respect to every
/// model parameter. The loss is computed by [`project`], [`similarity`] and
/// [`contrastive_loss`] exactly as in evaluation.
pub fn loss_gradients(
    model: &ProjectionModel,
    feats_audio: &FeatureMatrix,
    feats_text: &FeatureMatrix,
) -> Result<(f64, LossGrads)> {
    if feats_audio.modality != Modality::Audio || feats_text.modality != Modality::Text {
        return Err(Error::invalid("expected audio then text features"));
    }
    if feats_audio.n() != feats_text.n() {
        return Err(Error::shape("batch size", feats_audio.n(), feats_text.n()));
    }
    let z_a = affine(model, feats_audio)?;
    let z_t = affine(model, feats_text)?;
    let e_a = project(model, feats_audio)?;
    let e_t = project(model, feats_text)?;
    let s = model.scale();
    let c = similarity(&e_t, &e_a, s)?;
    let loss = contrastive_loss(&c);

    let g = loss_wrt_logits(&c);
    // d_log_scale = s · ∂L/∂s = Σ G ∘ C
    let d_log_scale: f64 = g.as_slice().iter().zip(c.logits.as_slice()).map(|(a, b)| a * b).sum();
    let mut grad_et = g.matmul(&e_a.values)?;
    grad_et.scale(s);
    let mut grad_ea = g.transposed_matmul(&e_t.values)?;
    grad_ea.scale(s);
    if model.normalize {
        normalization_backward(&z_t, &mut grad_et);
        normalization_backward(&z_a, &mut grad_ea);
    }
    let grads = LossGrads {
        w_audio: grad_ea.transposed_matmul(&feats_audio.values)?,
        b_audio: grad_ea.column_sums(),
        w_text: grad_et.transposed_matmul(&feats_text.values)?,
        b_text: grad_et.column_sums(),
        log_scale: d_log_scale,
    };
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Mutually exclusive classes.
    #[default]
    Softmax,
    /// Independent labels.
    Sigmoid,
}

impl core::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Head::Softmax),
            "sigmoid" => Ok(Head::Sigmoid),
            other => Err(Error::invalid(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Argmax for softmax; every class with probability ≥ 0.5 for sigmoid.
    pub predicted: Vec<usize>,
}

/// Turns per-class logits into probabilities and a decision.
pub fn classify_logits(logits: Vec<f64>, head: Head) -> Result<ZeroShotResult> {
    if logits.is_empty() {
        return Err(Error::invalid("zero-shot classification needs at least one class"));
    }
    let (probabilities, predicted) = match head {
        Head::Softmax => {
            let lse = logsumexp(logits.iter().copied());
            let p: Vec<f64> = logits.iter().map(|l| libm::exp(l - lse)).collect();
            // first maximal logit wins ties
            let best = logits
                .iter()
                .enumerate()
                .fold(0, |best, (i, &l)| if l > logits[best] { i } else { best });
            (p, vec![best])
        }
        Head::Sigmoid => {
            let p: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
            let on = p
                .iter()
                .enumerate()
                .filter(|(_, &p)| p >= 0.5)
                .map(|(i, _)| i)
                .collect();
            (p, on)
        }
    };
    Ok(ZeroShotResult {
        logits,
        probabilities,
        predicted,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Scores one projected audio embedding against class prompts.
///
/// `encode_text` maps a prompt to text-encoder features; the prompts are
/// projected with the model's text branch and compared by scaled cosine.
pub fn zero_shot_classify(
    model: &ProjectionModel,
    audio_embedding: &[f64],
    class_texts: &[String],
    encode_text: impl Fn(&str) -> Result<Vec<f64>>,
    head: Head,
) -> Result<ZeroShotResult> {
    if class_texts.is_empty() {
        return Err(Error::invalid("zero-shot classification needs at least one class"));
    }
    if audio_embedding.len() != model.proj_dim() {
        return Err(Error::shape(
            "zero_shot audio embedding",
            model.proj_dim(),
            audio_embedding.len(),
        ));
    }
    let rows = class_texts.iter().map(|t| encode_text(t)).collect::<Result<Vec<_>>>()?;
    let feats = FeatureMatrix::new(Matrix::from_rows(model.text_dim(), rows)?, Modality::Text);
    let e_t = project(model, &feats)?;
    let a_norm = norm(audio_embedding);
    let s = model.scale();
    let logits = e_t
        .values
        .iter_rows()
        .map(|row| {
            let denom = norm(row) * a_norm;
            if denom == 0.0 {
                0.0
            } else {
                s * dot(row, audio_embedding) / denom
            }
        })
        .collect();
    classify_logits(logits, head)
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = "this is a sound of {label}";

/// Substitutes `label` into every `{label}` placeholder of `template`.
pub fn build_prompt(label: &str, template: &str) -> Result<String> {
    let label = label.trim();
    if label.is_empty() {
        return Err(Error::invalid("label must not be empty"));
    }
    if !template.contains("{label}") {
        return Err(Error::invalid(format!(
            "template {template:?} has no {{label}} placeholder"
        )));
    }
    Ok(template.replace("{label}", label))
}
