//! Batch sampling, Adam with step decay, and the contrastive training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMatrix, Modality};
use crate::error::{Error, Result};
use crate::jointspace::{contrastive_loss, loss_gradients, LossGrads, ProjectionModel, ScaleConvention};
use crate::rng::{substream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Initial temperature.
    pub tau: f64,
    pub proj_dim: usize,
    pub freeze_scale: bool,
    pub scale_convention: ScaleConvention,
    pub normalize: bool,
    /// Encode each clip once instead of drawing fresh crops every epoch.
    pub static_crops: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 45,
            lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tau: 0.007,
            proj_dim: 1024,
            freeze_scale: false,
            scale_convention: ScaleConvention::Inverse,
            normalize: true,
            static_crops: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail("lr_decay_factor must be in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail("adam_eps must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if self.proj_dim == 0 {
            return fail("proj_dim must be at least 1");
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a 0-indexed epoch.
///
/// Computed as `lr / (1/factor)^k` so that decimal factors such as 0.1 land
/// exactly on `1e-5`, `1e-6`, ... for `lr = 1e-4`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_every) as i32;
    if k == 0 || cfg.lr_decay_factor == 1.0 {
        return cfg.lr;
    }
    cfg.lr / libm::pow(1.0 / cfg.lr_decay_factor, f64::from(k))
}

/// Random permutation of `0..n_pairs` cut into consecutive batches; a trailing
/// partial batch survives only if it holds at least two pairs.
pub fn make_batches(n_pairs: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|b| b.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One bias-corrected Adam update over `params` using the moments at
    /// `offset..offset + params.len()`. Does not advance `t`.
    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64], lr: f64, hp: &AdamParams) {
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(hp.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(hp.beta2, f64::from(t));
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + hp.eps);
        }
    }

    /// Adam step on a single flat parameter slice.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64, hp: &AdamParams) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adam", self.m.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { batch: Vec::new() });
        }
        self.t += 1;
        self.update(0, params, grads, lr, hp);
        Ok(())
    }
}

/// Adam step on every model parameter followed by the scale clamp. With
/// `freeze_scale` the temperature is left untouched.
pub fn adam_step(
    model: &mut ProjectionModel,
    grads: &LossGrads,
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
    freeze_scale: bool,
) -> Result<()> {
    if state.m.len() != model.n_params() {
        return Err(Error::shape("adam state", model.n_params(), state.m.len()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient { batch: Vec::new() });
    }
    state.t += 1;
    let mut offset = 0;
    let grad_slices = grads.slices();
    let n_slices = grad_slices.len();
    for (k, (p, g)) in model.slices_mut().into_iter().zip(grad_slices).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape("adam grads", p.len(), g.len()));
        }
        if !(freeze_scale && k == n_slices - 1) {
            state.update(offset, p, g, lr, hp);
        }
        offset += p.len();
    }
    model.clamp_scale();
    Ok(())
}

/// Aligned (audio, text) feature batches for training.
pub trait PairSource {
    type Error: From<Error>;

    fn n_pairs(&self) -> usize;
    fn audio_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    /// Features for the pairs at `indices`; `epoch` selects the crop draw.
    fn batch(
        &self,
        epoch: usize,
        indices: &[usize],
    ) -> core::result::Result<(FeatureMatrix, FeatureMatrix), Self::Error>;
}

/// Precomputed features; every epoch sees the same rows.
#[derive(Debug, Clone)]
pub struct StaticPairs {
    pub audio: FeatureMatrix,
    pub text: FeatureMatrix,
}

impl StaticPairs {
    pub fn new(audio: FeatureMatrix, text: FeatureMatrix) -> Result<Self> {
        if audio.modality != Modality::Audio || text.modality != Modality::Text {
            return Err(Error::invalid("expected audio then text features"));
        }
        if audio.n() != text.n() {
            return Err(Error::shape("paired features", audio.n(), text.n()));
        }
        Ok(Self { audio, text })
    }
}

impl PairSource for StaticPairs {
    type Error = Error;

    fn n_pairs(&self) -> usize {
        self.audio.n()
    }

    fn audio_dim(&self) -> usize {
        self.audio.dim()
    }

    fn text_dim(&self) -> usize {
        self.text.dim()
    }

    fn batch(&self, _epoch: usize, indices: &[usize]) -> Result<(FeatureMatrix, FeatureMatrix)> {
        Ok((self.audio.select(indices), self.text.select(indices)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Logit scale after the epoch's last step.
    pub scale: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    /// Lowest validation loss, or the final model without validation data.
    pub best_model: ProjectionModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Initial model for `cfg` drawn from the `init/` substream.
pub fn init_model(cfg: &TrainConfig, audio_dim: usize, text_dim: usize) -> Result<ProjectionModel> {
    let mut model = ProjectionModel::init(
        cfg.proj_dim,
        audio_dim,
        text_dim,
        cfg.tau,
        cfg.scale_convention,
        &mut substream(cfg.seed, "init/"),
    )?;
    model.normalize = cfg.normalize;
    Ok(model)
}

/// Mean contrastive loss over consecutive fixed batches (no shuffling).
pub fn mean_loss<S: PairSource>(
    model: &ProjectionModel,
    source: &S,
    batch_size: usize,
) -> core::result::Result<Option<f64>, S::Error> {
    let order: Vec<usize> = (0..source.n_pairs()).collect();
    let batches: Vec<&[usize]> = order.chunks(batch_size.max(1)).filter(|b| b.len() >= 2).collect();
    if batches.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for b in &batches {
        let (a, t) = source.batch(0, b)?;
        total += contrastive_loss(&model.logits(&a, &t)?);
    }
    Ok(Some(total / batches.len() as f64))
}

/// Runs the full schedule. `on_epoch` sees every record as it is produced.
pub fn train<S: PairSource, V: PairSource<Error = S::Error>>(
    source: &S,
    val: Option<&V>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> core::result::Result<TrainOutcome, S::Error> {
    cfg.validate()?;
    if source.n_pairs() < 2 {
        return Err(Error::invalid("training needs at least two pairs").into());
    }
    let mut model = init_model(cfg, source.audio_dim(), source.text_dim())?;
    let mut state = AdamState::new(model.n_params());
    let hp = AdamParams::from(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ProjectionModel)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let batches = make_batches(
            source.n_pairs(),
            cfg.batch_size,
            &mut substream(cfg.seed, &format!("batch/{epoch}")),
        );
        let mut total = 0.0;
        for batch in &batches {
            let (a, t) = source.batch(epoch, batch)?;
            let (loss, grads) = loss_gradients(&model, &a, &t)?;
            adam_step(&mut model, &grads, &mut state, lr, &hp, cfg.freeze_scale).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::NonFiniteGradient { batch: batch.clone() },
                other => other,
            })?;
            total += loss;
        }
        let val_loss = match val {
            Some(v) => mean_loss(&model, v, cfg.batch_size)?,
            None => None,
        };
        if let Some(vl) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, model.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            mean_loss: if batches.is_empty() {
                0.0
            } else {
                total / batches.len() as f64
            },
            lr,
            scale: model.scale(),
            val_loss,
        };
        on_epoch(&record);
        history.push(record);
    }

    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs - 1, model.clone()),
    };
    Ok(TrainOutcome {
        model,
        best_model,
        best_epoch,
        history,
    })
}
