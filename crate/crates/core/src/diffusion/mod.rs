//! Conditional denoising diffusion at toy scale: linear noise schedule,
//! forward process, a small convolutional noise predictor with a hand-written
//! backward pass, seeded SGD training and an ancestral sampler.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use model::{time_embedding, Architecture, DenoiserModel};
pub use train::{draw_noise, grad_vdm, grad_with_noise, smoothed, train, train_tensors, Batch, TrainConfig, TrainResult, VdmGradient};

use crate::scene::{Frame, FrameSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {t} outside 1..={steps}")]
    BadTimestep { t: usize, steps: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty training set")]
    EmptyDataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// `beta[t-1]` and `alpha_bar[t-1]` hold β_t and ᾱ_t for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::BadTimestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Largest deviation of `alpha_bar` from the running product of `1 − β`.
    pub fn consistency_error(&self) -> f64 {
        let mut prod = 1.0;
        let mut worst: f64 = 0.0;
        for (b, a) in self.beta.iter().zip(&self.alpha_bar) {
            prod *= 1.0 - b;
            worst = worst.max((prod - a).abs());
        }
        worst
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.beta.is_empty() || self.beta.len() != self.alpha_bar.len() {
            return Err(DiffusionError::InvalidSchedule("beta and alpha_bar must be nonempty and equal length".into()));
        }
        if self.beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule("every beta must lie in (0, 1)".into()));
        }
        if self.alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(DiffusionError::InvalidSchedule("alpha_bar must strictly decrease".into()));
        }
        if self.consistency_error() > 1e-12 {
            return Err(DiffusionError::InvalidSchedule("alpha_bar is not the running product of 1 - beta".into()));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidSchedule("steps must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let mut prod = 1.0;
    let alpha_bar = beta
        .iter()
        .map(|b| {
            prod *= 1.0 - b;
            prod
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha_bar })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    X0,
    Xt,
    Epsilon,
    Condition,
}

/// Frames × height × width × channels, channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub role: TensorRole,
}

impl VideoTensor {
    pub fn zeros(shape: [usize; 4], role: TensorRole) -> Self {
        let [frames, height, width, channels] = shape;
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
            role,
        }
    }

    pub fn filled(shape: [usize; 4], value: f64, role: TensorRole) -> Self {
        let mut t = Self::zeros(shape, role);
        t.data.fill(value);
        t
    }

    /// Unit Gaussian entries from `rng`.
    pub fn gaussian(shape: [usize; 4], role: TensorRole, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::zeros(shape, role);
        for v in &mut t.data {
            *v = StandardNormal.sample(rng);
        }
        t
    }

    pub fn seeded_gaussian(shape: [usize; 4], role: TensorRole, seed: u64) -> Self {
        Self::gaussian(shape, role, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_role(mut self, role: TensorRole) -> Self {
        self.role = role;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// RGB in [0, 1] mapped to [−1, 1].
    pub fn from_frames(seq: &FrameSequence, role: TensorRole) -> Self {
        let mut t = Self::zeros([seq.len(), seq.height as usize, seq.width as usize, 3], role);
        let mut i = 0;
        for f in &seq.frames {
            for v in &f.rgb {
                t.data[i] = 2.0 * v - 1.0;
                i += 1;
            }
        }
        t
    }

    /// Inverse of [`VideoTensor::from_frames`], clamped to [0, 1]. Depth is
    /// left at zero and instances empty.
    pub fn to_frames(&self, times: &[f64]) -> FrameSequence {
        assert_eq!(self.channels, 3, "frames need three channels");
        let n = self.height * self.width;
        let frames = (0..self.frames)
            .map(|f| {
                let mut fr = Frame::filled(self.width as u32, self.height as u32, [0.0; 3], 0.0);
                for (o, v) in fr.rgb.iter_mut().zip(&self.data[f * n * 3..(f + 1) * n * 3]) {
                    *o = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                }
                fr
            })
            .collect();
        FrameSequence {
            width: self.width as u32,
            height: self.height as u32,
            frames,
            times: (0..self.frames).map(|i| times.get(i).copied().unwrap_or(i as f64)).collect(),
            instance_labels: Vec::new(),
        }
    }
}

fn same_shape(a: &VideoTensor, b: &VideoTensor, what: &str) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn forward_sample(x0: &VideoTensor, t: usize, eps: &VideoTensor, sched: &NoiseSchedule) -> Result<VideoTensor, DiffusionError> {
    same_shape(x0, eps, "x0 and eps")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(VideoTensor {
        data: x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect(),
        role: TensorRole::Xt,
        ..x0.clone()
    })
}

/// Anything that predicts the noise in `x_t` given the step and condition.
pub trait EpsPredictor: Sync {
    fn predict(&self, x_t: &VideoTensor, t: usize, cond: &VideoTensor) -> Result<VideoTensor, DiffusionError>;
}

/// Exact noise predictor for a dataset holding the single point `x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsOracle {
    pub x0: VideoTensor,
    pub schedule: NoiseSchedule,
}

impl EpsPredictor for EpsOracle {
    fn predict(&self, x_t: &VideoTensor, t: usize, _cond: &VideoTensor) -> Result<VideoTensor, DiffusionError> {
        same_shape(x_t, &self.x0, "x_t and oracle point")?;
        let ab = self.schedule.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(VideoTensor {
            data: x_t.data.iter().zip(&self.x0.data).map(|(x, p)| (x - a * p) / b).collect(),
            role: TensorRole::Epsilon,
            ..x_t.clone()
        })
    }
}

/// Mean squared error between `eps` and the prediction on the noised input.
pub fn vdm_loss(
    model: &dyn EpsPredictor,
    x0: &VideoTensor,
    cond: &VideoTensor,
    t: usize,
    eps: &VideoTensor,
    sched: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    let xt = forward_sample(x0, t, eps, sched)?;
    let pred = model.predict(&xt, t, cond)?;
    same_shape(&pred, eps, "prediction and eps")?;
    let n = eps.len().max(1) as f64;
    let loss = pred.data.iter().zip(&eps.data).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(DiffusionError::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Ancestral sampling from pure noise, with no noise injected at `t = 1`.
pub fn ddpm_sample(
    model: &dyn EpsPredictor,
    cond: &VideoTensor,
    sched: &NoiseSchedule,
    seed: u64,
    shape: [usize; 4],
) -> Result<VideoTensor, DiffusionError> {
    sched.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = VideoTensor::gaussian(shape, TensorRole::Xt, &mut rng);
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict(&x, t, cond)?;
        same_shape(&eps, &x, "prediction and iterate")?;
        let beta = sched.beta_at(t);
        let ab = sched.alpha_bar_at(t);
        let k = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        let sigma = beta.sqrt();
        for (xv, e) in x.data.iter_mut().zip(&eps.data) {
            let mean = (*xv - k * e) * inv;
            *xv = if t > 1 {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + sigma * z
            } else {
                mean
            };
        }
        if !x.is_finite() {
            return Err(DiffusionError::NonFinite(format!("iterate at t = {t}")));
        }
    }
    Ok(x.with_role(TensorRole::X0))
}

#[cfg(test)]
mod tests;
