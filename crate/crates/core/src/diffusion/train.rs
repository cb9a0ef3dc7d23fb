use super::{forward_sample, same_shape, DenoiserModel, DiffusionError, NoiseSchedule, TensorRole, VideoTensor};
use crate::splatfit::TrainingPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Clean sample `x0` with its condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<(VideoTensor, VideoTensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VdmGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Step drawn for each batch element, in batch order.
    pub steps: Vec<usize>,
}

/// Draws, for each element in batch order, a step uniform in `1..=T` and
/// then its noise, all from one stream seeded by `seed`.
pub fn draw_noise(batch: &Batch, sched: &NoiseSchedule, seed: u64) -> Vec<(usize, VideoTensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batch
        .items
        .iter()
        .map(|(x0, _)| {
            let t = rng.random_range(1..=sched.steps());
            (t, VideoTensor::gaussian(x0.shape(), TensorRole::Epsilon, &mut rng))
        })
        .collect()
}

/// Loss and exact gradient of the batch-mean denoising loss.
pub fn grad_vdm(model: &DenoiserModel, batch: &Batch, sched: &NoiseSchedule, seed: u64) -> Result<VdmGradient, DiffusionError> {
    if batch.items.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let draws = draw_noise(batch, sched, seed);
    grad_with_noise(model, batch, sched, &draws)
}

pub fn grad_with_noise(
    model: &DenoiserModel,
    batch: &Batch,
    sched: &NoiseSchedule,
    draws: &[(usize, VideoTensor)],
) -> Result<VdmGradient, DiffusionError> {
    let n_items = batch.items.len() as f64;
    let per: Vec<Result<(f64, Vec<f64>), DiffusionError>> = batch
        .items
        .par_iter()
        .zip(draws.par_iter())
        .map(|((x0, cond), (t, eps))| {
            let xt = forward_sample(x0, *t, eps, sched)?;
            let tr = model.forward(&xt, *t, cond)?;
            let n = eps.len().max(1) as f64;
            let mut loss = 0.0;
            let dout: Vec<f64> = tr
                .out
                .iter()
                .zip(&eps.data)
                .map(|(p, e)| {
                    let d = p - e;
                    loss += d * d;
                    2.0 * d / (n * n_items)
                })
                .collect();
            let mut g = vec![0.0; model.param_count()];
            model.backward(&tr, &dout, &mut g);
            Ok((loss / (n * n_items), g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for r in per {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(DiffusionError::NonFinite("gradient".into()));
    }
    Ok(VdmGradient {
        loss,
        grad,
        steps: draws.iter().map(|(t, _)| *t).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            step_size: 0.02,
            batch: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub model: DenoiserModel,
    pub loss_curve: Vec<f64>,
}

/// Plain SGD. Each step samples `batch` indices with replacement, then the
/// step and noise per element, all from a stream derived from the seed and
/// the step number.
pub fn train_tensors(
    model: &DenoiserModel,
    data: &[(VideoTensor, VideoTensor)],
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainResult, DiffusionError> {
    sched.validate()?;
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    for (x0, c) in data {
        same_shape(x0, &data[0].0, "training samples")?;
        same_shape(c, &data[0].1, "training conditions")?;
    }
    if config.batch == 0 || !(config.step_size.is_finite() && config.step_size > 0.0) {
        return Err(DiffusionError::NonFinite("training config needs batch >= 1 and a positive step size".into()));
    }
    let mut model = model.clone();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64);
        let batch = Batch {
            items: (0..config.batch).map(|_| data[rng.random_range(0..data.len())].clone()).collect(),
        };
        let g = grad_vdm(&model, &batch, sched, rng.random())?;
        for (p, d) in model.params.iter_mut().zip(&g.grad) {
            *p -= config.step_size * d;
        }
        curve.push(g.loss);
    }
    Ok(TrainResult { model, loss_curve: curve })
}

/// Trains on pairs with the target as the clean sample and the rendering as
/// the condition.
pub fn train(model: &DenoiserModel, pairs: &[TrainingPair], sched: &NoiseSchedule, config: &TrainConfig) -> Result<TrainResult, DiffusionError> {
    let data: Vec<_> = pairs
        .iter()
        .map(|p| {
            (
                VideoTensor::from_frames(&p.target, TensorRole::X0),
                VideoTensor::from_frames(&p.condition, TensorRole::Condition),
            )
        })
        .collect();
    train_tensors(model, &data, sched, config)
}

/// Trailing moving average over `window` entries.
pub fn smoothed(curve: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    curve
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            if i >= w {
                acc -= curve[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}
