use super::*;
use proptest::prelude::*;

fn small_arch(temporal: bool) -> Architecture {
    Architecture {
        x_channels: 3,
        cond_channels: 3,
        hidden: [4, 4],
        time_dim: 4,
        temporal,
    }
}

#[test]
fn schedule_examples() {
    let s = make_schedule(1, 0.3, 0.5, ScheduleKind::Linear).unwrap();
    assert_eq!(s.beta, vec![0.3]);
    assert_eq!(s.alpha_bar, vec![0.7]);

    let b = 0.05;
    let s = make_schedule(20, b, b, ScheduleKind::Linear).unwrap();
    for t in 1..=20 {
        assert!((s.alpha_bar_at(t) - (1.0 - b).powi(t as i32)).abs() < 1e-14);
    }

    let s = make_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
    assert_eq!(s.beta_at(1), 1e-4);
    assert!((s.beta_at(1000) - 2e-2).abs() < 1e-15);
    assert!(s.alpha_bar_at(1000) < 1e-4);
    s.validate().unwrap();
    assert_eq!(s.consistency_error(), 0.0);
}

#[test]
fn schedule_errors() {
    for (t, a, b) in [(0, 0.1, 0.2), (5, 0.0, 0.2), (5, 0.3, 0.2), (5, 0.1, 1.0)] {
        assert!(matches!(make_schedule(t, a, b, ScheduleKind::Linear), Err(DiffusionError::InvalidSchedule(_))));
    }
    let mut s = make_schedule(4, 0.1, 0.2, ScheduleKind::Linear).unwrap();
    s.alpha_bar[2] += 1e-9;
    assert!(s.validate().is_err());
}

proptest! {
    #[test]
    fn schedule_invariants(steps in 1usize..400, a in 1e-5..0.3f64, span in 0.0..0.6f64) {
        let s = make_schedule(steps, a, a + span, ScheduleKind::Linear).unwrap();
        prop_assert!(s.beta.iter().all(|b| *b > 0.0 && *b < 1.0));
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.consistency_error() <= 1e-12);
    }
}

#[test]
fn forward_examples() {
    let mut s = make_schedule(3, 0.1, 0.1, ScheduleKind::Linear).unwrap();
    s.alpha_bar[1] = 0.25;
    let shape = [2, 3, 3, 3];
    let eps = VideoTensor::seeded_gaussian(shape, TensorRole::Epsilon, 1);
    let x0 = VideoTensor::zeros(shape, TensorRole::X0);
    let xt = forward_sample(&x0, 2, &eps, &s).unwrap();
    for (a, e) in xt.data.iter().zip(&eps.data) {
        assert!((a - 0.75f64.sqrt() * e).abs() < 1e-15);
    }
    let x0 = VideoTensor::seeded_gaussian(shape, TensorRole::X0, 2);
    let zero = VideoTensor::zeros(shape, TensorRole::Epsilon);
    let xt = forward_sample(&x0, 2, &zero, &s).unwrap();
    for (a, x) in xt.data.iter().zip(&x0.data) {
        assert!((a - 0.5 * x).abs() < 1e-15);
    }
    assert_eq!(xt.role, TensorRole::Xt);
    let other = VideoTensor::zeros([1, 3, 3, 3], TensorRole::Epsilon);
    assert!(matches!(forward_sample(&x0, 1, &other, &s), Err(DiffusionError::ShapeMismatch(_))));
    assert_eq!(forward_sample(&x0, 4, &eps, &s), Err(DiffusionError::BadTimestep { t: 4, steps: 3 }));
    assert_eq!(forward_sample(&x0, 0, &eps, &s), Err(DiffusionError::BadTimestep { t: 0, steps: 3 }));
}

#[test]
fn forward_marginal_statistics() {
    let s = make_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
    let n = 100_000;
    let shape = [1, 1, n, 1];
    let x0 = VideoTensor::filled(shape, 0.7, TensorRole::X0);
    for (i, t) in [1, 500, 1000].into_iter().enumerate() {
        let eps = VideoTensor::seeded_gaussian(shape, TensorRole::Epsilon, 100 + i as u64);
        let xt = forward_sample(&x0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar_at(t);
        let var = 1.0 - ab;
        let mean = xt.data.iter().sum::<f64>() / n as f64;
        let svar = xt.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * (var / n as f64).sqrt(), "t={t} mean {mean}");
        assert!((svar - var).abs() < 3.0 * var * (2.0 / (n - 1) as f64).sqrt(), "t={t} var {svar}");
    }
}

struct Constant(f64);

impl EpsPredictor for Constant {
    fn predict(&self, x_t: &VideoTensor, _: usize, _: &VideoTensor) -> Result<VideoTensor, DiffusionError> {
        Ok(VideoTensor::filled(x_t.shape(), self.0, TensorRole::Epsilon))
    }
}

struct Echo(VideoTensor);

impl EpsPredictor for Echo {
    fn predict(&self, _: &VideoTensor, _: usize, _: &VideoTensor) -> Result<VideoTensor, DiffusionError> {
        Ok(self.0.clone())
    }
}

#[test]
fn loss_examples() {
    let s = make_schedule(10, 0.01, 0.2, ScheduleKind::Linear).unwrap();
    let shape = [1, 1, 100_000, 1];
    let x0 = VideoTensor::seeded_gaussian(shape, TensorRole::X0, 3);
    let cond = VideoTensor::zeros(shape, TensorRole::Condition);
    let eps = VideoTensor::seeded_gaussian(shape, TensorRole::Epsilon, 4);
    assert_eq!(vdm_loss(&Echo(eps.clone()), &x0, &cond, 5, &eps, &s).unwrap(), 0.0);
    let l = vdm_loss(&Constant(0.0), &x0, &cond, 5, &eps, &s).unwrap();
    assert!((l - 1.0).abs() < 3.0 * (2.0f64 / 100_000.0).sqrt(), "{l}");
    let zero = VideoTensor::zeros(shape, TensorRole::Epsilon);
    assert_eq!(vdm_loss(&Constant(0.0), &x0, &cond, 5, &zero, &s).unwrap(), 0.0);
    assert!(matches!(vdm_loss(&Constant(f64::NAN), &x0, &cond, 5, &eps, &s), Err(DiffusionError::NonFinite(_))));
}

#[test]
fn model_shapes_and_init() {
    let a = Architecture::default();
    let m = DenoiserModel::new(a.clone(), 5);
    assert_eq!(m.param_count(), a.param_count());
    assert_eq!(a.blocks().last().unwrap().1.end, a.param_count());
    assert!(m.is_finite());
    assert_eq!(m, DenoiserModel::new(a.clone(), 5));
    assert_ne!(m, DenoiserModel::new(a, 6));

    let m = DenoiserModel::new(small_arch(false), 0);
    assert!(m.param_count() <= 1000);
    let x = VideoTensor::seeded_gaussian([2, 8, 8, 3], TensorRole::Xt, 1);
    let c = VideoTensor::seeded_gaussian([2, 8, 8, 3], TensorRole::Condition, 2);
    let out = m.predict(&x, 3, &c).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert_ne!(out, m.predict(&x, 4, &c).unwrap());
    assert_ne!(out, m.predict(&x, 3, &x).unwrap());
    let bad = VideoTensor::zeros([2, 8, 8, 1], TensorRole::Condition);
    assert!(matches!(m.predict(&x, 3, &bad), Err(DiffusionError::ShapeMismatch(_))));
    let bad = VideoTensor::zeros([1, 8, 8, 3], TensorRole::Condition);
    assert!(matches!(m.predict(&x, 3, &bad), Err(DiffusionError::ShapeMismatch(_))));
}

#[test]
fn frames_without_temporal_layer_are_independent() {
    let m = DenoiserModel::new(small_arch(false), 1);
    let x = VideoTensor::seeded_gaussian([2, 6, 6, 3], TensorRole::Xt, 1);
    let c = VideoTensor::seeded_gaussian([2, 6, 6, 3], TensorRole::Condition, 2);
    let mut x2 = x.clone();
    for v in &mut x2.data[108..] {
        *v += 1.0;
    }
    let a = m.predict(&x, 2, &c).unwrap();
    let b = m.predict(&x2, 2, &c).unwrap();
    assert_eq!(a.data[..108], b.data[..108]);
    let mt = DenoiserModel::new(small_arch(true), 1);
    assert_ne!(mt.predict(&x, 2, &c).unwrap().data[..108], mt.predict(&x2, 2, &c).unwrap().data[..108]);
}

fn fd_instance(seed: u64, temporal: bool, frames: usize) -> (DenoiserModel, Batch, NoiseSchedule) {
    let mut m = DenoiserModel::new(small_arch(temporal), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in &mut m.params {
        *p += 0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    let shape = [frames, 8, 8, 3];
    let batch = Batch {
        items: (0..2)
            .map(|i| {
                (
                    VideoTensor::seeded_gaussian(shape, TensorRole::X0, seed * 10 + i),
                    VideoTensor::seeded_gaussian(shape, TensorRole::Condition, seed * 10 + 5 + i),
                )
            })
            .collect(),
    };
    (m, batch, make_schedule(50, 1e-3, 0.1, ScheduleKind::Linear).unwrap())
}

fn min_margin(m: &DenoiserModel, batch: &Batch, s: &NoiseSchedule, seed: u64) -> f64 {
    draw_noise(batch, s, seed)
        .iter()
        .zip(&batch.items)
        .map(|((t, eps), (x0, c))| m.relu_margin(&forward_sample(x0, *t, eps, s).unwrap(), *t, c).unwrap())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn gradient_matches_finite_differences_per_layer() {
    let h = 1e-6;
    let mut checked = 0;
    for seed in 0..40u64 {
        for (temporal, frames) in [(false, 1), (true, 1), (true, 3)] {
            let (m, batch, s) = fd_instance(seed, temporal, frames);
            if min_margin(&m, &batch, &s, seed) < 1e-4 {
                continue;
            }
            let g = grad_vdm(&m, &batch, &s, seed).unwrap();
            for (name, range) in m.arch.blocks() {
                let fd: Vec<f64> = range
                    .clone()
                    .map(|i| {
                        let mut p = m.clone();
                        p.params[i] += h;
                        let up = grad_vdm(&p, &batch, &s, seed).unwrap().loss;
                        p.params[i] -= 2.0 * h;
                        let down = grad_vdm(&p, &batch, &s, seed).unwrap().loss;
                        (up - down) / (2.0 * h)
                    })
                    .collect();
                let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
                let err = range.clone().zip(&fd).map(|(i, v)| (g.grad[i] - v).abs()).fold(0.0, f64::max);
                if frames == 1 && name == "temporal.weight" {
                    assert!(err < 1e-8);
                    continue;
                }
                assert!(err / scale < 1e-4, "seed {seed} {name} temporal={temporal}: rel err {}", err / scale);
            }
            checked += 1;
        }
        if checked >= 12 {
            break;
        }
    }
    assert!(checked >= 12, "only {checked} kink-free instances");
}

#[test]
fn zero_loss_gives_zero_gradient() {
    let mut m = DenoiserModel::new(small_arch(true), 2);
    m.params.fill(0.0);
    let shape = [2, 8, 8, 3];
    let batch = Batch {
        items: vec![(
            VideoTensor::seeded_gaussian(shape, TensorRole::X0, 1),
            VideoTensor::seeded_gaussian(shape, TensorRole::Condition, 2),
        )],
    };
    let s = make_schedule(10, 0.01, 0.1, ScheduleKind::Linear).unwrap();
    let draws = vec![(4, VideoTensor::zeros(shape, TensorRole::Epsilon))];
    let g = grad_with_noise(&m, &batch, &s, &draws).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.grad.iter().all(|v| *v == 0.0));
}

#[test]
fn duplicated_elements_weight_the_batch_mean() {
    let (m, batch, s) = fd_instance(3, true, 2);
    let draws = draw_noise(&batch, &s, 9);
    let (a, b) = (batch.items[0].clone(), batch.items[1].clone());
    let (da, db) = (draws[0].clone(), draws[1].clone());
    let one = |items: Vec<_>, d: Vec<_>| grad_with_noise(&m, &Batch { items }, &s, &d).unwrap();
    let ga = one(vec![a.clone()], vec![da.clone()]);
    let gb = one(vec![b.clone()], vec![db.clone()]);
    let gaa = one(vec![a.clone(), a.clone()], vec![da.clone(), da.clone()]);
    let gaab = one(vec![a.clone(), a, b], vec![da.clone(), da, db]);
    assert!((gaa.loss - ga.loss).abs() < 1e-12);
    for i in 0..m.param_count() {
        assert!((gaa.grad[i] - ga.grad[i]).abs() < 1e-12);
        let want = (2.0 * ga.grad[i] + gb.grad[i]) / 3.0;
        assert!((gaab.grad[i] - want).abs() < 1e-12 * (1.0 + want.abs()));
    }
    assert!((gaab.loss - (2.0 * ga.loss + gb.loss) / 3.0).abs() < 1e-12);
}

#[test]
fn gradient_draws_are_seeded() {
    let (m, batch, s) = fd_instance(4, true, 2);
    let a = grad_vdm(&m, &batch, &s, 1).unwrap();
    assert_eq!(a, grad_vdm(&m, &batch, &s, 1).unwrap());
    assert_ne!(a.loss, grad_vdm(&m, &batch, &s, 2).unwrap().loss);
    assert!(a.steps.iter().all(|t| (1..=s.steps()).contains(t)));
    assert_eq!(grad_vdm(&m, &Batch { items: vec![] }, &s, 1), Err(DiffusionError::EmptyDataset));
}

/// Point dataset used as the convergence fixture.
pub(crate) fn convergence_fixture() -> (DenoiserModel, Vec<(VideoTensor, VideoTensor)>, NoiseSchedule, TrainConfig) {
    let shape = [2, 8, 8, 3];
    let data = vec![(
        VideoTensor::filled(shape, 0.5, TensorRole::X0),
        VideoTensor::filled(shape, -0.25, TensorRole::Condition),
    )];
    let sched = make_schedule(20, 0.05, 0.3, ScheduleKind::Linear).unwrap();
    let config = TrainConfig {
        steps: 2000,
        step_size: 0.02,
        batch: 4,
        seed: 11,
    };
    (DenoiserModel::new(Architecture::default(), 7), data, sched, config)
}

#[test]
fn training_converges_on_point_dataset() {
    let (m, data, sched, config) = convergence_fixture();
    let r = train_tensors(&m, &data, &sched, &config).unwrap();
    assert_eq!(r.loss_curve.len(), 2000);
    let sm = smoothed(&r.loss_curve, 100);
    let (first, last) = (sm[99], sm[1999]);
    assert!(last < 0.25 * first, "smoothed loss {first} -> {last}");
    assert!(r.model.is_finite());
}

#[test]
fn training_is_seeded_and_zero_steps_is_identity() {
    let (m, data, sched, mut config) = convergence_fixture();
    config.steps = 0;
    let r = train_tensors(&m, &data, &sched, &config).unwrap();
    assert_eq!(r.model, m);
    assert!(r.loss_curve.is_empty());
    config.steps = 20;
    let a = train_tensors(&m, &data, &sched, &config).unwrap();
    assert_eq!(a, train_tensors(&m, &data, &sched, &config).unwrap());
    config.seed += 1;
    assert_ne!(a.model, train_tensors(&m, &data, &sched, &config).unwrap().model);
    assert_eq!(train_tensors(&m, &[], &sched, &config), Err(DiffusionError::EmptyDataset));
}

#[test]
fn smoothing_is_a_trailing_mean() {
    assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    assert_eq!(smoothed(&[2.0, 4.0], 1), vec![2.0, 4.0]);
    assert!(smoothed(&[], 5).is_empty());
}

#[test]
fn oracle_sampler_recovers_point() {
    let shape = [2, 4, 4, 3];
    let x0 = VideoTensor::seeded_gaussian(shape, TensorRole::X0, 21);
    let cond = VideoTensor::zeros(shape, TensorRole::Condition);
    let mut errs = vec![];
    for steps in [1, 10, 100] {
        let sched = make_schedule(steps, 1e-4, 0.2, ScheduleKind::Linear).unwrap();
        let oracle = EpsOracle {
            x0: x0.clone(),
            schedule: sched.clone(),
        };
        let mut mean = vec![0.0; x0.len()];
        for seed in 0..100 {
            let s = ddpm_sample(&oracle, &cond, &sched, seed, shape).unwrap();
            for (m, v) in mean.iter_mut().zip(&s.data) {
                *m += v / 100.0;
            }
        }
        let err = mean.iter().zip(&x0.data).map(|(m, x)| (m - x).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "T={steps}: {err}");
        errs.push(err);
    }
    assert!(errs[1] < 1e-9 && errs[2] < 1e-9, "{errs:?}");

    let sched = make_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
    let oracle = EpsOracle {
        x0: x0.clone(),
        schedule: sched.clone(),
    };
    let out = ddpm_sample(&oracle, &cond, &sched, 4, shape).unwrap();
    for (a, b) in out.data.iter().zip(&x0.data) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn sampler_is_seeded() {
    let m = DenoiserModel::new(small_arch(true), 3);
    let sched = make_schedule(8, 0.01, 0.2, ScheduleKind::Linear).unwrap();
    let shape = [2, 6, 6, 3];
    let cond = VideoTensor::seeded_gaussian(shape, TensorRole::Condition, 1);
    let a = ddpm_sample(&m, &cond, &sched, 5, shape).unwrap();
    assert_eq!(a, ddpm_sample(&m, &cond, &sched, 5, shape).unwrap());
    assert_ne!(a, ddpm_sample(&m, &cond, &sched, 6, shape).unwrap());
    assert_eq!(a.role, TensorRole::X0);
}

#[test]
fn checkpoint_round_trip() {
    let ck = Checkpoint {
        model: DenoiserModel::new(Architecture::default(), 8),
        schedule: make_schedule(30, 1e-3, 0.1, ScheduleKind::Linear).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert!(back.schedule.consistency_error() <= 1e-12);

    let bytes = encode_checkpoint(&ck);
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(matches!(decode_checkpoint(&flipped), Err(CheckpointError::Checksum)));
    assert!(matches!(decode_checkpoint(b"nope"), Err(CheckpointError::BadMagic)));
    let mut v2 = bytes.clone();
    v2[4] = 9;
    assert!(matches!(decode_checkpoint(&v2), Err(CheckpointError::Version(9))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(CheckpointError::Checksum)));
}

#[test]
fn frames_round_trip_through_tensors() {
    let frames: Vec<Frame> = (0..3).map(|i| Frame::filled(5, 4, [0.1 * i as f64, 0.5, 1.0 - 0.2 * i as f64], 1.0)).collect();
    let seq = FrameSequence {
        width: 5,
        height: 4,
        frames,
        times: vec![0.0, 0.1, 0.2],
        instance_labels: vec![],
    };
    let t = VideoTensor::from_frames(&seq, TensorRole::Condition);
    assert_eq!(t.shape(), [seq.len(), seq.height as usize, seq.width as usize, 3]);
    assert!(t.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    let back = t.to_frames(&seq.times);
    for (a, b) in back.frames.iter().zip(&seq.frames) {
        for (x, y) in a.rgb.iter().zip(&b.rgb) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(back.times, seq.times);
}
