use super::{same_shape, DiffusionError, EpsPredictor, TensorRole, VideoTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Three 3×3 convolutions with rectifiers after the first two. The input is
/// `x_t` and the condition stacked along channels; a sinusoidal step
/// embedding, linearly projected, is added after the first convolution. An
/// optional temporal convolution (kernel 3 over frames) follows the second
/// rectifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub x_channels: usize,
    pub cond_channels: usize,
    pub hidden: [usize; 2],
    pub time_dim: usize,
    pub temporal: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            x_channels: 3,
            cond_channels: 3,
            hidden: [8, 8],
            time_dim: 8,
            temporal: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    w1: usize,
    b1: usize,
    wt: usize,
    w2: usize,
    b2: usize,
    wtemp: usize,
    btemp: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

impl Architecture {
    fn cin(&self) -> usize {
        self.x_channels + self.cond_channels
    }

    pub(crate) fn layout(&self) -> Layout {
        let [h1, h2] = self.hidden;
        let mut at = 0;
        let mut take = |n: usize| {
            let s = at;
            at += n;
            s
        };
        let w1 = take(h1 * self.cin() * 9);
        let b1 = take(h1);
        let wt = take(h1 * self.time_dim);
        let w2 = take(h2 * h1 * 9);
        let b2 = take(h2);
        let (wtemp, btemp) = if self.temporal {
            (take(h2 * h2 * 3), take(h2))
        } else {
            let end = take(0);
            (end, end)
        };
        let w3 = take(self.x_channels * h2 * 9);
        let b3 = take(self.x_channels);
        Layout {
            w1,
            b1,
            wt,
            w2,
            b2,
            wtemp,
            btemp,
            w3,
            b3,
            total: at,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Named parameter blocks in storage order.
    pub fn blocks(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let l = self.layout();
        let mut v = vec![
            ("conv1.weight", l.w1..l.b1),
            ("conv1.bias", l.b1..l.wt),
            ("time.weight", l.wt..l.w2),
            ("conv2.weight", l.w2..l.b2),
            ("conv2.bias", l.b2..l.wtemp),
        ];
        if self.temporal {
            v.push(("temporal.weight", l.wtemp..l.btemp));
            v.push(("temporal.bias", l.btemp..l.w3));
        }
        v.push(("conv3.weight", l.w3..l.b3));
        v.push(("conv3.bias", l.b3..l.total));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

/// Sinusoidal embedding of step `t`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let k = (j / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * k / dim.max(1) as f64);
            let a = t as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Dims {
    f: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn px(&self) -> usize {
        self.f * self.h * self.w
    }
}

fn conv3x3(input: &[f64], d: Dims, cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.px() * cout];
    for f in 0..d.f {
        for y in 0..d.h {
            for x in 0..d.w {
                let o_base = ((f * d.h + y) * d.w + x) * cout;
                out[o_base..o_base + cout].copy_from_slice(b);
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= d.w as isize {
                            continue;
                        }
                        let i_base = ((f * d.h + yy as usize) * d.w + xx as usize) * cin;
                        for o in 0..cout {
                            let mut acc = 0.0;
                            for i in 0..cin {
                                acc += w[((o * cin + i) * 3 + ky) * 3 + kx] * input[i_base + i];
                            }
                            out[o_base + o] += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_back(
    input: &[f64],
    d: Dims,
    cin: usize,
    w: &[f64],
    dout: &[f64],
    cout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    for f in 0..d.f {
        for y in 0..d.h {
            for x in 0..d.w {
                let o_base = ((f * d.h + y) * d.w + x) * cout;
                for o in 0..cout {
                    db[o] += dout[o_base + o];
                }
                for ky in 0..3 {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= d.w as isize {
                            continue;
                        }
                        let i_base = ((f * d.h + yy as usize) * d.w + xx as usize) * cin;
                        for o in 0..cout {
                            let g = dout[o_base + o];
                            if g == 0.0 {
                                continue;
                            }
                            for i in 0..cin {
                                let wi = ((o * cin + i) * 3 + ky) * 3 + kx;
                                dw[wi] += g * input[i_base + i];
                                if let Some(din) = din.as_deref_mut() {
                                    din[i_base + i] += g * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn temporal_conv(input: &[f64], d: Dims, c: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.px() * c];
    for f in 0..d.f {
        for p in 0..plane {
            let o_base = (f * plane + p) * c;
            out[o_base..o_base + c].copy_from_slice(b);
            for k in 0..3 {
                let ff = f as isize + k as isize - 1;
                if ff < 0 || ff >= d.f as isize {
                    continue;
                }
                let i_base = (ff as usize * plane + p) * c;
                for o in 0..c {
                    let mut acc = 0.0;
                    for i in 0..c {
                        acc += w[(o * c + i) * 3 + k] * input[i_base + i];
                    }
                    out[o_base + o] += acc;
                }
            }
        }
    }
    out
}

fn temporal_back(input: &[f64], d: Dims, c: usize, w: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64], din: &mut [f64]) {
    let plane = d.h * d.w;
    for f in 0..d.f {
        for p in 0..plane {
            let o_base = (f * plane + p) * c;
            for o in 0..c {
                db[o] += dout[o_base + o];
            }
            for k in 0..3 {
                let ff = f as isize + k as isize - 1;
                if ff < 0 || ff >= d.f as isize {
                    continue;
                }
                let i_base = (ff as usize * plane + p) * c;
                for o in 0..c {
                    let g = dout[o_base + o];
                    for i in 0..c {
                        let wi = (o * c + i) * 3 + k;
                        dw[wi] += g * input[i_base + i];
                        din[i_base + i] += g * w[wi];
                    }
                }
            }
        }
    }
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Trace {
    dims: Dims,
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    h: Vec<f64>,
    emb: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

impl DenoiserModel {
    /// He-style Gaussian initialization; biases start at zero.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let l = arch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; l.total];
        let [h1, h2] = arch.hidden;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
            for p in &mut params[range] {
                *p = n.sample(rng);
            }
        };
        fill(l.w1..l.b1, arch.cin() * 9, &mut rng);
        fill(l.wt..l.w2, arch.time_dim, &mut rng);
        fill(l.w2..l.b2, h1 * 9, &mut rng);
        if arch.temporal {
            fill(l.wtemp..l.btemp, h2 * 3, &mut rng);
        }
        fill(l.w3..l.b3, h2 * 9 * 4, &mut rng);
        Self { arch, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_inputs(&self, x_t: &VideoTensor, cond: &VideoTensor) -> Result<(), DiffusionError> {
        if x_t.channels != self.arch.x_channels || cond.channels != self.arch.cond_channels {
            return Err(DiffusionError::ShapeMismatch(format!(
                "model takes {}+{} channels, got {}+{}",
                self.arch.x_channels, self.arch.cond_channels, x_t.channels, cond.channels
            )));
        }
        let [f, h, w, _] = x_t.shape();
        let [cf, ch, cw, _] = cond.shape();
        if (f, h, w) != (cf, ch, cw) {
            return Err(DiffusionError::ShapeMismatch(format!("x_t {:?} vs condition {:?}", x_t.shape(), cond.shape())));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, x_t: &VideoTensor, t: usize, cond: &VideoTensor) -> Result<Trace, DiffusionError> {
        self.check_inputs(x_t, cond)?;
        let a = &self.arch;
        let l = a.layout();
        let p = &self.params;
        let [h1, h2] = a.hidden;
        let dims = Dims {
            f: x_t.frames,
            h: x_t.height,
            w: x_t.width,
        };
        let cin = a.cin();
        let mut input = Vec::with_capacity(dims.px() * cin);
        for px in 0..dims.px() {
            input.extend_from_slice(&x_t.data[px * a.x_channels..(px + 1) * a.x_channels]);
            input.extend_from_slice(&cond.data[px * a.cond_channels..(px + 1) * a.cond_channels]);
        }
        let emb = time_embedding(t, a.time_dim);
        let mut bias1 = p[l.b1..l.b1 + h1].to_vec();
        for (o, b) in bias1.iter_mut().enumerate() {
            *b += (0..a.time_dim).map(|j| p[l.wt + o * a.time_dim + j] * emb[j]).sum::<f64>();
        }
        let z1 = conv3x3(&input, dims, cin, &p[l.w1..l.b1], &bias1, h1);
        let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let z2 = conv3x3(&a1, dims, h1, &p[l.w2..l.b2], &p[l.b2..l.b2 + h2], h2);
        let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
        let h = if a.temporal {
            temporal_conv(&a2, dims, h2, &p[l.wtemp..l.btemp], &p[l.btemp..l.btemp + h2])
        } else {
            a2.clone()
        };
        let out = conv3x3(&h, dims, h2, &p[l.w3..l.b3], &p[l.b3..l.b3 + a.x_channels], a.x_channels);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite("activation".into()));
        }
        Ok(Trace {
            dims,
            input,
            z1,
            a1,
            z2,
            a2,
            h,
            emb,
            out,
        })
    }

    /// Accumulates the parameter gradient for upstream gradient `dout` on the
    /// output of `trace`.
    pub(crate) fn backward(&self, trace: &Trace, dout: &[f64], grad: &mut [f64]) {
        let a = &self.arch;
        let l = a.layout();
        let p = &self.params;
        let [h1, h2] = a.hidden;
        let d = trace.dims;
        let (g_lo, g_hi) = grad.split_at_mut(l.w3);
        let (g_w3, g_b3) = g_hi.split_at_mut(l.b3 - l.w3);
        let mut dh = vec![0.0; d.px() * h2];
        conv3x3_back(&trace.h, d, h2, &p[l.w3..l.b3], dout, a.x_channels, g_w3, &mut g_b3[..a.x_channels], Some(&mut dh));
        let da2 = if a.temporal {
            let mut da2 = vec![0.0; d.px() * h2];
            let (g_wtemp, g_btemp) = g_lo[l.wtemp..l.w3].split_at_mut(l.btemp - l.wtemp);
            temporal_back(&trace.a2, d, h2, &p[l.wtemp..l.btemp], &dh, g_wtemp, g_btemp, &mut da2);
            da2
        } else {
            dh
        };
        let dz2: Vec<f64> = da2.iter().zip(&trace.z2).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let mut da1 = vec![0.0; d.px() * h1];
        {
            let (g_w2, g_b2) = g_lo[l.w2..l.wtemp.max(l.b2 + h2)].split_at_mut(l.b2 - l.w2);
            conv3x3_back(&trace.a1, d, h1, &p[l.w2..l.b2], &dz2, h2, g_w2, &mut g_b2[..h2], Some(&mut da1));
        }
        let dz1: Vec<f64> = da1.iter().zip(&trace.z1).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let (g_w1, rest) = g_lo[l.w1..].split_at_mut(l.b1 - l.w1);
        let mut db1 = vec![0.0; h1];
        conv3x3_back(&trace.input, d, a.cin(), &p[l.w1..l.b1], &dz1, h1, g_w1, &mut db1, None);
        for o in 0..h1 {
            rest[o] += db1[o];
            for j in 0..a.time_dim {
                rest[l.wt - l.b1 + o * a.time_dim + j] += db1[o] * trace.emb[j];
            }
        }
    }

    /// Smallest absolute pre-activation at either rectifier. Finite
    /// differences with a step below this never cross a kink.
    pub fn relu_margin(&self, x_t: &VideoTensor, t: usize, cond: &VideoTensor) -> Result<f64, DiffusionError> {
        let tr = self.forward(x_t, t, cond)?;
        Ok(tr.z1.iter().chain(&tr.z2).map(|v| v.abs()).fold(f64::INFINITY, f64::min))
    }
}

impl EpsPredictor for DenoiserModel {
    fn predict(&self, x_t: &VideoTensor, t: usize, cond: &VideoTensor) -> Result<VideoTensor, DiffusionError> {
        let tr = self.forward(x_t, t, cond)?;
        let out = VideoTensor {
            data: tr.out,
            role: TensorRole::Epsilon,
            ..x_t.clone()
        };
        same_shape(&out, x_t, "output")?;
        Ok(out)
    }
}
