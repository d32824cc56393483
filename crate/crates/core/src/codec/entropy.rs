//! Entropy models: the conditional Gaussian for `y` and the learned
//! factorized density for `z`.

use pcic_nn::special::std_normal_cdf;
use pcic_nn::{Float, Init, ParamId, ParamStore, Params, Tensor, Var};
use rand::{Rng, RngCore};

/// Scale floor of the conditional Gaussian.
pub const SIGMA_MIN: f64 = 0.11;
/// Lower bound on any per-symbol probability mass.
pub const LIKELIHOOD_BOUND: f64 = 1e-9;

const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;

/// Learned non-parametric per-channel cumulative density (monotone MLP on
/// scalars, one per channel).
#[derive(Debug, Clone)]
pub struct EntropyBottleneck {
    pub channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

impl EntropyBottleneck {
    pub fn new<T: Float>(init: &mut Init<'_, T>, channels: usize) -> Self {
        let mut s = init.scope("entropy_bottleneck");
        let dims: Vec<usize> = std::iter::once(1).chain(FILTERS).chain(std::iter::once(1)).collect();
        let scale = INIT_SCALE.powf(1.0 / (FILTERS.len() + 1) as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let m0 = (1.0 / scale / fan_out as f64).exp_m1().ln();
            matrices.push(s.param(&format!("matrix{k}"), Tensor::full(&[channels, fan_out, fan_in], T::of(m0))));
            let bias = Tensor::from_fn(&[channels, fan_out, 1], |_| T::of(s.rng().gen_range(-0.5..0.5)));
            biases.push(s.param(&format!("bias{k}"), bias));
            if k < FILTERS.len() {
                factors.push(s.zeros(&format!("factor{k}"), &[channels, fan_out, 1]));
            }
        }
        Self {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    /// Cumulative logits for `[C, 1, L]` inputs.
    fn logits<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        let mut h = x.clone();
        for k in 0..self.matrices.len() {
            h = p[self.matrices[k]].softplus().channel_matmul(&h).add_last(&p[self.biases[k]]);
            if let Some(&f) = self.factors.get(k) {
                h = h.add(&h.tanh().mul_last(&p[f].tanh()));
            }
        }
        h
    }

    /// Per-element bits of `[B, C, H, W]` values, laid out `[C, 1, B·H·W]`.
    pub fn bits<T: Float>(&self, p: &Params<T>, z: &Var<T>) -> Var<T> {
        let rows = z.channel_rows();
        let upper = self.logits(p, &rows.add_scalar(0.5));
        let lower = self.logits(p, &rows.add_scalar(-0.5));
        upper.logistic_bits(&lower, LIKELIHOOD_BOUND)
    }

    /// Freeze the current parameters into a scalar `f64` evaluator.
    pub fn density<T: Float>(&self, store: &ParamStore<T>) -> FactorizedDensity {
        let vals = |id: ParamId| store.get(id).data().iter().map(|v| v.f64()).collect::<Vec<_>>();
        let dims: Vec<usize> = std::iter::once(1).chain(FILTERS).chain(std::iter::once(1)).collect();
        let (ms, bs, fs): (Vec<_>, Vec<_>, Vec<_>) = (
            self.matrices.iter().map(|&id| vals(id)).collect(),
            self.biases.iter().map(|&id| vals(id)).collect(),
            self.factors.iter().map(|&id| vals(id)).collect(),
        );
        let channels = (0..self.channels)
            .map(|c| {
                (0..dims.len() - 1)
                    .map(|k| {
                        let (fi, fo) = (dims[k], dims[k + 1]);
                        DensityLayer {
                            fan_in: fi,
                            weights: ms[k][c * fo * fi..(c + 1) * fo * fi].iter().map(|&m| softplus(m)).collect(),
                            bias: bs[k][c * fo..(c + 1) * fo].to_vec(),
                            gain: fs.get(k).map(|f| f[c * fo..(c + 1) * fo].iter().map(|&g| g.tanh()).collect()),
                        }
                    })
                    .collect()
            })
            .collect();
        FactorizedDensity { channels }
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + libm::log1p(libm::exp(-v.abs()))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DensityLayer {
    fan_in: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    gain: Option<Vec<f64>>,
}

/// Scalar evaluation of a trained factorized density, used for rate
/// estimates and to build coding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedDensity {
    channels: Vec<Vec<DensityLayer>>,
}

impl FactorizedDensity {
    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn logit(&self, channel: usize, x: f64) -> f64 {
        let mut h = vec![x];
        for layer in &self.channels[channel] {
            let mut next: Vec<f64> = layer
                .bias
                .iter()
                .enumerate()
                .map(|(o, &b)| b + (0..layer.fan_in).map(|i| layer.weights[o * layer.fan_in + i] * h[i]).sum::<f64>())
                .collect();
            if let Some(gain) = &layer.gain {
                for (v, g) in next.iter_mut().zip(gain) {
                    *v += g * libm::tanh(*v);
                }
            }
            h = next;
        }
        h[0]
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid(self.logit(channel, x))
    }

    /// Mass on `[x − ½, x + ½)`, evaluated on the tail with more precision.
    pub fn mass(&self, channel: usize, x: f64) -> f64 {
        let upper = self.logit(channel, x + 0.5);
        let lower = self.logit(channel, x - 0.5);
        let m = if upper + lower > 0.0 {
            sigmoid(-lower) - sigmoid(-upper)
        } else {
            sigmoid(upper) - sigmoid(lower)
        };
        m.abs()
    }
}

/// Total bits of integer hyper-latents `[B, C, H, W]` under `density`.
pub fn estimate_rate_z(z_hat: &Tensor<f32>, density: &FactorizedDensity) -> f64 {
    let (_, c, h, w) = z_hat.dims4();
    assert_eq!(c, density.channels(), "channel count mismatch");
    z_hat
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| -density.mass((i / (h * w)) % c, v as f64).max(LIKELIHOOD_BOUND).log2())
        .sum()
}

/// Mass of `N(mean, sigma)` convolved with a unit uniform, on the bin at `y`.
pub fn gaussian_bin_mass(y: f64, mean: f64, sigma: f64) -> f64 {
    let d = (y - mean).abs();
    std_normal_cdf((0.5 - d) / sigma) - std_normal_cdf((-0.5 - d) / sigma)
}

/// Total bits of `y_hat` under per-element Gaussians; `sigma` is floored at
/// [`SIGMA_MIN`].
pub fn estimate_rate_y(y_hat: &[f32], mu: &[f32], sigma: &[f32]) -> f64 {
    assert!(y_hat.len() == mu.len() && mu.len() == sigma.len());
    y_hat
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&y, &m), &s)| {
            let p = gaussian_bin_mass(y as f64, m as f64, (s as f64).max(SIGMA_MIN));
            -p.max(LIKELIHOOD_BOUND).log2()
        })
        .sum()
}

pub enum Quantize<'a> {
    /// Additive uniform noise on `[−½, ½)`, the training proxy.
    Noise(&'a mut dyn RngCore),
    /// `round(v − mean) + mean`, ties to even.
    Round,
}

pub fn quantize<T: Float>(v: &Tensor<T>, mode: Quantize<'_>, means: Option<&Tensor<T>>) -> Tensor<T> {
    match mode {
        Quantize::Noise(rng) => v.zip_map(&noise(v.shape(), rng), |x, u| x + u),
        Quantize::Round => match means {
            Some(m) => v.zip_map(m, |x, m| round_even(x - m) + m),
            None => v.map(round_even),
        },
    }
}

pub(crate) fn round_even<T: Float>(v: T) -> T {
    T::of(v.f64().round_ties_even())
}

/// Uniform noise tensor on `[−½, ½)`.
pub(crate) fn noise<T: Float>(shape: &[usize], rng: &mut dyn RngCore) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen::<f64>() - 0.5))
}
