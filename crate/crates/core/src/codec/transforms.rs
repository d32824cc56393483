//! Analysis/synthesis transforms with optional context concatenation, the
//! hyper path, and the hyper refiner.

use pcic_nn::layers::{Conv2d, ConvTranspose2d, Gdn, LEAKY_SLOPE};
use pcic_nn::{Float, Init, Params, Tensor, Var};

use super::entropy::SIGMA_MIN;
use crate::context::{check_divisible, MultiScaleContext};
use crate::error::{Error, Result};

fn require_ctx<'a, T: Float>(ctx: Option<&'a MultiScaleContext<T>>, what: &str) -> Result<&'a MultiScaleContext<T>> {
    ctx.ok_or_else(|| Error::Shape(format!("{what} was built with context injection but got none")))
}

fn check_spatial<T: Float>(feat: &Var<T>, ctx: &Var<T>, what: &str) -> Result<()> {
    let (a, b) = (feat.shape(), ctx.shape());
    if a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::Shape(format!("{what}: features {a:?} vs context {b:?}")));
    }
    Ok(())
}

fn cat_checked<T: Float>(feat: &Var<T>, ctx: &Var<T>, what: &str) -> Result<Var<T>> {
    check_spatial(feat, ctx, what)?;
    Ok(Var::cat(&[feat, ctx]))
}

/// Image → latent `y` at 1/16 scale.
#[derive(Debug, Clone)]
pub struct Analysis {
    convs: [Conv2d; 4],
    gdns: [Gdn; 3],
    inject: bool,
}

impl Analysis {
    /// `ctx_channels` is the context width when context is concatenated.
    pub fn new<T: Float>(init: &mut Init<'_, T>, n: usize, m: usize, ctx_channels: Option<usize>) -> Self {
        let mut s = init.scope("analysis");
        let extra = ctx_channels.unwrap_or(0);
        Self {
            convs: [
                Conv2d::new(&mut s, "conv0", 3 + extra, n, 5, 2),
                Conv2d::new(&mut s, "conv1", n + extra, n, 5, 2),
                Conv2d::new(&mut s, "conv2", n + extra, n, 5, 2),
                Conv2d::new(&mut s, "conv3", n, m, 5, 2),
            ],
            gdns: [
                Gdn::new(&mut s, "gdn0", n, false),
                Gdn::new(&mut s, "gdn1", n, false),
                Gdn::new(&mut s, "gdn2", n, false),
            ],
            inject: ctx_channels.is_some(),
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>, ctx: Option<&MultiScaleContext<T>>) -> Result<Var<T>> {
        check_divisible(x.shape(), 16, "analysis input")?;
        let ctx = if self.inject { Some(require_ctx(ctx, "analysis")?) } else { None };
        let mut h = x.clone();
        for stage in 0..3 {
            if let Some(c) = ctx {
                let feat = [&c.c1, &c.c2, &c.c3][stage];
                h = cat_checked(&h, feat, "analysis")?;
            }
            h = self.gdns[stage].forward(p, &self.convs[stage].forward(p, &h));
        }
        Ok(self.convs[3].forward(p, &h))
    }
}

/// Latent → image, mirroring [`Analysis`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    deconvs: [ConvTranspose2d; 4],
    igdns: Vec<Gdn>,
    head: Option<Conv2d>,
    inject: bool,
}

impl Synthesis {
    pub fn new<T: Float>(init: &mut Init<'_, T>, n: usize, m: usize, ctx_channels: Option<usize>) -> Self {
        let mut s = init.scope("synthesis");
        let extra = ctx_channels.unwrap_or(0);
        let inject = ctx_channels.is_some();
        let last_out = if inject { n } else { 3 };
        let deconvs = [
            ConvTranspose2d::new(&mut s, "deconv0", m, n, 5, 2),
            ConvTranspose2d::new(&mut s, "deconv1", n, n, 5, 2),
            ConvTranspose2d::new(&mut s, "deconv2", n + extra, n, 5, 2),
            ConvTranspose2d::new(&mut s, "deconv3", n + extra, last_out, 5, 2),
        ];
        let igdn_count = if inject { 4 } else { 3 };
        let igdns = (0..igdn_count).map(|i| Gdn::new(&mut s, &format!("igdn{i}"), n, true)).collect();
        let head = inject.then(|| Conv2d::new(&mut s, "head", n + extra, 3, 3, 1));
        Self {
            deconvs,
            igdns,
            head,
            inject,
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, y: &Var<T>, ctx: Option<&MultiScaleContext<T>>) -> Result<Var<T>> {
        let ctx = if self.inject { Some(require_ctx(ctx, "synthesis")?) } else { None };
        let mut h = y.clone();
        for stage in 0..4 {
            h = self.deconvs[stage].forward(p, &h);
            if let Some(g) = self.igdns.get(stage) {
                h = g.forward(p, &h);
            }
            // Context of matching scale after the second, third and fourth
            // upsampling stages.
            if let Some(c) = ctx {
                let feat = match stage {
                    1 => Some(&c.c3),
                    2 => Some(&c.c2),
                    3 => Some(&c.c1),
                    _ => None,
                };
                if let Some(f) = feat {
                    h = cat_checked(&h, f, "synthesis")?;
                }
            }
        }
        Ok(match &self.head {
            Some(head) => head.forward(p, &h),
            None => h,
        })
    }
}

#[derive(Debug, Clone)]
pub struct HyperAnalysis {
    convs: [Conv2d; 3],
}

impl HyperAnalysis {
    pub fn new<T: Float>(init: &mut Init<'_, T>, n: usize, m: usize) -> Self {
        let mut s = init.scope("hyper_analysis");
        Self {
            convs: [
                Conv2d::new(&mut s, "conv0", m, n, 3, 1),
                Conv2d::new(&mut s, "conv1", n, n, 5, 2),
                Conv2d::new(&mut s, "conv2", n, n, 5, 2),
            ],
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, y: &Var<T>) -> Result<Var<T>> {
        check_divisible(y.shape(), 4, "hyper analysis input")?;
        let h = self.convs[0].forward(p, y).leaky_relu(LEAKY_SLOPE);
        let h = self.convs[1].forward(p, &h).leaky_relu(LEAKY_SLOPE);
        Ok(self.convs[2].forward(p, &h))
    }
}

#[derive(Debug, Clone)]
pub struct HyperSynthesis {
    deconv0: ConvTranspose2d,
    deconv1: ConvTranspose2d,
    conv: Conv2d,
}

impl HyperSynthesis {
    pub fn new<T: Float>(init: &mut Init<'_, T>, n: usize, m: usize) -> Self {
        let mut s = init.scope("hyper_synthesis");
        let mid = m * 3 / 2;
        Self {
            deconv0: ConvTranspose2d::new(&mut s, "deconv0", n, m, 5, 2),
            deconv1: ConvTranspose2d::new(&mut s, "deconv1", m, mid, 5, 2),
            conv: Conv2d::new(&mut s, "conv", mid, 2 * m, 3, 1),
        }
    }

    /// Output has `2M` channels at the scale of `y`.
    pub fn forward<T: Float>(&self, p: &Params<T>, z_hat: &Var<T>) -> Var<T> {
        let h = self.deconv0.forward(p, z_hat).leaky_relu(LEAKY_SLOPE);
        let h = self.deconv1.forward(p, &h).leaky_relu(LEAKY_SLOPE);
        self.conv.forward(p, &h)
    }
}

/// Fuses hyper-synthesis output with the latent-scale context into the
/// Gaussian mean and scale of `y`.
#[derive(Debug, Clone)]
pub struct HyperRefiner {
    convs: [Conv2d; 3],
    m: usize,
    ctx_channels: usize,
}

impl HyperRefiner {
    /// `ctx_channels` may be zero for a refiner without context input.
    pub fn new<T: Float>(init: &mut Init<'_, T>, m: usize, ctx_channels: usize) -> Self {
        let mut s = init.scope("hyper_refiner");
        Self {
            convs: [
                Conv2d::new(&mut s, "conv0", 2 * m + ctx_channels, 2 * m, 3, 1),
                Conv2d::new(&mut s, "conv1", 2 * m, 2 * m, 3, 1),
                Conv2d::new(&mut s, "conv2", 2 * m, 2 * m, 3, 1),
            ],
            m,
            ctx_channels,
        }
    }

    pub fn ctx_channels(&self) -> usize {
        self.ctx_channels
    }

    /// Returns `(μ, σ)` with `σ ≥ SIGMA_MIN`. A missing `c_hyper` is replaced
    /// by zeros.
    pub fn forward<T: Float>(&self, p: &Params<T>, z_hyper: &Var<T>, c_hyper: Option<&Var<T>>) -> Result<(Var<T>, Var<T>)> {
        let (b, ch, h, w) = z_hyper.value().dims4();
        if ch != 2 * self.m {
            return Err(Error::Shape(format!("refiner expects {} channels, got {ch}", 2 * self.m)));
        }
        let input = if self.ctx_channels == 0 {
            z_hyper.clone()
        } else {
            let zeros;
            let c = match c_hyper {
                Some(c) => c,
                None => {
                    zeros = Var::constant(Tensor::zeros(&[b, self.ctx_channels, h, w]));
                    &zeros
                }
            };
            if c.shape()[1] != self.ctx_channels {
                return Err(Error::Shape(format!(
                    "refiner expects {} context channels, got {:?}",
                    self.ctx_channels,
                    c.shape()
                )));
            }
            cat_checked(z_hyper, c, "hyper refiner")?
        };
        let h1 = self.convs[0].forward(p, &input).leaky_relu(LEAKY_SLOPE);
        let h2 = self.convs[1].forward(p, &h1).leaky_relu(LEAKY_SLOPE);
        let out = self.convs[2].forward(p, &h2);
        let mu = out.narrow(0, self.m);
        let sigma = out.narrow(self.m, self.m).softplus().add_scalar(SIGMA_MIN);
        Ok((mu, sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcic_nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(b: usize, c: usize, h: usize, w: usize) -> MultiScaleContext<f32> {
        let t = |s: usize| Var::constant(Tensor::from_fn(&[b, c, h / s, w / s], |i| (i % 5) as f32 * 0.1));
        MultiScaleContext {
            c1: t(1),
            c2: t(2),
            c3: t(4),
            c_hyper: None,
        }
    }

    #[test]
    fn transform_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let ga = Analysis::new(&mut init, 8, 12, Some(4));
        let gs = Synthesis::new(&mut init, 8, 12, Some(4));
        let ha = HyperAnalysis::new(&mut init, 8, 12);
        let hs = HyperSynthesis::new(&mut init, 8, 12);
        let hr = HyperRefiner::new(&mut init, 12, 6);
        let p = store.vars();
        let c = ctx(1, 4, 64, 128);
        let x = Var::constant(Tensor::from_fn(&[1, 3, 64, 128], |i| (i % 11) as f32 / 11.0));
        let y = ga.forward(&p, &x, Some(&c)).unwrap();
        assert_eq!(y.shape(), &[1, 12, 4, 8]);
        let z = ha.forward(&p, &y).unwrap();
        assert_eq!(z.shape(), &[1, 8, 1, 2]);
        let zh = hs.forward(&p, &z);
        assert_eq!(zh.shape(), &[1, 24, 4, 8]);
        let (mu, sigma) = hr.forward(&p, &zh, None).unwrap();
        assert_eq!(mu.shape(), y.shape());
        assert!(sigma.value().data().iter().all(|&s| s as f64 >= SIGMA_MIN - 1e-7));
        let x_hat = gs.forward(&p, &y, Some(&c)).unwrap();
        assert_eq!(x_hat.shape(), x.shape());
        assert!(matches!(ga.forward(&p, &x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn unconditional_analysis_ignores_context() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ga = Analysis::new(&mut Init::new(&mut store, &mut rng), 4, 6, None);
        let p = store.vars();
        let x = Var::constant(Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 13) as f32 / 13.0));
        let a = ga.forward(&p, &x, None).unwrap();
        let b = ga.forward(&p, &x, Some(&ctx(1, 4, 32, 32))).unwrap();
        assert_eq!(a.value(), b.value());
    }
}
