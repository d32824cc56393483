//! Point-cloud branch: depth-to-image prediction and multi-scale context.

use pcic_nn::layers::{AttentionBlock, Conv2d, ResBlock};
use pcic_nn::{Float, Init, Params, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextNetConfig {
    /// Channels of the full/half/quarter-scale features.
    pub c_channels: usize,
    /// Channels of the latent-scale fused feature.
    pub c_hyper_channels: usize,
    pub pip_width: usize,
}

impl Default for ContextNetConfig {
    fn default() -> Self {
        Self {
            c_channels: 32,
            c_hyper_channels: 64,
            pip_width: 64,
        }
    }
}

impl ContextNetConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("context.c_channels", self.c_channels),
            ("context.c_hyper_channels", self.c_hyper_channels),
            ("context.pip_width", self.pip_width),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    field: field.into(),
                    message: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Context features at full, half, quarter and latent (1/16) scale.
#[derive(Debug, Clone)]
pub struct MultiScaleContext<T: Float> {
    pub c1: Var<T>,
    pub c2: Var<T>,
    pub c3: Var<T>,
    /// Absent when the fusion stage is disabled.
    pub c_hyper: Option<Var<T>>,
}

pub(crate) fn check_divisible(shape: &[usize], factor: usize, what: &str) -> Result<()> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "{what}: {h}×{w} is not a non-empty multiple of {factor}"
        )));
    }
    Ok(())
}

/// Sparse depth → 3-channel image-like prediction in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct Pip {
    head: Conv2d,
    res1: ResBlock,
    attn: AttentionBlock,
    res2: ResBlock,
    tail: Conv2d,
}

impl Pip {
    pub fn new<T: Float>(init: &mut Init<'_, T>, width: usize) -> Self {
        let mut s = init.scope("pip");
        Self {
            head: Conv2d::new(&mut s, "head", 1, width, 3, 1),
            res1: ResBlock::new(&mut s, "res1", width),
            attn: AttentionBlock::new(&mut s, "attn", width),
            res2: ResBlock::new(&mut s, "res2", width),
            tail: Conv2d::new(&mut s, "tail", width, 3, 3, 1),
        }
    }

    /// `depth` is `[B, 1, H, W]` scaled into `[0, 1]`.
    pub fn forward<T: Float>(&self, p: &Params<T>, depth: &Var<T>) -> Result<Var<T>> {
        check_divisible(depth.shape(), 16, "pip input")?;
        let h = self.head.forward(p, depth);
        let h = self.res1.forward(p, &h);
        let h = self.attn.forward(p, &h);
        let h = self.res2.forward(p, &h);
        Ok(self.tail.forward(p, &h).sigmoid())
    }
}

/// Convolution, residual block and attention block at one scale.
#[derive(Debug, Clone)]
struct ExtractionLayer {
    conv: Conv2d,
    res: ResBlock,
    attn: AttentionBlock,
}

impl ExtractionLayer {
    fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c_in: usize, c: usize, stride: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            conv: Conv2d::new(&mut s, "conv", c_in, c, 3, stride),
            res: ResBlock::new(&mut s, "res", c),
            attn: AttentionBlock::new(&mut s, "attn", c),
        }
    }

    fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        let h = self.conv.forward(p, x);
        self.attn.forward(p, &self.res.forward(p, &h))
    }
}

/// Features at full, half and quarter scale, chained by stride-2 layers.
#[derive(Debug, Clone)]
pub struct FeatureGeneration {
    layers: [ExtractionLayer; 3],
}

impl FeatureGeneration {
    pub fn new<T: Float>(init: &mut Init<'_, T>, c_in: usize, c: usize) -> Self {
        let mut s = init.scope("fg");
        Self {
            layers: [
                ExtractionLayer::new(&mut s, "scale1", c_in, c, 1),
                ExtractionLayer::new(&mut s, "scale2", c, c, 2),
                ExtractionLayer::new(&mut s, "scale3", c, c, 2),
            ],
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        check_divisible(x.shape(), 4, "feature generation input")?;
        let c1 = self.layers[0].forward(p, x);
        let c2 = self.layers[1].forward(p, &c1);
        let c3 = self.layers[2].forward(p, &c2);
        Ok((c1, c2, c3))
    }
}

/// Convolution plus residual block after a concatenation.
#[derive(Debug, Clone)]
struct FusionLayer {
    conv: Conv2d,
    res: ResBlock,
}

impl FusionLayer {
    fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c_in: usize, c: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            conv: Conv2d::new(&mut s, "conv", c_in, c, 3, 1),
            res: ResBlock::new(&mut s, "res", c),
        }
    }

    fn forward<T: Float>(&self, p: &Params<T>, x: &Var<T>) -> Var<T> {
        self.res.forward(p, &self.conv.forward(p, x))
    }
}

/// Merge the three scales into one latent-scale feature.
#[derive(Debug, Clone)]
pub struct FeatureFusion {
    down1: Conv2d,
    fuse1: FusionLayer,
    down2: Conv2d,
    fuse2: FusionLayer,
    out1: Conv2d,
    out2: Conv2d,
}

impl FeatureFusion {
    pub fn new<T: Float>(init: &mut Init<'_, T>, c: usize, c_hyper: usize) -> Self {
        let mut s = init.scope("ff");
        Self {
            down1: Conv2d::new(&mut s, "down1", c, c, 3, 2),
            fuse1: FusionLayer::new(&mut s, "fuse1", 2 * c, c),
            down2: Conv2d::new(&mut s, "down2", c, c, 3, 2),
            fuse2: FusionLayer::new(&mut s, "fuse2", 2 * c, c),
            out1: Conv2d::new(&mut s, "out1", c, c_hyper, 3, 2),
            out2: Conv2d::new(&mut s, "out2", c_hyper, c_hyper, 3, 2),
        }
    }

    pub fn forward<T: Float>(&self, p: &Params<T>, c1: &Var<T>, c2: &Var<T>, c3: &Var<T>) -> Result<Var<T>> {
        let (b, _, h, w) = c1.value().dims4();
        check_divisible(c1.shape(), 16, "feature fusion input")?;
        let (b2, _, h2, w2) = c2.value().dims4();
        let (b3, _, h3, w3) = c3.value().dims4();
        if (b2, h2 * 2, w2 * 2) != (b, h, w) || (b3, h3 * 4, w3 * 4) != (b, h, w) {
            return Err(Error::Shape(format!(
                "context scales {:?}, {:?}, {:?} are not 1 : 1/2 : 1/4",
                c1.shape(),
                c2.shape(),
                c3.shape()
            )));
        }
        let h = self.down1.forward(p, c1);
        let h = self.fuse1.forward(p, &Var::cat(&[&h, c2]));
        let h = self.down2.forward(p, &h);
        let h = self.fuse2.forward(p, &Var::cat(&[&h, c3]));
        Ok(self.out2.forward(p, &self.out1.forward(p, &h)))
    }
}

/// Which parts of the point-cloud branch exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchLayout {
    /// Predict an image first; otherwise the depth map feeds feature
    /// generation directly.
    pub prediction: bool,
    /// Build the latent-scale fusion stage.
    pub fusion: bool,
}

#[derive(Debug, Clone)]
pub struct ContextNet {
    pip: Option<Pip>,
    fg: FeatureGeneration,
    ff: Option<FeatureFusion>,
    pub config: ContextNetConfig,
}

#[derive(Debug, Clone)]
pub struct ContextOutput<T: Float> {
    /// PIP output, when the prediction stage exists.
    pub c_pre: Option<Var<T>>,
    pub ctx: MultiScaleContext<T>,
}

impl ContextNet {
    pub fn new<T: Float>(init: &mut Init<'_, T>, config: ContextNetConfig, layout: BranchLayout) -> Self {
        let mut s = init.scope("context");
        let pip = layout.prediction.then(|| Pip::new(&mut s, config.pip_width));
        let fg_in = if layout.prediction { 3 } else { 1 };
        let fg = FeatureGeneration::new(&mut s, fg_in, config.c_channels);
        let ff = layout
            .fusion
            .then(|| FeatureFusion::new(&mut s, config.c_channels, config.c_hyper_channels));
        Self { pip, fg, ff, config }
    }

    pub fn mcm_input_channels(&self) -> usize {
        if self.pip.is_some() {
            3
        } else {
            1
        }
    }

    /// `depth` is `[B, 1, H, W]` in `[0, 1]`.
    pub fn forward<T: Float>(&self, p: &Params<T>, depth: &Var<T>) -> Result<ContextOutput<T>> {
        self.forward_with(p, depth, false)
    }

    /// As [`Self::forward`]; `detach_prediction` stops gradients of the
    /// multi-scale features from reaching the prediction stage.
    pub fn forward_with<T: Float>(&self, p: &Params<T>, depth: &Var<T>, detach_prediction: bool) -> Result<ContextOutput<T>> {
        check_divisible(depth.shape(), 16, "context input")?;
        if depth.shape()[1] != 1 {
            return Err(Error::Shape(format!("depth must have 1 channel, got {:?}", depth.shape())));
        }
        let c_pre = self.pip.as_ref().map(|pip| pip.forward(p, depth)).transpose()?;
        let fg_input = match &c_pre {
            Some(c) if detach_prediction => c.detach(),
            Some(c) => c.clone(),
            None => depth.clone(),
        };
        let (c1, c2, c3) = self.fg.forward(p, &fg_input)?;
        let c_hyper = self.ff.as_ref().map(|ff| ff.forward(p, &c1, &c2, &c3)).transpose()?;
        Ok(ContextOutput {
            c_pre,
            ctx: MultiScaleContext { c1, c2, c3, c_hyper },
        })
    }
}

/// Photometric augmentation of the prediction target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub contrast: f32,
    pub brightness: f32,
    pub invert: bool,
}

impl ColorJitter {
    pub const NEUTRAL: Self = Self {
        contrast: 1.0,
        brightness: 0.0,
        invert: false,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            contrast: rng.gen_range(0.5..=1.5),
            brightness: rng.gen_range(-0.25..=0.25),
            invert: rng.gen_bool(0.5),
        }
    }

    /// Apply to one `3 × H × W` image in place: contrast about the channel
    /// mean, brightness offset, optional inversion, then clamp to `[0, 1]`.
    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / 3;
        for ch in image.chunks_mut(plane.max(1)) {
            let mean = (ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64) as f32;
            for v in ch.iter_mut() {
                let mut x = mean + self.contrast * (*v - mean) + self.brightness;
                if self.invert {
                    x = 1.0 - x;
                }
                *v = x.clamp(0.0, 1.0);
            }
        }
    }
}

/// Seeded color transform of a `[3, H, W]` or `[B, 3, H, W]` image; every
/// sample of a batch gets its own draw.
pub fn random_color_transform<T: Float>(image: &Tensor<T>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter_batch(image, &mut rng)
}

pub(crate) fn jitter_batch<T: Float>(image: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let sample = 3 * image.shape()[image.shape().len() - 2] * image.shape()[image.shape().len() - 1];
    let mut out = image.clone();
    let mut buf = vec![0f32; sample];
    for chunk in out.data_mut().chunks_mut(sample) {
        for (b, v) in buf.iter_mut().zip(chunk.iter()) {
            *b = v.f64() as f32;
        }
        ColorJitter::draw(rng).apply(&mut buf);
        for (v, b) in chunk.iter_mut().zip(&buf) {
            *v = T::of(*b as f64);
        }
    }
    out
}

/// Mean squared error between the prediction and the jittered image.
pub fn prediction_loss<T: Float>(pred: &Var<T>, image: &Tensor<T>, seed: u64) -> Result<Var<T>> {
    if pred.shape() != image.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs image {:?}",
            pred.shape(),
            image.shape()
        )));
    }
    Ok(pred.mse(&Var::constant(random_color_transform(image, seed))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcic_nn::ParamStore;

    fn build(cfg: ContextNetConfig, layout: BranchLayout) -> (ParamStore<f32>, ContextNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ContextNet::new(&mut Init::new(&mut store, &mut rng), cfg, layout);
        (store, net)
    }

    const FULL: BranchLayout = BranchLayout {
        prediction: true,
        fusion: true,
    };

    fn small() -> ContextNetConfig {
        ContextNetConfig {
            c_channels: 4,
            c_hyper_channels: 6,
            pip_width: 4,
        }
    }

    #[test]
    fn context_shapes_follow_scale_ratios() {
        let (store, net) = build(small(), FULL);
        let depth = Var::constant(Tensor::from_fn(&[2, 1, 32, 48], |i| (i % 7) as f32 / 7.0));
        let out = net.forward(&store.vars(), &depth).unwrap();
        assert_eq!(out.c_pre.unwrap().shape(), &[2, 3, 32, 48]);
        assert_eq!(out.ctx.c1.shape(), &[2, 4, 32, 48]);
        assert_eq!(out.ctx.c2.shape(), &[2, 4, 16, 24]);
        assert_eq!(out.ctx.c3.shape(), &[2, 4, 8, 12]);
        assert_eq!(out.ctx.c_hyper.unwrap().shape(), &[2, 6, 2, 3]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (store, net) = build(small(), FULL);
        let depth = Var::constant(Tensor::zeros(&[1, 1, 24, 32]));
        assert!(matches!(net.forward(&store.vars(), &depth), Err(Error::Shape(_))));
    }

    #[test]
    fn pip_output_range_and_constant_input() {
        let (store, net) = build(small(), FULL);
        let depth = Var::constant(Tensor::zeros(&[1, 1, 16, 16]));
        let pred = net.forward(&store.vars(), &depth).unwrap().c_pre.unwrap();
        let v = pred.value().data();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        for ch in v.chunks(256) {
            assert!(ch.iter().all(|&x| x == ch[0]));
        }
    }

    #[test]
    fn zero_features_stay_zero() {
        let (store, net) = build(small(), FULL);
        let p = store.vars();
        let x = Var::constant(Tensor::zeros(&[1, 3, 16, 16]));
        let (c1, c2, c3) = net.fg.forward(&p, &x).unwrap();
        let fused = net.ff.as_ref().unwrap().forward(&p, &c1, &c2, &c3).unwrap();
        for t in [&c1, &c2, &c3, &fused] {
            assert!(t.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fusion_rejects_mismatched_scales() {
        let (store, net) = build(small(), FULL);
        let p = store.vars();
        let c = |h| Var::constant(Tensor::<f32>::zeros(&[1, 4, h, h]));
        let r = net.ff.as_ref().unwrap().forward(&p, &c(16), &c(8), &c(8));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn depth_only_branch_has_single_channel_input() {
        let (store, net) = build(
            small(),
            BranchLayout {
                prediction: false,
                fusion: true,
            },
        );
        assert_eq!(net.mcm_input_channels(), 1);
        assert_eq!(store.numel_with_prefix("context.pip"), 0);
        let depth = Var::constant(Tensor::zeros(&[1, 1, 16, 16]));
        let out = net.forward(&store.vars(), &depth).unwrap();
        assert!(out.c_pre.is_none());
        assert_eq!(out.ctx.c1.shape(), &[1, 4, 16, 16]);
    }

    #[test]
    fn neutral_and_inverting_jitter() {
        let img: Vec<f32> = (0..48).map(|i| i as f32 / 47.0).collect();
        let mut same = img.clone();
        ColorJitter::NEUTRAL.apply(&mut same);
        for (a, b) in img.iter().zip(&same) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut inv = img.clone();
        ColorJitter {
            invert: true,
            ..ColorJitter::NEUTRAL
        }
        .apply(&mut inv);
        for (a, b) in img.iter().zip(&inv) {
            assert!((1.0 - a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn prediction_loss_of_offset_target() {
        let img = Tensor::from_fn(&[1, 3, 4, 4], |i| 0.2 + (i % 5) as f32 * 0.1);
        let target = random_color_transform(&img, 17);
        let exact = prediction_loss(&Var::constant(target.clone()), &img, 17).unwrap();
        assert_eq!(exact.value().data()[0], 0.0);
        let shifted = Var::constant(target.map(|v| v + 0.1));
        let l = prediction_loss(&shifted, &img, 17).unwrap().value().data()[0];
        assert!((l - 0.01).abs() < 1e-6, "{l}");
        let wrong = Var::constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(matches!(prediction_loss(&wrong, &img, 17), Err(Error::Shape(_))));
    }
}
