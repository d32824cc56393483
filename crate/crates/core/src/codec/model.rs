//! The joint model: context network, transforms and entropy models, plus
//! the coding pipeline around them.

use std::fmt;
use std::str::FromStr;

use pcic_nn::{no_grad, Float, Init, ParamStore, Params, Tensor, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bitstream::{self, Bitstream, EntropyParameters, Flags, Header, LatentPair};
use super::coder::TableModel;
use super::entropy::{noise, round_even, EntropyBottleneck, FactorizedDensity, LIKELIHOOD_BOUND};
use super::transforms::{Analysis, HyperAnalysis, HyperRefiner, HyperSynthesis, Synthesis};
use super::{CodecConfig, InjectionSides};
use crate::context::{BranchLayout, ContextNet, ContextNetConfig, ContextOutput};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::projection::EqualizedDepthMap;

/// Variants of the point-cloud branch studied in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Depth map feeds feature generation directly.
    NoPip,
    /// Multi-scale features are not concatenated into the transforms.
    NoFg,
    /// The refiner receives zeros instead of the fused feature.
    NoFf,
    EncoderOnly,
    DecoderOnly,
    /// The branch sees an all-zero depth map.
    ZerosInput,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoPip,
        Ablation::NoFg,
        Ablation::NoFf,
        Ablation::EncoderOnly,
        Ablation::DecoderOnly,
        Ablation::ZerosInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPip => "no_pip",
            Ablation::NoFg => "no_fg",
            Ablation::NoFf => "no_ff",
            Ablation::EncoderOnly => "encoder_only",
            Ablation::DecoderOnly => "decoder_only",
            Ablation::ZerosInput => "zeros_input",
        }
    }

    /// Injection sides this variant implies.
    pub fn injection_sides(self) -> InjectionSides {
        match self {
            Ablation::EncoderOnly => InjectionSides::Encoder,
            Ablation::DecoderOnly => InjectionSides::Decoder,
            _ => InjectionSides::Both,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                format!("unknown ablation `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub context: ContextNetConfig,
    pub codec: CodecConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Build a config whose injection sides follow `ablation`.
    pub fn new(context: ContextNetConfig, mut codec: CodecConfig, ablation: Ablation) -> Self {
        codec.injection_sides = ablation.injection_sides();
        Self {
            context,
            codec,
            ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        self.codec.validate()?;
        if !self.codec.conditional && self.ablation != Ablation::Full {
            return Err(Error::InvalidConfig {
                field: "ablation".into(),
                message: format!("`{}` needs a conditional codec", self.ablation),
            });
        }
        if self.codec.injection_sides != self.ablation.injection_sides() {
            return Err(Error::InvalidConfig {
                field: "codec.injection_sides".into(),
                message: format!(
                    "{:?} contradicts ablation `{}`",
                    self.codec.injection_sides, self.ablation
                ),
            });
        }
        Ok(())
    }

    pub fn routing(&self) -> Routing {
        if !self.codec.conditional {
            return Routing {
                branch: None,
                inject_analysis: false,
                inject_synthesis: false,
                refiner_context: false,
                zeros_input: false,
            };
        }
        let a = self.ablation;
        let fusion = !matches!(a, Ablation::NoFf | Ablation::EncoderOnly);
        Routing {
            branch: Some(BranchLayout {
                prediction: a != Ablation::NoPip,
                fusion,
            }),
            inject_analysis: !matches!(a, Ablation::NoFg | Ablation::DecoderOnly),
            inject_synthesis: !matches!(a, Ablation::NoFg | Ablation::EncoderOnly),
            refiner_context: fusion,
            zeros_input: a == Ablation::ZerosInput,
        }
    }
}

/// Where context is computed and consumed for a given config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub branch: Option<BranchLayout>,
    pub inject_analysis: bool,
    pub inject_synthesis: bool,
    /// The refiner consumes the fused latent-scale feature.
    pub refiner_context: bool,
    pub zeros_input: bool,
}

impl Routing {
    /// Whether the decoder needs the depth map at all.
    pub fn decoder_uses_context(&self) -> bool {
        self.branch.is_some() && (self.inject_synthesis || self.refiner_context)
    }
}

/// Layer definitions of the whole model, valid for any parameter store
/// built from the same config.
#[derive(Debug, Clone)]
pub struct Network {
    pub context: Option<ContextNet>,
    pub analysis: Analysis,
    pub synthesis: Synthesis,
    pub hyper_analysis: HyperAnalysis,
    pub hyper_synthesis: HyperSynthesis,
    pub refiner: HyperRefiner,
    pub bottleneck: EntropyBottleneck,
    pub routing: Routing,
    /// Keep codec gradients out of the prediction stage (training only).
    pub detach_prediction: bool,
}

/// Intermediate values of one training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Float> {
    pub x_hat: Var<T>,
    /// Noisy latents.
    pub y_tilde: Var<T>,
    pub z_tilde: Var<T>,
    pub mu: Var<T>,
    pub sigma: Var<T>,
    pub c_pre: Option<Var<T>>,
    /// Summed bits of `y_tilde` and `z_tilde`.
    pub bits_y: Var<T>,
    pub bits_z: Var<T>,
}

impl Network {
    pub fn new<T: Float>(init: &mut Init<'_, T>, config: &ModelConfig) -> Self {
        let routing = config.routing();
        let (n, m) = (config.codec.n_channels, config.codec.m_channels);
        let c = config.context.c_channels;
        let context = routing.branch.map(|layout| ContextNet::new(init, config.context, layout));
        let ctx_in = |on: bool| on.then_some(c);
        let refiner_ctx = if routing.branch.is_some() {
            config.context.c_hyper_channels
        } else {
            0
        };
        Self {
            context,
            analysis: Analysis::new(init, n, m, ctx_in(routing.inject_analysis)),
            synthesis: Synthesis::new(init, n, m, ctx_in(routing.inject_synthesis)),
            hyper_analysis: HyperAnalysis::new(init, n, m),
            hyper_synthesis: HyperSynthesis::new(init, n, m),
            refiner: HyperRefiner::new(init, m, refiner_ctx),
            bottleneck: EntropyBottleneck::new(init, n),
            routing,
            detach_prediction: false,
        }
    }

    /// Run the point-cloud branch on `[B, 1, H, W]` depth in `[0, 1]`.
    pub fn context_forward<T: Float>(&self, p: &Params<T>, depth: &Tensor<T>, zeros: bool) -> Result<Option<ContextOutput<T>>> {
        let Some(net) = &self.context else { return Ok(None) };
        let input = if zeros || self.routing.zeros_input {
            Tensor::zeros(depth.shape())
        } else {
            depth.clone()
        };
        net.forward_with(p, &Var::constant(input), self.detach_prediction).map(Some)
    }

    /// Entropy parameters from the hyper-latents and the optional context.
    pub fn entropy_parameters<T: Float>(
        &self,
        p: &Params<T>,
        z_hat: &Var<T>,
        ctx: Option<&ContextOutput<T>>,
    ) -> Result<(Var<T>, Var<T>)> {
        let z_hyper = self.hyper_synthesis.forward(p, z_hat);
        let c_hyper = if self.routing.refiner_context {
            ctx.and_then(|c| c.ctx.c_hyper.as_ref())
        } else {
            None
        };
        self.refiner.forward(p, &z_hyper, c_hyper)
    }

    /// Training pass with additive-noise quantization.
    pub fn forward_train<T: Float>(
        &self,
        p: &Params<T>,
        image: &Var<T>,
        depth: &Tensor<T>,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardTrace<T>> {
        crate::context::check_divisible(image.shape(), 64, "training patch")?;
        let out = self.context_forward(p, depth, false)?;
        let ctx = out.as_ref().map(|o| &o.ctx);
        let y = self.analysis.forward(p, image, ctx.filter(|_| self.routing.inject_analysis))?;
        let z = self.hyper_analysis.forward(p, &y)?;
        let z_tilde = z.add(&Var::constant(noise(z.shape(), rng)));
        let (mu, sigma) = self.entropy_parameters(p, &z_tilde, out.as_ref())?;
        let y_tilde = y.add(&Var::constant(noise(y.shape(), rng)));
        let x_hat = self
            .synthesis
            .forward(p, &y_tilde, ctx.filter(|_| self.routing.inject_synthesis))?;
        let bits_y = y_tilde.gaussian_bits(&mu, &sigma, LIKELIHOOD_BOUND).sum();
        let bits_z = self.bottleneck.bits(p, &z_tilde).sum();
        Ok(ForwardTrace {
            x_hat,
            y_tilde,
            z_tilde,
            mu,
            sigma,
            c_pre: out.and_then(|o| o.c_pre),
            bits_y,
            bits_z,
        })
    }
}

/// Parameters plus layer definitions.
#[derive(Debug, Clone)]
pub struct PcicModel {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore<f32>,
}

/// Everything the encoder knows after coding one frame.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub stream: Bitstream,
    /// Encoder-side reconstruction, cropped and clamped.
    pub x_hat: Image,
    pub latents: LatentPair,
    pub params: EntropyParameters,
}

fn image_tensor(image: &Image) -> Tensor<f32> {
    Tensor::from_vec(&[1, 3, image.height, image.width], image.data.clone())
}

fn padded(len: usize) -> usize {
    len.div_ceil(64) * 64
}

impl PcicModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&mut Init::new(&mut store, &mut rng), &config);
        Ok(Self { config, net, store })
    }

    /// Rebuild around an existing parameter store (e.g. from a checkpoint).
    pub fn with_store(config: ModelConfig, store: ParamStore<f32>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.store.len() != store.len() {
            return Err(Error::ModelMismatch(format!(
                "config implies {} parameter arrays, store has {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (id, name, t) in fresh.store.iter() {
            match store.id(name) {
                Some(other) if other == id && store.get(other).shape() == t.shape() => {}
                _ => return Err(Error::ModelMismatch(format!("parameter `{name}` missing or reshaped"))),
            }
        }
        Ok(Self {
            config,
            net: fresh.net,
            store,
        })
    }

    pub fn density(&self) -> FactorizedDensity {
        self.net.bottleneck.density(&self.store)
    }

    pub fn z_tables(&self) -> Vec<TableModel> {
        let d = self.density();
        (0..d.channels()).map(|c| TableModel::from_density(&d, c)).collect()
    }

    pub fn flags(&self, zeros: bool) -> Flags {
        let conditional = self.config.codec.conditional;
        Flags {
            conditional,
            zeros: conditional && (zeros || self.net.routing.zeros_input),
            encoder_only: conditional && self.config.codec.injection_sides == InjectionSides::Encoder,
            decoder_only: conditional && self.config.codec.injection_sides == InjectionSides::Decoder,
        }
    }

    fn depth_tensor(&self, depth: Option<&EqualizedDepthMap>, height: usize, width: usize) -> Result<Tensor<f32>> {
        let (ph, pw) = (padded(height), padded(width));
        match depth {
            Some(d) => {
                if (d.height, d.width) != (height, width) {
                    return Err(Error::Shape(format!(
                        "depth map {}×{} does not match image {height}×{width}",
                        d.height, d.width
                    )));
                }
                Ok(Tensor::from_vec(&[1, 1, height, width], d.to_unit()).pad_reflect(ph - height, pw - width))
            }
            None => Ok(Tensor::zeros(&[1, 1, ph, pw])),
        }
    }

    fn latent_shapes(&self, height: usize, width: usize) -> ([usize; 3], [usize; 3]) {
        let (ph, pw) = (padded(height), padded(width));
        let c = &self.config.codec;
        (
            [c.m_channels, ph / 16, pw / 16],
            [c.n_channels, ph / 64, pw / 64],
        )
    }

    fn reconstruct(&self, p: &Params<f32>, y_hat: &Var<f32>, ctx: Option<&ContextOutput<f32>>, h: usize, w: usize) -> Result<Image> {
        let ctx = ctx.map(|c| &c.ctx).filter(|_| self.net.routing.inject_synthesis);
        let x = self.net.synthesis.forward(p, y_hat, ctx)?;
        let x = x.value().crop(0, 0, h, w).map(|v| v.clamp(0.0, 1.0));
        Ok(Image::new(w, h, x.into_vec()))
    }

    /// Encode `image`. `depth = None` runs the point-cloud branch on zeros.
    pub fn compress(&self, image: &Image, depth: Option<&EqualizedDepthMap>) -> Result<Compressed> {
        let (h, w) = (image.height, image.width);
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::Shape(format!("{h}×{w} exceeds the header's 16-bit dimensions")));
        }
        let flags = self.flags(depth.is_none());
        let header = Header {
            flags,
            lambda_index: self.config.codec.lambda_index,
            height: h as u16,
            width: w as u16,
        };
        let (y_shape, z_shape) = self.latent_shapes(h, w);
        if h == 0 || w == 0 {
            let latents = LatentPair {
                y_shape,
                y: vec![],
                z_shape,
                z: vec![],
            };
            let params = EntropyParameters::default();
            let stream = bitstream::encode_bitstream(&latents, &params, &[], header);
            return Ok(Compressed {
                stream,
                x_hat: Image::new(w, h, vec![]),
                latents,
                params,
            });
        }
        let _guard = no_grad();
        let p = self.store.vars();
        let (ph, pw) = (padded(h), padded(w));
        let x = Var::constant(image_tensor(image).pad_reflect(ph - h, pw - w));
        let depth = self.depth_tensor(depth, h, w)?;
        let ctx = self.net.context_forward(&p, &depth, flags.zeros)?;
        let enc_ctx = ctx.as_ref().map(|c| &c.ctx).filter(|_| self.net.routing.inject_analysis);
        let y = self.net.analysis.forward(&p, &x, enc_ctx)?;
        let z = self.net.hyper_analysis.forward(&p, &y)?;
        let z_sym: Vec<i32> = z.value().data().iter().map(|&v| round_even(v) as i32).collect();
        let z_hat = Var::constant(Tensor::from_vec(z.shape(), z_sym.iter().map(|&v| v as f32).collect()));
        let (mu, sigma) = self.net.entropy_parameters(&p, &z_hat, ctx.as_ref())?;
        let y_sym: Vec<i32> = y
            .value()
            .data()
            .iter()
            .zip(mu.value().data())
            .map(|(&v, &m)| round_even(v - m) as i32)
            .collect();
        let y_hat = dequantize_y(&y_sym, mu.value());
        let x_hat = self.reconstruct(&p, &y_hat, ctx.as_ref(), h, w)?;
        let latents = LatentPair {
            y_shape,
            y: y_sym,
            z_shape,
            z: z_sym,
        };
        let params = EntropyParameters {
            mu: mu.value().data().to_vec(),
            sigma: sigma.value().data().to_vec(),
        };
        let stream = bitstream::encode_bitstream(&latents, &params, &self.z_tables(), header);
        Ok(Compressed {
            stream,
            x_hat,
            latents,
            params,
        })
    }

    /// Reject streams produced by a different model.
    pub fn check_header(&self, header: &Header) -> Result<()> {
        let expect = self.flags(header.flags.zeros);
        if header.lambda_index != self.config.codec.lambda_index {
            return Err(Error::ModelMismatch(format!(
                "stream lambda index {} but model was trained for {}",
                header.lambda_index, self.config.codec.lambda_index
            )));
        }
        if header.flags != expect {
            return Err(Error::ModelMismatch(format!(
                "stream flags {:?} do not match model flags {:?}",
                header.flags, expect
            )));
        }
        Ok(())
    }

    pub fn decompress(&self, stream: &Bitstream, depth: Option<&EqualizedDepthMap>) -> Result<Image> {
        self.check_header(&stream.header)?;
        let (h, w) = (stream.header.height as usize, stream.header.width as usize);
        let (y_shape, z_shape) = self.latent_shapes(h, w);
        if h == 0 || w == 0 {
            bitstream::decode_bitstream(stream, [0; 3], [0; 3], &[], |_| Ok(EntropyParameters::default()))?;
            return Ok(Image::new(w, h, vec![]));
        }
        let zeros = stream.header.flags.zeros;
        if !zeros && depth.is_none() && self.net.routing.decoder_uses_context() {
            return Err(Error::ModelMismatch("stream was coded with a depth map; none was supplied".into()));
        }
        let _guard = no_grad();
        let p = self.store.vars();
        let ctx = if self.net.routing.decoder_uses_context() {
            let depth = self.depth_tensor(if zeros { None } else { depth }, h, w)?;
            self.net.context_forward(&p, &depth, zeros)?
        } else {
            None
        };
        let mut mu_field = None;
        let latents = bitstream::decode_bitstream(stream, y_shape, z_shape, &self.z_tables(), |z| {
            let z_hat = Var::constant(Tensor::from_vec(
                &[1, z_shape[0], z_shape[1], z_shape[2]],
                z.iter().map(|&v| v as f32).collect(),
            ));
            let (mu, sigma) = self.net.entropy_parameters(&p, &z_hat, ctx.as_ref())?;
            let params = EntropyParameters {
                mu: vec![],
                sigma: sigma.value().data().to_vec(),
            };
            mu_field = Some(mu.value().clone());
            Ok(params)
        })?;
        let mu = mu_field.expect("entropy parameters computed");
        let y_hat = dequantize_y(&latents.y, &mu);
        self.reconstruct(&p, &y_hat, ctx.as_ref(), h, w)
    }
}

/// `ŷ = symbol + μ`.
fn dequantize_y(symbols: &[i32], mu: &Tensor<f32>) -> Var<f32> {
    Var::constant(Tensor::from_vec(
        mu.shape(),
        symbols.iter().zip(mu.data()).map(|(&s, &m)| s as f32 + m).collect(),
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny(ablation: Ablation) -> ModelConfig {
        ModelConfig::new(
            ContextNetConfig {
                c_channels: 4,
                c_hyper_channels: 4,
                pip_width: 4,
            },
            CodecConfig {
                n_channels: 8,
                m_channels: 8,
                lambda_index: 2,
                conditional: true,
                injection_sides: InjectionSides::Both,
            },
            ablation,
        )
    }

    fn frame(w: usize, h: usize) -> (Image, EqualizedDepthMap) {
        let img = Image::new(
            w,
            h,
            (0..3 * w * h).map(|i| ((i * 37) % 101) as f32 / 100.0).collect(),
        );
        let depth = EqualizedDepthMap {
            width: w,
            height: h,
            values: (0..w * h).map(|i| if i % 9 == 0 { (i % 255) as u8 + 1 } else { 0 }).collect(),
        };
        (img, depth)
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn contradictory_injection_sides_rejected() {
        let mut c = tiny(Ablation::EncoderOnly);
        c.codec.injection_sides = InjectionSides::Both;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn round_trip_every_ablation_with_padding() {
        let (img, depth) = frame(70, 40);
        for a in Ablation::ALL {
            let model = PcicModel::new(tiny(a), 5).unwrap();
            let c = model.compress(&img, Some(&depth)).unwrap();
            let bytes = c.stream.to_bytes();
            let back = model.decompress(&Bitstream::from_bytes(&bytes).unwrap(), Some(&depth)).unwrap();
            assert_eq!(back, c.x_hat, "{a}");
            assert_eq!((back.width, back.height), (70, 40));
        }
    }

    #[test]
    fn zeros_mode_and_mismatch() {
        let (img, _) = frame(64, 64);
        let model = PcicModel::new(tiny(Ablation::Full), 6).unwrap();
        let c = model.compress(&img, None).unwrap();
        assert!(c.stream.header.flags.zeros);
        assert_eq!(model.decompress(&c.stream, None).unwrap(), c.x_hat);
        let mut other = tiny(Ablation::Full);
        other.codec.lambda_index = 1;
        let other = PcicModel::with_store(other, model.store.clone()).unwrap();
        assert!(matches!(other.decompress(&c.stream, None), Err(Error::ModelMismatch(_))));
    }

    #[test]
    fn unconditional_model_codes_without_depth() {
        let mut cfg = tiny(Ablation::Full);
        cfg.codec.conditional = false;
        let model = PcicModel::new(cfg, 7).unwrap();
        assert!(model.net.context.is_none());
        let (img, _) = frame(64, 64);
        let c = model.compress(&img, None).unwrap();
        assert_eq!(c.stream.header.flags, Flags::default());
        assert_eq!(model.decompress(&c.stream, None).unwrap(), c.x_hat);
    }

    #[test]
    fn empty_frame_is_header_only() {
        let model = PcicModel::new(tiny(Ablation::Full), 8).unwrap();
        let c = model.compress(&Image::new(0, 0, vec![]), None).unwrap();
        assert_eq!(c.stream.to_bytes().len(), bitstream::HEADER_BYTES);
        let back = model.decompress(&c.stream, None).unwrap();
        assert_eq!((back.width, back.height), (0, 0));
    }
}
