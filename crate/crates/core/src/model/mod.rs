//! Two-stream RGB-thermal segmentation network.

mod backbone;
mod config;
mod decoder;
mod fusion;
mod gta;
pub mod pretrained;

use rtcan_tensor::{Builder, Context, ParamKind, ParamStore, Scalar, Tensor, Var};

pub use backbone::{Bottleneck, ConvBn, ResNet};
pub use config::{AttentionOrder, GtaPlacement, ModelConfig, Scheme};
pub use decoder::{Aggregation, Cbr, Decoder, HeadOutputs};
pub use fusion::{ChannelAttention, Fusion, FusionOutput, SpatialAttention};
pub use gta::Gta;

use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// Input spatial sizes must be multiples of this.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Thermal,
}

/// Module structure; parameters live in [`Model::params`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub rgb: ResNet,
    pub thermal: ResNet,
    pub fusion: Vec<Fusion>,
    /// One entry for deepest-only placement, five for per-stage.
    pub gta: Vec<Gta>,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<T>,
}

/// Five stages at strides 2, 4, 8, 16, 32.
pub struct FeaturePyramid<T: Scalar> {
    pub stages: Vec<Var<T>>,
}

/// Logit maps `[N, 2, H, W]` at input resolution.
pub struct Prediction<T: Scalar> {
    pub logits_deep: Var<T>,
    pub logits_shallow: Var<T>,
    pub logits_final: Var<T>,
}

impl<T: Scalar> Model<T> {
    /// Random initialization from `config.init_seed`, then pretrained
    /// backbone weights if requested.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config.block_counts().expect("validated depth");
        let channels = config.stage_channels();
        let mut b = Builder::<T>::new(config.init_seed);
        let rgb = b.scoped("rgb_encoder", |b| ResNet::new(b, config.rgb_in_channels, config.base_width, blocks))?;
        let thermal = b.scoped("thermal_encoder", |b| {
            ResNet::new(b, config.thermal_in_channels, config.base_width, blocks)
        })?;
        let fusion = b.scoped("fusion", |b| {
            channels
                .iter()
                .enumerate()
                .map(|(i, &c)| b.scoped(i.to_string(), |b| Fusion::new(b, c, config.scheme, config.attention_order)))
                .collect::<Result<Vec<_>>>()
        })?;
        let gta = b.scoped("gta", |b| -> Result<Vec<Gta>> {
            let make = |b: &mut Builder<T>, c: usize| {
                Gta::new(b, c, config.decoder_channels, &config.gta_kernel_sizes, config.gta_global_branch)
            };
            match config.gta_placement {
                GtaPlacement::Deepest => Ok(vec![make(b, channels[4])?]),
                GtaPlacement::PerStage => channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| b.scoped(i.to_string(), |b| make(b, c)))
                    .collect(),
            }
        })?;
        let decoder = b.scoped("decoder", |b| Decoder::new(b, channels, config.decoder_channels, config.num_classes))?;
        let mut model = Self {
            config: config.clone(),
            layout: Layout {
                rgb,
                thermal,
                fusion,
                gta,
                decoder,
            },
            params: b.finish(),
        };
        if config.pretrained_backbone {
            let path = config.pretrained_path.as_ref().expect("validated path");
            pretrained::load_backbone(&mut model, path)?;
        }
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().filter(|p| p.2 == ParamKind::Trainable).map(|p| p.3.numel()).sum()
    }

    /// Hash over names, shapes and values of every parameter and buffer.
    pub fn parameter_checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (_, name, kind, t) in self.params.iter() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(kind as u8);
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
        }
        sha256_hex(&bytes)
    }

    fn check_input(&self, stream: Stream, x: &Var<T>) -> Result<()> {
        let (name, expected) = match stream {
            Stream::Rgb => ("rgb", self.config.rgb_in_channels),
            Stream::Thermal => ("thermal", self.config.thermal_in_channels),
        };
        let s = x.shape();
        if s.len() != 4 || s[1] != expected {
            return Err(Error::Shape(format!("{name} input must be [N, {expected}, H, W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if s[0] == 0 || h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "{name} input {h}x{w} is empty or not divisible by {SIZE_MULTIPLE}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, ctx: &Context<'_, T>, stream: Stream, x: &Var<T>) -> Result<FeaturePyramid<T>> {
        self.check_input(stream, x)?;
        let net = match stream {
            Stream::Rgb => &self.layout.rgb,
            Stream::Thermal => &self.layout.thermal,
        };
        Ok(FeaturePyramid {
            stages: net.forward(ctx, x)?,
        })
    }

    /// Fused stages after the context block, ready for decoding.
    pub fn fuse(&self, ctx: &Context<'_, T>, thermal: &FeaturePyramid<T>, rgb: &FeaturePyramid<T>) -> Result<Vec<Var<T>>> {
        let mut fused = Vec::with_capacity(5);
        for (i, f) in self.layout.fusion.iter().enumerate() {
            fused.push(f.forward(ctx, &thermal.stages[i], &rgb.stages[i])?.output);
        }
        match self.config.gta_placement {
            GtaPlacement::Deepest => fused[4] = self.layout.gta[0].forward(ctx, &fused[4])?,
            GtaPlacement::PerStage => {
                for (x, g) in fused.iter_mut().zip(&self.layout.gta) {
                    *x = g.forward(ctx, x)?;
                }
            }
        }
        Ok(fused)
    }

    pub fn decode(&self, ctx: &Context<'_, T>, fused: &[Var<T>], height: usize, width: usize) -> Result<Prediction<T>> {
        let heads = self.layout.decoder.heads(ctx, fused)?;
        let logits_deep = heads.deep.upsample_bilinear(height, width)?;
        let logits_shallow = heads.shallow.upsample_bilinear(height, width)?;
        let logits_final = logits_deep.add(&logits_shallow)?.scale(T::lit(0.5));
        Ok(Prediction {
            logits_deep,
            logits_shallow,
            logits_final,
        })
    }

    /// `rgb` is `[N, 3, H, W]`, `thermal` is `[N, 1, H, W]`.
    pub fn forward(&self, ctx: &Context<'_, T>, rgb: &Var<T>, thermal: &Var<T>) -> Result<Prediction<T>> {
        self.check_input(Stream::Rgb, rgb)?;
        self.check_input(Stream::Thermal, thermal)?;
        if (rgb.shape()[0], rgb.shape()[2], rgb.shape()[3]) != (thermal.shape()[0], thermal.shape()[2], thermal.shape()[3]) {
            return Err(Error::Shape(format!(
                "rgb {:?} and thermal {:?} differ in batch or spatial size",
                rgb.shape(),
                thermal.shape()
            )));
        }
        let r = self.encode(ctx, Stream::Rgb, rgb)?;
        let t = self.encode(ctx, Stream::Thermal, thermal)?;
        let fused = self.fuse(ctx, &t, &r)?;
        self.decode(ctx, &fused, rgb.shape()[2], rgb.shape()[3])
    }

    /// Evaluation-mode forward on plain tensors.
    pub fn infer(&self, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<Prediction<T>> {
        let ctx = Context::eval(&self.params);
        self.forward(&ctx, &Var::constant(rgb.clone()), &Var::constant(thermal.clone()))
    }
}

/// Binary masks from `[N, 2, H, W]` logits: gas where its logit is strictly
/// larger, so ties go to background.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let (n, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("expected 2 logit channels, got {c}")));
    }
    let plane = h * w;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            let bg = &d[b * 2 * plane..(b * 2 + 1) * plane];
            let gas = &d[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
            bg.iter().zip(gas).map(|(&x0, &x1)| (x1 > x0) as u8).collect()
        })
        .collect())
}
