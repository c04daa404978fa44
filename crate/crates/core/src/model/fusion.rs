//! Cross-modal fusion of one pyramid stage and the attention blocks it uses.

use rtcan_tensor::{Builder, Context, Conv2d, Scalar, Var};

use super::config::{AttentionOrder, Scheme};
use crate::error::{Error, Result};

/// Squeeze-style channel gating: `x * sigmoid(fc2(relu(fc1(gap(x)))))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / 16).max(1);
        b.scoped(name, |b| {
            Ok(Self {
                fc1: Conv2d::new(b, "fc1", channels, hidden, 1, 1, 0, true)?,
                fc2: Conv2d::new(b, "fc2", hidden, channels, 1, 1, 0, true)?,
            })
        })
    }

    /// Per-channel scale, shape `[N, C, 1, 1]`.
    pub fn weights<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.global_avg_pool()?;
        let s = self.fc1.forward(ctx, &s)?.relu();
        Ok(self.fc2.forward(ctx, &s)?.sigmoid())
    }

    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(x.mul(&self.weights(ctx, x)?)?)
    }
}

/// Per-location gating from the channel mean and max maps through a 7x7 conv.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                conv: Conv2d::new(b, "conv", 2, 1, 7, 1, 3, false)?,
            })
        })
    }

    /// Per-location scale, shape `[N, 1, H, W]`.
    pub fn weights<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let stats = Var::concat(&[x.channel_mean()?, x.channel_max()?])?;
        Ok(self.conv.forward(ctx, &stats)?.sigmoid())
    }

    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(x.mul(&self.weights(ctx, x)?)?)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Gated {
        gate: Conv2d,
        attention: Option<(ChannelAttention, SpatialAttention)>,
        order: AttentionOrder,
    },
    Concat {
        mix: Conv2d,
    },
}

/// Intermediate values of one fusion call.
pub struct FusionOutput<T: Scalar> {
    /// `sigmoid(conv([T, R]))`; absent for the concatenation variant.
    pub gate: Option<Var<T>>,
    /// `T * gate` before any attention.
    pub gated: Option<Var<T>>,
    pub output: Var<T>,
}

impl Fusion {
    pub fn new<T: Scalar>(b: &mut Builder<T>, channels: usize, scheme: Scheme, order: AttentionOrder) -> Result<Self> {
        let c = channels;
        Ok(match scheme {
            Scheme::B => Fusion::Concat {
                mix: Conv2d::new(b, "mix", 2 * c, c, 1, 1, 0, true)?,
            },
            Scheme::A | Scheme::C => {
                let gate = Conv2d::new(b, "gate", 2 * c, c, 1, 1, 0, true)?;
                let attention = if scheme == Scheme::A {
                    Some((ChannelAttention::new(b, "channel", c)?, SpatialAttention::new(b, "spatial")?))
                } else {
                    None
                };
                Fusion::Gated { gate, attention, order }
            }
        })
    }

    /// The 1x1 convolution over the concatenated features.
    pub fn mixing_conv(&self) -> &Conv2d {
        match self {
            Fusion::Gated { gate, .. } => gate,
            Fusion::Concat { mix } => mix,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, thermal: &Var<T>, rgb: &Var<T>) -> Result<FusionOutput<T>> {
        if thermal.shape() != rgb.shape() {
            return Err(Error::Shape(format!(
                "fusion inputs differ: thermal {:?}, rgb {:?}",
                thermal.shape(),
                rgb.shape()
            )));
        }
        let both = Var::concat(&[thermal.clone(), rgb.clone()])?;
        match self {
            Fusion::Concat { mix } => Ok(FusionOutput {
                gate: None,
                gated: None,
                output: mix.forward(ctx, &both)?,
            }),
            Fusion::Gated { gate, attention, order } => {
                let g = gate.forward(ctx, &both)?.sigmoid();
                let m = thermal.mul(&g)?;
                let output = match attention {
                    None => m.clone(),
                    Some((ca, sa)) => match order {
                        AttentionOrder::ChannelFirst => sa.forward(ctx, &ca.forward(ctx, &m)?)?,
                        AttentionOrder::SpatialFirst => ca.forward(ctx, &sa.forward(ctx, &m)?)?,
                    },
                };
                Ok(FusionOutput {
                    gate: Some(g),
                    gated: Some(m),
                    output,
                })
            }
        }
    }
}
