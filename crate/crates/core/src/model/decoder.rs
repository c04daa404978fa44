//! Cascaded aggregation heads.
//!
//! The deep head aggregates stages 3-5 top-down and emits class logits plus a
//! sigmoid attention map. The shallow head aggregates stages 1-2, multiplies
//! its features by the upsampled attention map, and emits its own logits.

use rtcan_tensor::{BatchNorm2d, Builder, Context, Conv2d, Scalar, Var};

use crate::error::{Error, Result};

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct Cbr {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Cbr {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                conv: Conv2d::new(b, "conv", cin, cout, k, 1, k / 2, false)?,
                bn: BatchNorm2d::new(b, "bn", cout)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?.relu())
    }
}

/// Progressive upsample-concatenate-convolve over stages ordered deepest first.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub laterals: Vec<Cbr>,
    pub fuse: Vec<Cbr>,
}

impl Aggregation {
    fn new<T: Scalar>(b: &mut Builder<T>, in_channels: &[usize], width: usize) -> Result<Self> {
        let laterals = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Cbr::new(b, &format!("lateral{i}"), c, width, 1))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (1..in_channels.len())
            .map(|i| Cbr::new(b, &format!("fuse{}", i - 1), 2 * width, width, 3))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { laterals, fuse })
    }

    fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, stages: &[&Var<T>]) -> Result<Var<T>> {
        let mut y = self.laterals[0].forward(ctx, stages[0])?;
        for (i, fuse) in self.fuse.iter().enumerate() {
            let lat = self.laterals[i + 1].forward(ctx, stages[i + 1])?;
            let up = y.upsample_bilinear(lat.shape()[2], lat.shape()[3])?;
            y = fuse.forward(ctx, &Var::concat(&[up, lat])?)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub deep: Aggregation,
    pub deep_classifier: Conv2d,
    pub deep_attention: Conv2d,
    pub shallow: Aggregation,
    pub shallow_classifier: Conv2d,
}

/// Head outputs at feature resolution.
pub struct HeadOutputs<T: Scalar> {
    pub deep: Var<T>,
    pub shallow: Var<T>,
    pub attention: Var<T>,
}

impl Decoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, stage_channels: [usize; 5], width: usize, classes: usize) -> Result<Self> {
        let shallow_width = (width / 2).max(1);
        let [c1, c2, c3, c4, c5] = stage_channels;
        let (deep, deep_classifier, deep_attention) = b.scoped("deep", |b| -> Result<_> {
            Ok((
                Aggregation::new(b, &[c5, c4, c3], width)?,
                Conv2d::new(b, "classifier", width, classes, 1, 1, 0, true)?,
                Conv2d::new(b, "attention", width, 1, 1, 1, 0, true)?,
            ))
        })?;
        let (shallow, shallow_classifier) = b.scoped("shallow", |b| -> Result<_> {
            Ok((
                Aggregation::new(b, &[c2, c1], shallow_width)?,
                Conv2d::new(b, "classifier", shallow_width, classes, 1, 1, 0, true)?,
            ))
        })?;
        Ok(Self {
            deep,
            deep_classifier,
            deep_attention,
            shallow,
            shallow_classifier,
        })
    }

    pub fn heads<T: Scalar>(&self, ctx: &Context<'_, T>, stages: &[Var<T>]) -> Result<HeadOutputs<T>> {
        if stages.len() != 5 {
            return Err(Error::Shape(format!("decoder needs 5 stages, got {}", stages.len())));
        }
        let d = self.deep.forward(ctx, &[&stages[4], &stages[3], &stages[2]])?;
        let deep = self.deep_classifier.forward(ctx, &d)?;
        let attention = self.deep_attention.forward(ctx, &d)?.sigmoid();
        let s = self.shallow.forward(ctx, &[&stages[1], &stages[0]])?;
        let a = attention.upsample_bilinear(s.shape()[2], s.shape()[3])?;
        let shallow = self.shallow_classifier.forward(ctx, &s.mul(&a)?)?;
        Ok(HeadOutputs {
            deep,
            shallow,
            attention,
        })
    }
}
