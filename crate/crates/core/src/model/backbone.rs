//! Bottleneck residual encoder with torchvision parameter names.

use rtcan_tensor::{BatchNorm2d, Builder, Context, Conv2d, Scalar, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new<T: Scalar>(b: &mut Builder<T>, inplanes: usize, planes: usize, stride: usize) -> Result<Self> {
        let out = planes * 4;
        let downsample = if stride != 1 || inplanes != out {
            Some(b.scoped("downsample", |b| -> Result<ConvBn> {
                Ok(ConvBn {
                    conv: Conv2d::new(b, "0", inplanes, out, 1, stride, 0, false)?,
                    bn: BatchNorm2d::new(b, "1", out)?,
                })
            })?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(b, "conv1", inplanes, planes, 1, 1, 0, false)?,
            bn1: BatchNorm2d::new(b, "bn1", planes)?,
            conv2: Conv2d::new(b, "conv2", planes, planes, 3, stride, 1, false)?,
            bn2: BatchNorm2d::new(b, "bn2", planes)?,
            conv3: Conv2d::new(b, "conv3", planes, out, 1, 1, 0, false)?,
            bn3: BatchNorm2d::new(b, "bn3", out)?,
            downsample,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.bn1.forward(ctx, &self.conv1.forward(ctx, x)?)?.relu();
        let y = self.bn2.forward(ctx, &self.conv2.forward(ctx, &y)?)?.relu();
        let y = self.bn3.forward(ctx, &self.conv3.forward(ctx, &y)?)?;
        let identity = match &self.downsample {
            Some(d) => d.bn.forward(ctx, &d.conv.forward(ctx, x)?)?,
            None => x.clone(),
        };
        Ok(y.add(&identity)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub layers: Vec<Vec<Bottleneck>>,
}

impl ResNet {
    pub fn new<T: Scalar>(b: &mut Builder<T>, in_channels: usize, base_width: usize, blocks: [usize; 4]) -> Result<Self> {
        let conv1 = Conv2d::new(b, "conv1", in_channels, base_width, 7, 2, 3, false)?;
        let bn1 = BatchNorm2d::new(b, "bn1", base_width)?;
        let mut inplanes = base_width;
        let mut layers = Vec::with_capacity(4);
        for (li, &n) in blocks.iter().enumerate() {
            let planes = base_width << li;
            let stride = if li == 0 { 1 } else { 2 };
            let layer = b.scoped(format!("layer{}", li + 1), |b| -> Result<Vec<Bottleneck>> {
                let mut layer = Vec::with_capacity(n);
                for i in 0..n {
                    let s = if i == 0 { stride } else { 1 };
                    layer.push(b.scoped(i.to_string(), |b| Bottleneck::new(b, inplanes, planes, s))?);
                    inplanes = planes * 4;
                }
                Ok(layer)
            })?;
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    /// Five feature maps at strides 2, 4, 8, 16, 32.
    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let stem = self.bn1.forward(ctx, &self.conv1.forward(ctx, x)?)?.relu();
        let mut y = stem.max_pool2d(3, 2, 1)?;
        let mut stages = vec![stem];
        for layer in &self.layers {
            for block in layer {
                y = block.forward(ctx, &y)?;
            }
            stages.push(y.clone());
        }
        Ok(stages)
    }
}
