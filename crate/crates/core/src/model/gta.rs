//! Multi-kernel context block with channel self-attention.

use rtcan_tensor::{Builder, Context, Conv2d, Scalar, Var};

use super::fusion::ChannelAttention;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Gta {
    pub branches: Vec<Conv2d>,
    pub global: Option<Conv2d>,
    pub reduce: Conv2d,
    pub attention: ChannelAttention,
}

impl Gta {
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        channels: usize,
        branch_channels: usize,
        kernels: &[usize],
        global: bool,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(kernels.len());
        for (i, &k) in kernels.iter().enumerate() {
            branches.push(Conv2d::new(b, &format!("branch{i}"), channels, branch_channels, k, 1, k / 2, true)?);
        }
        let global = if global {
            Some(Conv2d::new(b, "global", channels, branch_channels, 1, 1, 0, true)?)
        } else {
            None
        };
        let n = branches.len() + global.is_some() as usize;
        Ok(Self {
            branches,
            global,
            reduce: Conv2d::new(b, "reduce", n * branch_channels, channels, 1, 1, 0, true)?,
            attention: ChannelAttention::new(b, "attention", channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let mut parts = Vec::with_capacity(self.branches.len() + 1);
        for conv in &self.branches {
            parts.push(conv.forward(ctx, x)?.relu());
        }
        if let Some(conv) = &self.global {
            let g = conv.forward(ctx, &x.global_avg_pool()?)?.relu();
            parts.push(g.upsample_bilinear(h, w)?);
        }
        let y = self.reduce.forward(ctx, &Var::concat(&parts)?)?;
        self.attention.forward(ctx, &y)
    }
}
