//! Small convolutional backbone for image encoders.
//!
//! A stack of `conv3x3 → batch norm → ReLU` blocks; after each block the
//! spatial side is halved by mean pooling while it is still even, and the
//! final maps are collapsed by global average pooling into a feature vector
//! of width `channels.last()`. Sized for thumbnail images (CIFAR-scale and
//! below), where this family of encoders is accurate enough to measure
//! representation quality while staying cheap on a CPU.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, AvgPool2d, BatchNorm2d,
    Bn2dCache, Conv2d, ConvCache,
};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::Scalar;

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
    pool: Option<AvgPool2d>,
    /// Spatial side of this block's output after optional pooling. Kept so
    /// the pooling schedule is inspectable; only shape checks consult it.
    #[allow(dead_code)]
    out_side: usize,
}

#[derive(Debug, Clone)]
pub struct ConvBackbone {
    pub name: String,
    blocks: Vec<Block>,
    pub in_channels: usize,
    pub in_side: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ConvNetCache<F> {
    stages: Vec<StageCache<F>>,
    /// Spatial side of the tensor entering global average pooling.
    gap_side: usize,
}

#[derive(Debug, Clone)]
struct StageCache<F> {
    conv: ConvCache<F>,
    bn: Bn2dCache<F>,
    mask: Array4<F>,
    pre_pool_side: usize,
}

impl ConvBackbone {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        image_side: usize,
        channels: &[usize],
    ) -> Result<Self> {
        let name = name.into();
        if channels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "conv backbone `{name}` needs at least one block"
            )));
        }
        if image_side == 0 || in_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv backbone `{name}`: degenerate input {in_channels}x{image_side}x{image_side}"
            )));
        }
        let mut blocks = Vec::with_capacity(channels.len());
        let mut side = image_side;
        let mut prev_c = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            if c == 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv backbone `{name}` block {i}: zero channels"
                )));
            }
            let conv = Conv2d::new(format!("{name}.block{i}.conv"), prev_c, c, false);
            let bn = BatchNorm2d::new(format!("{name}.block{i}.bn"), c);
            // Halve the resolution while it divides cleanly; deep stacks on
            // tiny inputs simply stop pooling once the side reaches 1.
            let pool = (side % 2 == 0).then_some(AvgPool2d { window: 2 });
            if pool.is_some() {
                side /= 2;
            }
            blocks.push(Block {
                conv,
                bn,
                pool,
                out_side: side,
            });
            prev_c = c;
        }
        Ok(Self {
            name,
            blocks,
            in_channels,
            in_side: image_side,
            out_dim: prev_c,
        })
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParameterSet<F>, rng: &mut impl Rng) -> Result<()> {
        for b in &self.blocks {
            b.conv.register(ps, rng)?;
            b.bn.register(ps)?;
        }
        Ok(())
    }

    fn check_input<F: Scalar>(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels || h != self.in_side || w != self.in_side {
            return Err(Error::ShapeMismatch {
                context: format!("conv backbone `{}` input", self.name),
                expected: vec![self.in_channels, self.in_side, self.in_side],
                got: vec![c, h, w],
            });
        }
        Ok(())
    }

    pub fn forward_train<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        x: &Array4<F>,
    ) -> Result<(Array2<F>, ConvNetCache<F>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let pre_pool_side = h.dim().2;
            let (y, conv) = b.conv.forward(ps, &h)?;
            let (y, bn) = b.bn.forward_train(ps, &y)?;
            let (y, mask) = relu(&y);
            h = match &b.pool {
                Some(p) => p.forward(&y)?,
                None => y,
            };
            stages.push(StageCache {
                conv,
                bn,
                mask,
                pre_pool_side,
            });
        }
        let gap_side = h.dim().2;
        Ok((global_avg_pool(&h), ConvNetCache { stages, gap_side }))
    }

    pub fn forward_eval<F: Scalar>(&self, ps: &ParameterSet<F>, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, _) = b.conv.forward(ps, &h)?;
            let y = b.bn.forward_eval(ps, &y)?;
            let y = relu(&y).0;
            h = match &b.pool {
                Some(p) => p.forward(&y)?,
                None => y,
            };
        }
        Ok(global_avg_pool(&h))
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &ConvNetCache<F>,
        dfeat: &Array2<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<()> {
        let mut d = global_avg_pool_backward(dfeat, (cache.gap_side, cache.gap_side));
        for (b, stage) in self.blocks.iter().zip(&cache.stages).rev() {
            if let Some(p) = &b.pool {
                d = p.backward(&d, (stage.pre_pool_side, stage.pre_pool_side));
            }
            d = relu_backward(&stage.mask, &d);
            d = b.bn.backward(ps, &stage.bn, &d, grads)?;
            d = b.conv.backward(ps, &stage.conv, &d, grads)?;
        }
        Ok(())
    }
}
