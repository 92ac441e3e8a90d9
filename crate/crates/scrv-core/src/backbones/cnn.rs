//! Depthwise-separable mini CNN backbone.
//!
//! Stem conv (3x3, stride 2) -> five inverted-bottleneck blocks (pointwise
//! expand, 3x3 depthwise, pointwise project; residual when the block keeps
//! shape) -> pointwise bottleneck -> global average pool -> linear head to
//! the 10-d embedding. Hardswish activations throughout; projections are left
//! linear. Convolutions carry no bias since each is followed by a normalization
//! with its own affine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{linear, sample_norm, Init, Param, ParamBuilder, ParamCursor, EMBED_DIM};

/// One inverted-bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Channel multiplier for the expansion convolution.
    pub expansion: usize,
    pub out_channels: usize,
    /// Stride of the depthwise convolution (1 or 2).
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnMiniConfig {
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Channels of the pointwise bottleneck before pooling.
    pub bottleneck_channels: usize,
}

impl Default for CnnMiniConfig {
    fn default() -> Self {
        CnnMiniConfig {
            stem_channels: 16,
            blocks: vec![
                BlockSpec { expansion: 4, out_channels: 24, stride: 2 },
                BlockSpec { expansion: 4, out_channels: 24, stride: 1 },
                BlockSpec { expansion: 4, out_channels: 48, stride: 2 },
                BlockSpec { expansion: 4, out_channels: 48, stride: 1 },
                BlockSpec { expansion: 4, out_channels: 96, stride: 2 },
            ],
            bottleneck_channels: 160,
        }
    }
}

impl CnnMiniConfig {
    pub fn validate(&self, input_hw: (usize, usize)) -> Result<()> {
        if self.stem_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::InvalidConfig(
                "cnn-mini channel counts must be positive".into(),
            ));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("cnn-mini needs at least one block".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.expansion == 0 || b.out_channels == 0 {
                return Err(Error::InvalidConfig(format!(
                    "cnn-mini block {} has zero expansion or channels",
                    i
                )));
            }
            if !(1..=2).contains(&b.stride) {
                return Err(Error::InvalidConfig(format!(
                    "cnn-mini block {} stride must be 1 or 2, got {}",
                    i, b.stride
                )));
            }
        }
        // Stem halves the input; each stride-2 block halves again. The final
        // map must stay at least 1x1.
        let mut h = input_hw.0;
        let mut w = input_hw.1;
        let shrink = |h: &mut usize, w: &mut usize, stride: usize, stage: &str| {
            *h = (*h + 2 - 3) / stride + 1;
            *w = (*w + 2 - 3) / stride + 1;
            if *h == 0 || *w == 0 {
                return Err(Error::SpatialCollapse(format!(
                    "input {}x{} collapses at the {}",
                    input_hw.0, input_hw.1, stage
                )));
            }
            Ok(())
        };
        shrink(&mut h, &mut w, 2, "stem")?;
        for (i, b) in self.blocks.iter().enumerate() {
            shrink(&mut h, &mut w, b.stride, &format!("depthwise of block {}", i))?;
        }
        // A 1x1 map makes global pooling a no-op and the bottleneck
        // degenerate; demand at least 2x2 entering the head.
        if h < 2 || w < 2 {
            return Err(Error::SpatialCollapse(format!(
                "input {}x{} leaves a {}x{} map at the pooling head",
                input_hw.0, input_hw.1, h, w
            )));
        }
        Ok(())
    }
}

fn push_norm<T: Scalar>(b: &mut ParamBuilder<T>, prefix: &str, channels: usize) {
    b.push(format!("{prefix}.norm.gain"), &[channels, 1, 1], Init::Ones);
    b.push(format!("{prefix}.norm.bias"), &[channels, 1, 1], Init::Zeros);
}

pub(super) fn build_params<T: Scalar>(cfg: &CnnMiniConfig, seed: u64) -> Vec<Param<T>> {
    let mut b = ParamBuilder::new(seed);
    b.push(
        "stem.conv.w",
        &[cfg.stem_channels, 3, 3, 3],
        Init::KaimingUniform { fan_in: 3 * 9 },
    );
    push_norm(&mut b, "stem.conv", cfg.stem_channels);

    let mut cin = cfg.stem_channels;
    for (i, blk) in cfg.blocks.iter().enumerate() {
        let exp = cin * blk.expansion;
        let p = format!("block{i}");
        b.push(
            format!("{p}.expand.w"),
            &[exp, cin, 1, 1],
            Init::KaimingUniform { fan_in: cin },
        );
        push_norm(&mut b, &format!("{p}.expand"), exp);
        b.push(
            format!("{p}.depthwise.w"),
            &[exp, 1, 3, 3],
            Init::KaimingUniform { fan_in: 9 },
        );
        push_norm(&mut b, &format!("{p}.depthwise"), exp);
        b.push(
            format!("{p}.project.w"),
            &[blk.out_channels, exp, 1, 1],
            Init::KaimingUniform { fan_in: exp },
        );
        push_norm(&mut b, &format!("{p}.project"), blk.out_channels);
        cin = blk.out_channels;
    }

    b.push(
        "head.conv.w",
        &[cfg.bottleneck_channels, cin, 1, 1],
        Init::KaimingUniform { fan_in: cin },
    );
    push_norm(&mut b, "head.conv", cfg.bottleneck_channels);
    b.push(
        "head.fc.w",
        &[cfg.bottleneck_channels, EMBED_DIM],
        Init::KaimingUniform { fan_in: cfg.bottleneck_channels },
    );
    b.push("head.fc.b", &[EMBED_DIM], Init::Zeros);
    b.finish()
}

fn conv_norm_act<T: Scalar>(
    x: &Tensor<T>,
    cursor: &mut ParamCursor<'_, T>,
    prefix: &str,
    stride: usize,
    padding: usize,
    groups: usize,
    act: bool,
) -> Result<Tensor<T>> {
    let w = cursor.next(&format!("{prefix}.w"));
    let gain = cursor.next(&format!("{prefix}.norm.gain"));
    let bias = cursor.next(&format!("{prefix}.norm.bias"));
    let y = x.conv2d(&w, stride, padding, groups)?;
    let y = sample_norm(&y, &gain, &bias)?;
    Ok(if act { y.hardswish() } else { y })
}

pub(super) fn forward<T: Scalar>(
    cfg: &CnnMiniConfig,
    cursor: &mut ParamCursor<'_, T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut y = conv_norm_act(x, cursor, "stem.conv", 2, 1, 1, true)?;

    let mut cin = cfg.stem_channels;
    for (i, blk) in cfg.blocks.iter().enumerate() {
        let p = format!("block{i}");
        let exp = cin * blk.expansion;
        let expanded = conv_norm_act(&y, cursor, &format!("{p}.expand"), 1, 0, 1, true)?;
        let spatial = conv_norm_act(
            &expanded,
            cursor,
            &format!("{p}.depthwise"),
            blk.stride,
            1,
            exp,
            true,
        )?;
        let projected = conv_norm_act(&spatial, cursor, &format!("{p}.project"), 1, 0, 1, false)?;
        y = if blk.stride == 1 && cin == blk.out_channels {
            projected.add(&y)?
        } else {
            projected
        };
        cin = blk.out_channels;
    }

    let pooled = conv_norm_act(&y, cursor, "head.conv", 1, 0, 1, true)?.global_avg_pool()?;
    let w = cursor.next("head.fc.w");
    let b = cursor.next("head.fc.b");
    linear(&pooled, &w, &b)
}
