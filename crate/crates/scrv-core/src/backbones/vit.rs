//! Small pre-norm vision transformer backbone.
//!
//! Non-overlapping patch embedding (a stride-p convolution), a learned class
//! token and position table, then `depth` pre-norm encoder layers of
//! multi-head scaled dot-product attention and a hardswish MLP. The class
//! token after the final normalization feeds the 10-d embedding head.
//!
//! Linear weights use truncated-normal(0.02) initialization, the patch
//! projection uses Kaiming-uniform, and all biases start at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{linear, token_norm, Init, Param, ParamBuilder, ParamCursor, EMBED_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitLiteConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
}

impl Default for VitLiteConfig {
    fn default() -> Self {
        VitLiteConfig {
            patch_size: 8,
            dim: 48,
            heads: 4,
            depth: 3,
            mlp_ratio: 2,
        }
    }
}

impl VitLiteConfig {
    pub fn validate(&self, input_hw: (usize, usize)) -> Result<()> {
        if self.patch_size == 0 || self.dim == 0 || self.heads == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig(
                "vit-lite dimensions must be positive".into(),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("vit-lite mlp_ratio must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "vit-lite dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if input_hw.0 % self.patch_size != 0 || input_hw.1 % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {}x{} is not divisible by patch size {}",
                input_hw.0, input_hw.1, self.patch_size
            )));
        }
        Ok(())
    }

    /// Token count including the class token.
    pub fn seq_len(&self, input_hw: (usize, usize)) -> usize {
        (input_hw.0 / self.patch_size) * (input_hw.1 / self.patch_size) + 1
    }
}

pub(super) fn build_params<T: Scalar>(
    cfg: &VitLiteConfig,
    input_hw: (usize, usize),
    seed: u64,
) -> Vec<Param<T>> {
    let d = cfg.dim;
    let seq = cfg.seq_len(input_hw);
    let hidden = d * cfg.mlp_ratio;
    let tn = || Init::TruncNormal { std: 0.02 };

    let mut b = ParamBuilder::new(seed);
    b.push(
        "patch.w",
        &[d, 3, cfg.patch_size, cfg.patch_size],
        Init::KaimingUniform { fan_in: 3 * cfg.patch_size * cfg.patch_size },
    );
    b.push("patch.b", &[d, 1, 1], Init::Zeros);
    b.push("cls", &[1, 1, d], tn());
    b.push("pos", &[1, seq, d], tn());
    for l in 0..cfg.depth {
        let p = format!("layer{l}");
        b.push(format!("{p}.ln1.gain"), &[d], Init::Ones);
        b.push(format!("{p}.ln1.bias"), &[d], Init::Zeros);
        for name in ["q", "k", "v", "proj"] {
            b.push(format!("{p}.attn.{name}.w"), &[d, d], tn());
            b.push(format!("{p}.attn.{name}.b"), &[d], Init::Zeros);
        }
        b.push(format!("{p}.ln2.gain"), &[d], Init::Ones);
        b.push(format!("{p}.ln2.bias"), &[d], Init::Zeros);
        b.push(format!("{p}.mlp.fc1.w"), &[d, hidden], tn());
        b.push(format!("{p}.mlp.fc1.b"), &[hidden], Init::Zeros);
        b.push(format!("{p}.mlp.fc2.w"), &[hidden, d], tn());
        b.push(format!("{p}.mlp.fc2.b"), &[d], Init::Zeros);
    }
    b.push("final.norm.gain", &[d], Init::Ones);
    b.push("final.norm.bias", &[d], Init::Zeros);
    b.push("head.fc.w", &[d, EMBED_DIM], tn());
    b.push("head.fc.b", &[EMBED_DIM], Init::Zeros);
    b.finish()
}

fn staged_linear<T: Scalar>(
    x: &Tensor<T>,
    cursor: &mut ParamCursor<'_, T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let w = cursor.next(&format!("{prefix}.w"));
    let b = cursor.next(&format!("{prefix}.b"));
    linear(x, &w, &b)
}

pub(super) fn forward<T: Scalar>(
    cfg: &VitLiteConfig,
    cursor: &mut ParamCursor<'_, T>,
    x: &Tensor<T>,
    mut attn_out: Option<&mut Vec<Tensor<T>>>,
) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let d = cfg.dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let seq = cfg.seq_len((x.shape()[2], x.shape()[3]));
    let scale = T::from_f64c(1.0 / (dh as f64).sqrt());

    // Patch embedding: [N, 3, H, W] -> [N, tokens, dim].
    let w = cursor.next("patch.w");
    let b = cursor.next("patch.b");
    let patches = x
        .conv2d(&w, cfg.patch_size, 0, 1)?
        .add(&b)?;
    let tokens = patches
        .reshape(&[n, d, seq - 1])?
        .permute(&[0, 2, 1])?;

    let cls = cursor.next("cls").broadcast_to(&[n, 1, d])?;
    let pos = cursor.next("pos");
    let mut h = Tensor::concat(&[cls, tokens], 1)?.add(&pos)?;

    for l in 0..cfg.depth {
        let p = format!("layer{l}");
        let g1 = cursor.next(&format!("{p}.ln1.gain"));
        let b1 = cursor.next(&format!("{p}.ln1.bias"));
        let normed = token_norm(&h, &g1, &b1)?.reshape(&[n * seq, d])?;

        let split_heads = |t: Tensor<T>| -> Result<Tensor<T>> {
            t.reshape(&[n, seq, heads, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = split_heads(staged_linear(&normed, cursor, &format!("{p}.attn.q"))?)?;
        let k = split_heads(staged_linear(&normed, cursor, &format!("{p}.attn.k"))?)?;
        let v = split_heads(staged_linear(&normed, cursor, &format!("{p}.attn.v"))?)?;

        let scores = q.matmul(&k.permute(&[0, 1, 3, 2])?)?.mul_scalar(scale);
        let attn = scores.softmax(3)?;
        if let Some(sink) = attn_out.as_deref_mut() {
            sink.push(attn.clone());
        }
        let ctx = attn
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * seq, d])?;
        let projected =
            staged_linear(&ctx, cursor, &format!("{p}.attn.proj"))?.reshape(&[n, seq, d])?;
        h = h.add(&projected)?;

        let g2 = cursor.next(&format!("{p}.ln2.gain"));
        let b2 = cursor.next(&format!("{p}.ln2.bias"));
        let normed2 = token_norm(&h, &g2, &b2)?.reshape(&[n * seq, d])?;
        let expanded = staged_linear(&normed2, cursor, &format!("{p}.mlp.fc1"))?.hardswish();
        let mlp = staged_linear(&expanded, cursor, &format!("{p}.mlp.fc2"))?.reshape(&[n, seq, d])?;
        h = h.add(&mlp)?;
    }

    let g = cursor.next("final.norm.gain");
    let b = cursor.next("final.norm.bias");
    let cls_out = token_norm(&h, &g, &b)?.narrow(1, 0, 1)?.reshape(&[n, d])?;
    let w = cursor.next("head.fc.w");
    let bb = cursor.next("head.fc.b");
    linear(&cls_out, &w, &bb)
}
