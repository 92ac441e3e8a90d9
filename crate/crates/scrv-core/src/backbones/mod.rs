//! Embedding backbones: a depthwise-separable mini CNN and a small
//! pre-norm vision transformer, both ending in a 10-dimensional embedding.
//!
//! Parameters live outside any tape in a stable construction order. A forward
//! pass first *binds* the network to a tape, staging every parameter exactly
//! once as a `requires_grad` leaf; Siamese and Triplet branches then share
//! those leaves, so their gradients accumulate across branch backwards and an
//! optimizer can read them back aligned with [`EmbeddingNet::params`].
//!
//! Feature maps are normalized per sample (mean/variance over that sample's
//! whole feature volume, plus a per-channel affine), never per batch, so an
//! embedding does not depend on which other images share its batch.

pub mod cnn;
pub mod vit;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamDomain};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub use cnn::{BlockSpec, CnnMiniConfig};
pub use vit::VitLiteConfig;

/// Output embedding dimensionality of every backbone.
pub const EMBED_DIM: usize = 10;

/// Epsilon inside normalization variances.
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Backbone family tag, as stored in checkpoints and configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    #[serde(rename = "cnn-mini")]
    CnnMini,
    #[serde(rename = "vit-lite")]
    VitLite,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::CnnMini => "cnn-mini",
            ArchKind::VitLite => "vit-lite",
        })
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-mini" => Ok(ArchKind::CnnMini),
            "vit-lite" => Ok(ArchKind::VitLite),
            other => Err(Error::InvalidConfig(format!(
                "unknown architecture '{}' (expected cnn-mini or vit-lite)",
                other
            ))),
        }
    }
}

/// Full architecture description: family plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ArchSpec {
    #[serde(rename = "cnn-mini")]
    CnnMini(CnnMiniConfig),
    #[serde(rename = "vit-lite")]
    VitLite(VitLiteConfig),
}

impl ArchSpec {
    pub fn kind(&self) -> ArchKind {
        match self {
            ArchSpec::CnnMini(_) => ArchKind::CnnMini,
            ArchSpec::VitLite(_) => ArchKind::VitLite,
        }
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

pub(crate) enum Init {
    /// Uniform(-b, b) with b = sqrt(6 / fan_in).
    KaimingUniform { fan_in: usize },
    /// Normal(0, std) re-sampled until within two standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

/// Collects parameters in construction order during network setup.
pub(crate) struct ParamBuilder<T: Scalar> {
    rng: rand_chacha::ChaCha8Rng,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: stream(seed, StreamDomain::Init),
            params: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64c(self.rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| {
                        loop {
                            let v: f64 = dist.sample(&mut self.rng);
                            if v.abs() <= 2.0 * std {
                                return T::from_f64c(v);
                            }
                        }
                    })
                    .collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn finish(self) -> Vec<Param<T>> {
        self.params
    }
}

/// A backbone plus its parameter storage.
#[derive(Debug, Clone)]
pub struct EmbeddingNet<T: Scalar> {
    arch: ArchSpec,
    input_hw: (usize, usize),
    params: Vec<Param<T>>,
}

impl<T: Scalar> EmbeddingNet<T> {
    pub fn new(arch: ArchSpec, input_hw: (usize, usize), seed: u64) -> Result<Self> {
        match arch {
            ArchSpec::CnnMini(cfg) => Self::new_cnn_mini(cfg, input_hw, seed),
            ArchSpec::VitLite(cfg) => Self::new_vit_lite(cfg, input_hw, seed),
        }
    }

    pub fn new_cnn_mini(cfg: CnnMiniConfig, input_hw: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate(input_hw)?;
        let params = cnn::build_params::<T>(&cfg, seed);
        Ok(EmbeddingNet {
            arch: ArchSpec::CnnMini(cfg),
            input_hw,
            params,
        })
    }

    pub fn new_vit_lite(cfg: VitLiteConfig, input_hw: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate(input_hw)?;
        let params = vit::build_params::<T>(&cfg, input_hw, seed);
        Ok(EmbeddingNet {
            arch: ArchSpec::VitLite(cfg),
            input_hw,
            params,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn kind(&self) -> ArchKind {
        self.arch.kind()
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Replace parameter storage (checkpoint restore). Names and shapes must
    /// match the constructed architecture exactly, in order.
    pub fn load_params(&mut self, params: Vec<Param<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter count mismatch: net has {}, restore provides {}",
                self.params.len(),
                params.len()
            )));
        }
        for (own, new) in self.params.iter().zip(&params) {
            if own.name != new.name || own.shape != new.shape {
                return Err(Error::InvalidConfig(format!(
                    "parameter mismatch: net has {} {:?}, restore provides {} {:?}",
                    own.name, own.shape, new.name, new.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Convert parameter precision (e.g. f32 training weights to f64 for
    /// finite-difference verification).
    pub fn cast<U: Scalar>(&self) -> EmbeddingNet<U> {
        EmbeddingNet {
            arch: self.arch.clone(),
            input_hw: self.input_hw,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::from_f64c(v.to_f64c())).collect(),
                })
                .collect(),
        }
    }

    /// Stage every parameter on `tape` once, as `requires_grad` leaves.
    /// All forwards through the returned network share those leaves.
    pub fn bind(&self, tape: &Tape<T>) -> Result<BoundNet<T>> {
        let leaves = self
            .params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), &p.shape, true))
            .collect::<Result<Vec<_>>>()?;
        self.bind_with(leaves)
    }

    /// Stage the network over caller-provided leaves (one per parameter, in
    /// [`EmbeddingNet::params`] order). Lets verification drive individual
    /// parameters as differentiation targets.
    pub fn bind_with(&self, leaves: Vec<Tensor<T>>) -> Result<BoundNet<T>> {
        if leaves.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                leaves.len()
            )));
        }
        for (leaf, p) in leaves.iter().zip(&self.params) {
            if leaf.shape() != p.shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} expects shape {:?}, got {:?}",
                    p.name,
                    p.shape,
                    leaf.shape()
                )));
            }
        }
        Ok(BoundNet {
            arch: self.arch.clone(),
            input_hw: self.input_hw,
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            leaves,
        })
    }
}

/// A network staged on a tape, ready for (weight-sharing) forward passes.
pub struct BoundNet<T: Scalar> {
    arch: ArchSpec,
    input_hw: (usize, usize),
    names: Vec<String>,
    leaves: Vec<Tensor<T>>,
}

impl<T: Scalar> BoundNet<T> {
    /// Parameter leaves in the same order as [`EmbeddingNet::params`].
    pub fn leaves(&self) -> &[Tensor<T>] {
        &self.leaves
    }

    /// Map a [N, 3, H, W] batch to [N, 10] embeddings.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_inner(x, None)
    }

    /// Forward pass that also captures each attention layer's weights
    /// ([N, heads, seq, seq] per layer). The CNN has none.
    pub fn forward_with_attention(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut attn = Vec::new();
        let out = self.forward_inner(x, Some(&mut attn))?;
        Ok((out, attn))
    }

    fn forward_inner(
        &self,
        x: &Tensor<T>,
        attn: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::InvalidOp(format!(
                "backbone input must be [N, 3, H, W], got {:?}",
                s
            )));
        }
        if (s[2], s[3]) != self.input_hw {
            return Err(Error::InputSizeMismatch {
                expected: self.input_hw,
                found: (s[2], s[3]),
            });
        }
        let mut cursor = ParamCursor {
            names: &self.names,
            leaves: &self.leaves,
            idx: 0,
        };
        let out = match &self.arch {
            ArchSpec::CnnMini(cfg) => cnn::forward(cfg, &mut cursor, x),
            ArchSpec::VitLite(cfg) => vit::forward(cfg, &mut cursor, x, attn),
        }?;
        cursor.finish();
        Ok(out)
    }
}

/// Walks staged parameter leaves in construction order; the name argument
/// documents and cross-checks which parameter each forward step consumes.
pub(crate) struct ParamCursor<'a, T: Scalar> {
    names: &'a [String],
    leaves: &'a [Tensor<T>],
    idx: usize,
}

impl<'a, T: Scalar> ParamCursor<'a, T> {
    pub fn next(&mut self, name: &str) -> Tensor<T> {
        let i = self.idx;
        assert!(
            i < self.leaves.len(),
            "forward requested parameter {} beyond the staged set",
            name
        );
        debug_assert_eq!(self.names[i], name, "parameter order drift at index {}", i);
        self.idx += 1;
        self.leaves[i].clone()
    }

    fn finish(&self) {
        debug_assert_eq!(
            self.idx,
            self.leaves.len(),
            "forward consumed {} of {} staged parameters",
            self.idx,
            self.leaves.len()
        );
    }
}

/// Per-sample normalization of a [N, C, H, W] map (statistics over C*H*W)
/// followed by a per-channel affine with gain/bias shaped [C, 1, 1].
pub(crate) fn sample_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let flat = x.reshape(&[s[0], s[1] * s[2] * s[3]])?;
    let normed = flat
        .layer_norm(1, T::from_f64c(NORM_EPS))?
        .reshape(&s)?;
    normed.mul(gain)?.add(bias)
}

/// Token-wise normalization of [N, S, D] (statistics over D) followed by an
/// affine with gain/bias shaped [D].
pub(crate) fn token_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.layer_norm(2, T::from_f64c(NORM_EPS))?.mul(gain)?.add(bias)
}

/// x [R, in] * w [in, out] + b [out].
pub(crate) fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.matmul(w)?.add(b)
}
