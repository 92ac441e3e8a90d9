//! Adam training loop for both pair (contrastive) and triplet objectives,
//! with per-epoch checkpointing and validation-based selection.
//!
//! One epoch is a fixed budget of `floor(corpus images / batch_size)`
//! dynamically sampled batches, not a sweep: every batch draws fresh pair or
//! triplet combinations. Validation uses a per-class holdout, a pair/triplet
//! set drawn once, augmentation off, so its loss is comparable across epochs.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{ArchKind, ArchSpec, BoundNet, CnnMiniConfig, EmbeddingNet, VitLiteConfig};
use crate::dataset::{PreprocessConfig, ScribeCorpus};
use crate::losses::{contrastive_loss, euclidean_distance, triplet_loss, LossConfig, LossKind};
use crate::rng::{stream, stream_indexed, StreamDomain};
use crate::sampler::{
    draw_pair_specs, draw_triplet_specs, load_pair_batch, load_triplet_batch, PairBatch,
    TripletBatch,
};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result, Scalar};

/// Which objective shapes the batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Siamese,
    Triplet,
}

impl TrainMode {
    pub fn loss_kind(self) -> LossKind {
        match self {
            TrainMode::Siamese => LossKind::Contrastive,
            TrainMode::Triplet => LossKind::Triplet,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Siamese => "siamese",
            TrainMode::Triplet => "triplet",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(TrainMode::Siamese),
            "triplet" => Ok(TrainMode::Triplet),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}' (expected siamese or triplet)"
            ))),
        }
    }
}

/// Everything a training run depends on besides the corpus itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub backbone: ArchKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Loss margin; `None` uses the per-loss default.
    pub margin: Option<f64>,
    pub seed: u64,
    pub val_fraction: f64,
    /// Network input height and width; images are resized to this.
    pub image_size: (usize, usize),
    /// Worker threads for loading and convolution; 0 picks the core count.
    pub threads: usize,
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Siamese,
            backbone: ArchKind::CnnMini,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 30,
            margin: None,
            seed: 42,
            val_fraction: 0.1,
            image_size: (64, 64),
            threads: 0,
            checkpoint_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::OddBatchSize(self.batch_size));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction must lie in [0, 0.5), got {}",
                self.val_fraction
            )));
        }
        self.loss_config()?;
        Ok(())
    }

    /// Loss selection with the margin override applied and validated.
    pub fn loss_config(&self) -> Result<LossConfig> {
        let mut cfg = LossConfig::for_kind(self.mode.loss_kind());
        if let Some(margin) = self.margin {
            cfg.margin = margin;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full architecture this run trains: family tag + default shape.
    pub fn arch_spec(&self) -> ArchSpec {
        match self.backbone {
            ArchKind::CnnMini => ArchSpec::CnnMini(CnnMiniConfig::default()),
            ArchKind::VitLite => ArchSpec::VitLite(VitLiteConfig::default()),
        }
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir.join(format!("model_e{epoch}.ckpt"))
    }
}

/// One epoch's mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss name plus the per-epoch trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub loss: String,
    pub epochs: Vec<EpochStats>,
}

/// What [`train`] returns; checkpoints land in `cfg.checkpoint_dir`.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: LossHistory,
    pub epoch_len: usize,
}

/// Validation loading uses Augment-domain item streams far above any index a
/// training run can reach, and reuses them every epoch: the held-out batches
/// are fixed for the whole run.
const VAL_ITEM_BASE: u64 = 1 << 48;

enum ValSet<T: Scalar> {
    Pairs(Vec<PairBatch<T>>),
    Triplets(Vec<TripletBatch<T>>),
    /// Validation unavailable (empty or single-class holdout); the train
    /// loss stands in for selection.
    Absent,
}

fn input_shape(n: usize, hw: (usize, usize)) -> [usize; 4] {
    [n, 3, hw.0, hw.1]
}

fn pair_loss<T: Scalar>(
    net: &EmbeddingNet<T>,
    batch: &PairBatch<T>,
    margin: f64,
    hw: (usize, usize),
) -> Result<(Tensor<T>, BoundNet<T>)> {
    let tape = Tape::new();
    let bound = net.bind(&tape)?;
    let shape = input_shape(batch.n, hw);
    let x1 = tape.constant(batch.x1.clone(), &shape)?;
    let x2 = tape.constant(batch.x2.clone(), &shape)?;
    let d = euclidean_distance(&bound.forward(&x1)?, &bound.forward(&x2)?)?;
    let labels: Vec<T> = batch.labels.iter().map(|&y| T::from_f64c(y)).collect();
    let y = tape.constant(labels, &[batch.n])?;
    let loss = contrastive_loss(&d, &y, T::from_f64c(margin))?;
    Ok((loss, bound))
}

fn triplet_batch_loss<T: Scalar>(
    net: &EmbeddingNet<T>,
    batch: &TripletBatch<T>,
    margin: f64,
    hw: (usize, usize),
) -> Result<(Tensor<T>, BoundNet<T>)> {
    let tape = Tape::new();
    let bound = net.bind(&tape)?;
    let shape = input_shape(batch.n, hw);
    let xa = tape.constant(batch.anchor.clone(), &shape)?;
    let xp = tape.constant(batch.positive.clone(), &shape)?;
    let xn = tape.constant(batch.negative.clone(), &shape)?;
    let ea = bound.forward(&xa)?;
    let d_ap = euclidean_distance(&ea, &bound.forward(&xp)?)?;
    let d_an = euclidean_distance(&ea, &bound.forward(&xn)?)?;
    let loss = triplet_loss(&d_ap, &d_an, T::from_f64c(margin))?;
    Ok((loss, bound))
}

/// Draws and loads the fixed validation set, or [`ValSet::Absent`] when the
/// holdout cannot support the mode (too few classes or images).
fn build_val_set<T: Scalar>(
    val: &ScribeCorpus,
    cfg: &TrainConfig,
    plain: &PreprocessConfig,
) -> ValSet<T> {
    if val.n_classes() == 0 || val.total_images() == 0 {
        return ValSet::Absent;
    }
    let n_batches = (val.total_images() / cfg.batch_size).max(1);
    let mut rng = stream_indexed(cfg.seed, StreamDomain::Validation, 1);
    let mut item = VAL_ITEM_BASE;
    match cfg.mode {
        TrainMode::Siamese => {
            let mut batches = Vec::with_capacity(n_batches);
            for _ in 0..n_batches {
                match draw_pair_specs(val, cfg.batch_size, &mut rng) {
                    Ok(specs) => {
                        batches.push(load_pair_batch(val, &specs, plain, cfg.seed, item));
                        item += 2 * cfg.batch_size as u64;
                    }
                    Err(_) => return ValSet::Absent,
                }
            }
            ValSet::Pairs(batches)
        }
        TrainMode::Triplet => {
            let mut batches = Vec::with_capacity(n_batches);
            for _ in 0..n_batches {
                match draw_triplet_specs(val, cfg.batch_size, &mut rng) {
                    Ok(specs) => {
                        batches.push(load_triplet_batch(val, &specs, plain, cfg.seed, item));
                        item += 3 * cfg.batch_size as u64;
                    }
                    Err(_) => return ValSet::Absent,
                }
            }
            ValSet::Triplets(batches)
        }
    }
}

fn val_loss<T: Scalar>(
    net: &EmbeddingNet<T>,
    set: &ValSet<T>,
    margin: f64,
    hw: (usize, usize),
) -> Result<Option<f64>> {
    match set {
        ValSet::Absent => Ok(None),
        ValSet::Pairs(batches) => {
            let mut sum = 0.0;
            for b in batches {
                sum += pair_loss(net, b, margin, hw)?.0.item().to_f64c();
            }
            Ok(Some(sum / batches.len() as f64))
        }
        ValSet::Triplets(batches) => {
            let mut sum = 0.0;
            for b in batches {
                sum += triplet_batch_loss(net, b, margin, hw)?.0.item().to_f64c();
            }
            Ok(Some(sum / batches.len() as f64))
        }
    }
}

/// Runs the full loop: per epoch, `floor(corpus images / batch_size)` fresh
/// batches, one Adam step each, then a checkpoint `model_e{N}.ckpt` and a
/// validation pass. Aborts with [`Error::NonFiniteLoss`] the moment a loss
/// stops being finite.
pub fn train<T: Scalar>(cfg: &TrainConfig, corpus: &ScribeCorpus) -> Result<TrainReport> {
    cfg.validate()?;
    let epoch_len = corpus.total_images() / cfg.batch_size;
    if epoch_len == 0 {
        return Err(Error::InvalidConfig(format!(
            "corpus of {} images cannot fill one batch of {}",
            corpus.total_images(),
            cfg.batch_size
        )));
    }
    let loss_cfg = cfg.loss_config()?;
    let margin = loss_cfg.margin;
    let hw = cfg.image_size;
    let augmented = PreprocessConfig {
        target: hw,
        augment: true,
        ..PreprocessConfig::default()
    };
    let plain = augmented.clone().with_augment(false);

    let (train_sub, val_sub) = corpus.holdout_split(cfg.val_fraction, cfg.seed)?;
    train_sub.validate_for_sampling()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;

    pool.install(|| {
        let mut net = EmbeddingNet::<T>::new(cfg.arch_spec(), hw, cfg.seed)?;
        let mut state = AdamState::new(net.params());
        let val_set: ValSet<T> = build_val_set(&val_sub, cfg, &plain);
        if matches!(val_set, ValSet::Absent) {
            log::warn!("validation holdout unavailable; selecting on train loss");
        }

        let mut sampler_rng = stream(cfg.seed, StreamDomain::Sampler);
        let mut item: u64 = 0;
        let mut history = LossHistory {
            loss: loss_cfg.kind.to_string(),
            epochs: Vec::with_capacity(cfg.epochs),
        };
        std::fs::create_dir_all(&cfg.checkpoint_dir)?;

        for epoch in 1..=cfg.epochs {
            let mut sum = 0.0;
            for batch_idx in 0..epoch_len {
                let (loss, bound) = match cfg.mode {
                    TrainMode::Siamese => {
                        let specs = draw_pair_specs(&train_sub, cfg.batch_size, &mut sampler_rng)?;
                        let batch: PairBatch<T> =
                            load_pair_batch(&train_sub, &specs, &augmented, cfg.seed, item);
                        item += 2 * specs.len() as u64;
                        pair_loss(&net, &batch, margin, hw)?
                    }
                    TrainMode::Triplet => {
                        let specs =
                            draw_triplet_specs(&train_sub, cfg.batch_size, &mut sampler_rng)?;
                        let batch: TripletBatch<T> =
                            load_triplet_batch(&train_sub, &specs, &augmented, cfg.seed, item);
                        item += 3 * specs.len() as u64;
                        triplet_batch_loss(&net, &batch, margin, hw)?
                    }
                };
                let value = loss.item().to_f64c();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        value,
                    });
                }
                loss.backward()?;
                let grads: Vec<Vec<T>> = bound
                    .leaves()
                    .iter()
                    .map(|leaf| leaf.grad().expect("trainable leaf accumulates a gradient"))
                    .collect();
                adam_step(net.params_mut(), &grads, &mut state, cfg.lr, cfg.weight_decay)?;
                sum += value;
            }
            let train_loss = sum / epoch_len as f64;
            let epoch_val = match val_loss(&net, &val_set, margin, hw)? {
                Some(v) if v.is_finite() => v,
                Some(v) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        // Validation runs after the last training batch.
                        batch: epoch_len,
                        value: v,
                    });
                }
                None => train_loss,
            };
            history.epochs.push(EpochStats {
                epoch,
                train_loss,
                val_loss: epoch_val,
            });
            log::info!(
                "epoch {epoch}/{}: train {train_loss:.6}, val {epoch_val:.6}",
                cfg.epochs
            );
            let ckpt = Checkpoint {
                net: net.clone(),
                config: cfg.clone(),
                epoch,
                seed: cfg.seed,
                history: history.clone(),
            };
            save_checkpoint(&ckpt, &cfg.checkpoint_path(epoch))?;
        }
        Ok(TrainReport { history, epoch_len })
    })
}

/// The epoch with minimum validation loss (ties go to the earliest) and its
/// checkpoint path under `dir`.
pub fn select_best(history: &LossHistory, dir: &Path) -> Result<(usize, PathBuf)> {
    let best = history
        .epochs
        .iter()
        .min_by(|a, b| {
            a.val_loss
                .partial_cmp(&b.val_loss)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .ok_or_else(|| Error::InvalidConfig("cannot select from an empty history".into()))?;
    Ok((best.epoch, dir.join(format!("model_e{}.ckpt", best.epoch))))
}
