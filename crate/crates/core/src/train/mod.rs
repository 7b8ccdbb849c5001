//! Optimization loop, checkpoints and evaluation.
//!
//! Training is deterministic given the seed: parameters come from the seeded
//! model initializer, batch order from a per-epoch shuffle drawn from a
//! separate ChaCha stream, and every kernel reduces in a fixed order
//! regardless of thread count. The shuffle generator's position is stored in
//! checkpoints, so resuming reproduces an uninterrupted run bit for bit.

mod adam;
mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, AdamSnapshot, Checkpoint, Manifest, TensorRecord, FORMAT_VERSION, MAGIC,
};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::layers::{Module, TensorRole};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{segmentation_metrics, ImageMetrics, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{DDANet, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 50,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.loss.validate()?;
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        Ok(())
    }
}

/// Serializable position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is 128 bits wide).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::corrupt("rng", m.to_string());
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Loss components of a single optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub bce_mask: f64,
    pub dice: f64,
    pub bce_gray: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_bce_mask: f64,
    pub loss_dice: f64,
    pub loss_bce_gray: f64,
    pub val_dsc: Option<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

pub struct Trainer {
    pub model: DDANet<f32>,
    pub config: TrainConfig,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_dsc: Option<f64>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DDANet::build(model_config, config.seed)?;
        let adam = AdamState::new(param_tensors(&model).iter());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            config,
            adam,
            epoch: 0,
            best_val_dsc: None,
            rng,
        })
    }

    /// Restores full training state. The checkpoint must carry optimizer and
    /// generator state; `epochs` may be raised to train further.
    pub fn resume(ckpt: &Checkpoint, epochs: Option<usize>) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut config = ckpt.train_config.clone();
        if let Some(e) = epochs {
            config.epochs = e;
        }
        config.validate()?;
        let snapshot = ckpt
            .adam
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state to resume from"))?;
        let rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint has no generator state to resume from"))?
            .restore()?;
        Ok(Trainer {
            model,
            config,
            adam: AdamState {
                t: snapshot.t,
                m: snapshot.m.clone(),
                v: snapshot.v.clone(),
            },
            epoch: ckpt.epoch,
            best_val_dsc: ckpt.best_val_dsc,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, self.config.clone());
        c.epoch = self.epoch;
        c.rng = Some(RngState::capture(&self.rng));
        c.best_val_dsc = self.best_val_dsc;
        c.adam = Some(AdamSnapshot {
            t: self.adam.t,
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        });
        c
    }

    /// Forward, loss, backward and one Adam update on the given batch.
    pub fn train_step(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>, grays: &Tensor<f32>) -> Result<StepLoss> {
        // Divergence is reported by the loss check below with epoch/batch context.
        let mut graph = Graph::new().with_finite_check(false);
        self.model.track_params(&mut graph);
        let result = (|| {
            let out = self.model.forward_train(&mut graph, images)?;
            let loss = total_loss(&mut graph, &out, masks, grays, &self.config.loss)?;
            let value = loss.total_value();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch + 1,
                    batch: 0,
                    value,
                });
            }
            let grads = graph.backward(&loss.total)?;
            let cfg = self.config.adam;
            self.adam.begin_step();
            let mut index = 0;
            let mut failure = None;
            let adam = &mut self.adam;
            self.model.visit_mut("", &mut |name, t, role| {
                if role != TensorRole::Param || failure.is_some() {
                    return;
                }
                let g = match grads.get(t) {
                    Some(g) => g.clone(),
                    None => {
                        failure = Some(Error::invalid(format!("no gradient for `{name}`")));
                        return;
                    }
                };
                if let Err(e) = adam.update(index, t, &g, &cfg) {
                    failure = Some(e);
                }
                index += 1;
            });
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(StepLoss {
                total: value,
                bce_mask: loss.bce_mask,
                dice: loss.dice,
                bce_gray: loss.bce_gray,
            })
        })();
        self.model.untrack_params();
        result
    }

    /// Runs one epoch over `train` in a freshly shuffled order, then scores
    /// `val` if given.
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochLog> {
        self.run_epoch_with(train, val, |_| {})
    }

    /// [`Trainer::run_epoch`], reporting every step's losses to `on_step`.
    pub fn run_epoch_with(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_step: impl FnMut(&StepLoss),
    ) -> Result<EpochLog> {
        ensure!(!train.is_empty(), "training set is empty");
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch = train.batch(chunk)?;
            let step = self
                .train_step(&batch.images, &batch.masks, &batch.grays)
                .map_err(|e| match e {
                    Error::Diverged { epoch, value, .. } => Error::Diverged {
                        epoch,
                        batch: b + 1,
                        value,
                    },
                    other => other,
                })?;
            on_step(&step);
            for (s, v) in sums.iter_mut().zip([step.total, step.bce_mask, step.dice, step.bce_gray]) {
                *s += v;
            }
            batches += 1;
        }
        self.epoch += 1;
        let val_dsc = match val {
            Some(v) if !v.is_empty() => {
                let dsc = mean_dsc(&self.model, v)?;
                if self.best_val_dsc.is_none_or(|best| dsc > best) {
                    self.best_val_dsc = Some(dsc);
                }
                Some(dsc)
            }
            _ => None,
        };
        let n = batches as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            loss_total: sums[0] / n,
            loss_bce_mask: sums[1] / n,
            loss_dice: sums[2] / n,
            loss_bce_gray: sums[3] / n,
            val_dsc,
        })
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        ensure!(!train.is_empty(), "training set is empty");
        check_dataset_size(self.model.config(), train)?;
        if let Some(v) = val {
            check_dataset_size(self.model.config(), v)?;
        }
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(train, val)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

fn check_dataset_size(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    let size = ds.uniform_size();
    ensure!(
        size == Some(config.input_size),
        "dataset `{}` must be resized to the model input size {:?} (found {:?})",
        ds.name,
        config.input_size,
        size
    );
    Ok(())
}

fn param_tensors(model: &DDANet<f32>) -> Vec<Tensor<f32>> {
    model
        .named_tensors()
        .into_iter()
        .filter(|(_, role, _)| *role == TensorRole::Param)
        .map(|(_, _, t)| t)
        .collect()
}

/// Eval-mode per-image metrics; images are resized to the model input size
/// when they differ.
pub fn per_image_metrics(model: &DDANet<f32>, dataset: &Dataset) -> Result<Vec<ImageMetrics>> {
    let (h, w) = model.config().input_size;
    let mut out = Vec::with_capacity(dataset.len());
    for item in &dataset.items {
        let (image, mask) = fit_to(item.image.clone(), item.mask.clone(), h, w)?;
        let pred = model.predict(&image)?;
        out.extend(segmentation_metrics(&pred.mask, &mask, DEFAULT_THRESHOLD)?);
    }
    Ok(out)
}

fn fit_to(image: Tensor<f32>, mask: Tensor<f32>, h: usize, w: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if image.shape()[2..] == [h, w] {
        return Ok((image, mask));
    }
    Ok((
        crate::data::resize_bilinear(&image, h, w)?,
        crate::data::resize_mask(&mask, h, w)?,
    ))
}

fn mean_dsc(model: &DDANet<f32>, dataset: &Dataset) -> Result<f64> {
    let m = per_image_metrics(model, dataset)?;
    Ok(m.iter().map(|x| x.dsc).sum::<f64>() / m.len() as f64)
}

/// Full metrics report; fps is images per second over the forward passes.
pub fn evaluate(model: &DDANet<f32>, dataset: &Dataset) -> Result<MetricsReport> {
    ensure!(!dataset.is_empty(), "evaluation set is empty");
    let (h, w) = model.config().input_size;
    let mut images = Vec::with_capacity(dataset.len());
    let mut elapsed = 0.0;
    for item in &dataset.items {
        let (image, mask) = fit_to(item.image.clone(), item.mask.clone(), h, w)?;
        let start = Instant::now();
        let pred = model.predict(&image)?;
        elapsed += start.elapsed().as_secs_f64();
        images.extend(segmentation_metrics(&pred.mask, &mask, DEFAULT_THRESHOLD)?);
    }
    let fps = dataset.len() as f64 / elapsed.max(f64::MIN_POSITIVE);
    MetricsReport::from_images(&images, fps)
}
