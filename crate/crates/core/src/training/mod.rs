//! Two-stage optimization: cosine-scheduled Adam over the trainable subset
//! selected by the stage, checkpointing, and standalone adapter math.

mod adam;
mod checkpoint;
mod lora;
mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState, Moments};
pub use checkpoint::{Checkpoint, MomentBlock, ParamBlock, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use lora::AdapterPair;
pub use schedule::CosineSchedule;

use crate::config::RunConfig;
use crate::data::MotionSample;
use crate::error::{Error, Result};
use crate::model::{Model, Stage};
use crate::numerics::Tape;

/// Optimization settings for one stage, derived from a [`RunConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub schedule: CosineSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_stage(cfg: &RunConfig, stage: Stage) -> Self {
        let (lr_max, epochs) = match stage {
            Stage::Alignment => (cfg.stage1_lr, cfg.stage1_epochs),
            Stage::Instruct => (cfg.stage2_lr, cfg.stage2_epochs),
        };
        TrainConfig {
            stage,
            schedule: CosineSchedule {
                lr_max,
                warmup_fraction: cfg.warmup_fraction,
            },
            epochs,
            batch_size: cfg.batch_size,
            adam: AdamConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
            },
            grad_clip: cfg.grad_clip,
            seed: cfg.seed,
        }
    }

    pub fn total_steps(&self, samples: usize) -> u64 {
        (self.epochs * samples.div_ceil(self.batch_size)) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    order.shuffle(&mut rng);
    order
}

/// Stateful training of one stage; resumable through [`Checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer updates.
    pub step: u64,
    pub total_steps: u64,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    /// Starts `stage` on `model` with a fresh optimizer.
    pub fn new(mut model: Model, stage: Stage) -> Result<Self> {
        model.configure_stage(stage)?;
        let config = TrainConfig::for_stage(&model.config, stage);
        Ok(Trainer {
            model,
            config,
            adam: AdamState::default(),
            epoch: 0,
            step: 0,
            total_steps: 0,
            history: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One pass over `data` in a seeded per-epoch order.
    pub fn run_epoch(&mut self, data: &[MotionSample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Domain("training data is empty".into()));
        }
        let total = self.config.total_steps(data.len());
        if self.total_steps == 0 {
            self.total_steps = total;
        } else if self.total_steps != total {
            return Err(Error::State(format!(
                "dataset implies {total} steps but this run was planned for {}",
                self.total_steps
            )));
        }
        if self.is_finished() {
            return Err(Error::State("all epochs already completed".into()));
        }
        let order = epoch_order(self.config.seed, self.epoch, data.len());
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            self.model.store.zero_grad();
            for &i in batch {
                let mut tape = Tape::new();
                let loss = self.model.loss(&mut tape, &data[i])?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Domain(format!("non-finite loss on sample {}", data[i].id)));
                }
                loss_sum += value;
                let scaled = tape.scale(loss, 1.0 / batch.len() as f64);
                tape.backward(scaled, &mut self.model.store)?;
            }
            self.model.store.clip_grad_norm(self.config.grad_clip);
            lr = self.config.schedule.lr_at(self.step, self.total_steps)?;
            adam_step(&mut self.model.store, &mut self.adam, lr, &self.config.adam)?;
            self.step += 1;
        }
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            mean_loss: loss_sum / data.len() as f64,
            lr,
        };
        log::info!(
            "stage {} epoch {} mean loss {:.6} lr {:.3e}",
            self.config.stage.number(),
            record.epoch,
            record.mean_loss,
            record.lr
        );
        self.history.push(record);
        Ok(record)
    }

    /// Runs the remaining epochs.
    pub fn train(&mut self, data: &[MotionSample]) -> Result<&[EpochRecord]> {
        while !self.is_finished() {
            self.run_epoch(data)?;
        }
        Ok(&self.history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::capture(&self.model, &self.adam);
        c.stage = self.config.stage.number();
        c.epoch = self.epoch;
        c.step = self.step;
        c.total_steps = self.total_steps;
        c.history = self.history.clone();
        c
    }

    /// Continues the stage recorded in `ckpt` exactly where it stopped.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let (model, adam) = ckpt.restore()?;
        let stage = Stage::from_number(ckpt.stage)?;
        let mut t = Trainer::new(model, stage)?;
        t.adam = adam;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.total_steps = ckpt.total_steps;
        t.history = ckpt.history.clone();
        Ok(t)
    }
}

/// Trains `model` for every epoch of `stage` from a fresh optimizer.
pub fn train_stage(model: Model, data: &[MotionSample], stage: Stage) -> Result<Trainer> {
    let mut t = Trainer::new(model, stage)?;
    t.train(data)?;
    Ok(t)
}
