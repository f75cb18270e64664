//! Optimization loop with seeded, resumable iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vidseg_core::matchloss::{hungarian_loss, match_layers, LossBreakdown, LossError, MatchError};
use vidseg_core::model::{normalize_frames, Model, ModelError};
use vidseg_core::tensor::{AdamW, ParamStore, Tape};

use crate::checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_FORMAT};
use crate::config::RunConfig;
use crate::data::{DataError, TrainingData};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
}

/// Random stream of iteration `step`; independent of all earlier draws so a
/// resumed run replays the same clips.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    /// Completed iterations.
    pub step: usize,
    pub data: TrainingData,
}

impl Trainer {
    pub fn new(config: RunConfig, data: TrainingData) -> Result<Self, TrainError> {
        if data.categories.len() > config.model.num_classes {
            return Err(DataError::TooManyCategories(data.categories.len(), config.model.num_classes).into());
        }
        let (model, store) = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(config.optim.adamw());
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            step: 0,
            data,
        })
    }

    pub fn resume(checkpoint: Checkpoint, data: TrainingData) -> Result<Self, TrainError> {
        let (model, store) = checkpoint.model()?;
        Ok(Self {
            config: checkpoint.config,
            model,
            store,
            optimizer: checkpoint.optimizer,
            step: checkpoint.step,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            step: self.step,
            categories: self.data.categories.clone(),
            params: self.store.to_named(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Loss of the clip that iteration `step` draws, at the current weights,
    /// without updating anything.
    pub fn peek_loss(&self, step: usize) -> Result<LossBreakdown, TrainError> {
        let tape = Tape::new();
        let (loss, _) = self.loss_at(&tape, step)?;
        Ok(loss)
    }

    fn loss_at<'t>(
        &self,
        tape: &'t Tape,
        step: usize,
    ) -> Result<(LossBreakdown, vidseg_core::tensor::Var<'t>), TrainError> {
        let mut rng = step_rng(self.config.seed, step);
        let multiple = self.config.model.backbone.size_multiple();
        let (clip, gt) = self.data.sample_clip(
            self.config.train.clip_frames,
            self.config.train.max_size,
            multiple,
            &mut rng,
        );
        let out = self
            .model
            .forward(tape, &self.store, tape.constant(normalize_frames(&clip.frames)))?;
        let assignments = match_layers(&out.layers, &gt, &self.config.loss)?;
        let (loss, parts) = hungarian_loss(tape, &out.layers, &gt, &assignments, &self.config.loss)?;
        Ok((parts, loss))
    }

    /// Runs one iteration.
    pub fn train_step(&mut self) -> Result<StepLog, TrainError> {
        let step = self.step;
        let tape = Tape::new();
        let (parts, loss) = self.loss_at(&tape, step)?;
        if !parts.total.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        let grads = tape.backward(loss).into_params();
        drop(tape);
        let lr = self.config.optim.lr_at(step);
        let grad_norm = self.optimizer.step(&mut self.store, &grads, lr);
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            grad_norm,
            loss: parts,
        })
    }

    /// Trains until `config.train.iterations`, reporting every step to `log`
    /// and calling `save` at checkpoint periods.
    pub fn run(
        &mut self,
        mut log: impl FnMut(&StepLog),
        mut save: impl FnMut(&Trainer) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let every = self.config.train.checkpoint_every;
        while self.step < self.config.train.iterations {
            let entry = self.train_step()?;
            log(&entry);
            if every > 0 && self.step.is_multiple_of(every) {
                save(self)?;
            }
        }
        Ok(())
    }
}
