//! Episodic training loop with step-decayed Adam and validation-accuracy
//! model selection.

use std::time::Instant;

use crate::episodes::{materialize, sample_episode, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::metrics::episode_accuracy;
use crate::numkernel::step_lr;
use crate::protonet::FewShotModel;
use crate::seeding;

/// Training schedule. Defaults follow the standard recipe: 100 epochs of
/// 100 episodes, 5 supports and 15 queries per class, Adam at 1e-3 halved
/// every 20 epochs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub k: usize,
    pub q: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub n_spoof_classes: usize,
    pub validation_episodes: usize,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            episodes_per_epoch: 100,
            k: 5,
            q: 15,
            lr: 1e-3,
            lr_step: 20,
            lr_gamma: 0.5,
            n_spoof_classes: 2,
            validation_episodes: 50,
            master_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("k", self.k),
            ("q", self.q),
            ("lr_step", self.lr_step),
            ("validation_episodes", self.validation_episodes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr {} must be nonnegative", self.lr)));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config(format!(
                "lr_gamma {} outside (0, 1]",
                self.lr_gamma
            )));
        }
        Ok(())
    }
}

/// One completed epoch. Wall time is kept for progress display only and is
/// excluded from the serialized log so identical seeds produce identical
/// log files.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_accuracy: f64,
    pub lr: f64,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Per-epoch records plus the index of the selected epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FewShotModel,
    pub log: Vec<TrainLogEntry>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// Line-delimited machine log (one JSON record per epoch).
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Episodic training: per episode sample -> loss -> backward -> Adam step at
/// the step-decayed rate; after each epoch, validation accuracy over a fixed
/// seeded episode set; the best-accuracy epoch's parameters are returned
/// (ties resolve to the earliest epoch).
pub fn train(
    model: FewShotModel,
    train_set: &EmbeddingDataset,
    valid_set: &EmbeddingDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    train_set.validate_for_training()?;
    valid_set.validate_for_training()?;

    let mut model = model;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, FewShotModel)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = step_lr(config.lr, epoch, config.lr_step, config.lr_gamma);
        let mut loss_sum = 0.0;
        for episode_idx in 0..config.episodes_per_epoch {
            let stream = (epoch * config.episodes_per_epoch + episode_idx) as u64;
            let mut rng = seeding::rng_from(config.master_seed, "train-episode", stream);
            let episode = sample_episode(
                train_set,
                model.objective,
                config.k,
                config.q,
                config.n_spoof_classes,
                &mut rng,
            )?;
            let batch = materialize(train_set, &episode)?;
            let (mut tape, loss) = model.episodic_loss(&batch)?;
            let loss_val = tape.scalar(loss)?;
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    episode: episode_idx,
                    value: loss_val,
                });
            }
            loss_sum += loss_val;
            tape.backward(loss)?;
            tape.export_grads(model.params_mut())?;
            model
                .params_mut()
                .adam_step(lr, (0.9, 0.999), 1e-8);
        }
        let validation_accuracy = episode_accuracy(
            &model,
            valid_set,
            config.k,
            config.q,
            config.n_spoof_classes,
            config.validation_episodes,
            config.master_seed,
        )?;
        log.push(TrainLogEntry {
            epoch,
            mean_loss: loss_sum / config.episodes_per_epoch as f64,
            validation_accuracy,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        let improved = match &best {
            None => true,
            Some((acc, _, _)) => validation_accuracy > *acc,
        };
        if improved {
            best = Some((validation_accuracy, epoch, model.clone()));
        }
    }

    let (_, best_epoch, best_model) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
    })
}
