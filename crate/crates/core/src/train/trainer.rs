use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{clip_global_norm, Adam};
use super::config::TrainConfig;
use crate::data::{Dataset, GraphPair, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, MAPE_FLOOR};
use crate::model::{Dtrformer, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";

/// Derives a per-epoch (and per-step) stream from the run seed.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Non-finite values reaching the loss or an attention softmax mean the
/// parameters have blown up.
fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteLoss(loss) => Error::Diverged { epoch, loss },
        Error::NonFiniteLogits => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Patience counter on validation MAE.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Records an epoch's score; `true` on a strict improvement.
    pub fn observe(&mut self, epoch: usize, val_mae: f64) -> bool {
        if val_mae < self.best {
            self.best = val_mae;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

/// One run: model, optimizer state and the early-stopping record.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Dtrformer<f32>,
    pub adam: Adam<f32>,
    pub stopper: EarlyStopping,
    pub graphs: GraphPair,
    epoch: usize,
    best: Option<ParamStore<f32>>,
}

impl Trainer {
    /// Builds the model for `dataset`'s shape and seeds it from the config.
    pub fn new(config: TrainConfig, dataset: &Dataset, graphs: GraphPair) -> Result<Self> {
        config.validate()?;
        if graphs.nodes() != dataset.nodes() {
            return Err(Error::shape(format!(
                "graph has {} nodes, data has {}",
                graphs.nodes(),
                dataset.nodes()
            )));
        }
        let model_config = config.model_config(dataset.nodes(), dataset.channels(), dataset.steps_per_day);
        let model = Dtrformer::new(model_config, config.seed)?;
        let adam = Adam::new(&model.params, config.lr);
        Ok(Self {
            stopper: EarlyStopping::new(config.patience),
            config,
            model,
            adam,
            graphs,
            epoch: 0,
            best: None,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled training windows; returns the
    /// window-weighted mean batch loss.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<f64> {
        let epoch = self.epoch + 1;
        let mut starts = dataset.windows.require(Split::Train)?.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch as u64, 0));
        starts.shuffle(&mut rng);
        let dropout = self.config.model.dropout > 0.0;
        let (mut total, mut count) = (0.0, 0usize);
        for (step, chunk) in starts.chunks(self.config.batch_size).enumerate() {
            let batch = dataset.batch::<f32>(chunk)?;
            let seed = dropout.then(|| mix(self.config.seed, epoch as u64, step as u64 + 1));
            let (loss, mut grads) = self
                .model
                .loss_and_grads(&batch, &self.graphs, &dataset.stats, seed)
                .map_err(|e| diverged(e, epoch))?;
            clip_global_norm(&mut grads, self.config.clip_norm);
            self.adam.step(&mut self.model.params, &grads)?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        self.epoch = epoch;
        Ok(total / count as f64)
    }

    /// Predictions and targets for every window of `split`, in original units.
    pub fn predict_split(&self, dataset: &Dataset, split: Split) -> Result<(Tensor<f32>, Tensor<f32>)> {
        predict_split(&self.model, &self.graphs, dataset, split, self.config.batch_size)
    }

    pub fn evaluate(&self, dataset: &Dataset, split: Split) -> Result<MetricReport> {
        let (pred, target) = self.predict_split(dataset, split)?;
        evaluate(&pred, &target, MAPE_FLOOR)
    }

    /// Trains until patience runs out or `max_epochs`, then restores the
    /// best-validation parameters.
    ///
    /// With `out_dir`, writes the config, `train_log.csv` after every epoch
    /// and the best checkpoint whenever validation MAE improves. On
    /// divergence the best parameters are restored and the error returned;
    /// the checkpoint on disk is left as it was.
    pub fn fit(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainReport> {
        self.fit_with(dataset, out_dir, |_| {})
    }

    /// [`Trainer::fit`], calling `on_epoch` after each logged epoch.
    pub fn fit_with(
        &mut self,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainReport> {
        dataset.windows.require(Split::Train)?;
        dataset.windows.require(Split::Val)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        }
        let mut log = Vec::new();
        let mut stopped_early = false;
        while self.epoch < self.config.max_epochs {
            let t0 = Instant::now();
            let result = self.run_epoch(dataset).and_then(|train_mae| {
                let val_mae = self
                    .evaluate(dataset, Split::Val)
                    .map_err(|e| diverged(e, self.epoch))?
                    .all
                    .mae;
                if val_mae.is_finite() {
                    Ok((train_mae, val_mae))
                } else {
                    Err(Error::Diverged {
                        epoch: self.epoch,
                        loss: val_mae,
                    })
                }
            });
            let (train_mae, val_mae) = match result {
                Ok(v) => v,
                Err(e) => {
                    self.restore_best()?;
                    return Err(e);
                }
            };
            log.push(EpochLog {
                epoch: self.epoch,
                train_mae,
                val_mae,
                seconds: t0.elapsed().as_secs_f64(),
            });
            on_epoch(&log[log.len() - 1]);
            if self.stopper.observe(self.epoch, val_mae) {
                self.best = Some(self.model.params.clone());
                if let Some(dir) = out_dir {
                    self.model.params.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
            if let Some(dir) = out_dir {
                write_log(&dir.join(LOG_FILE), &log)?;
            }
            if self.stopper.should_stop() {
                stopped_early = true;
                break;
            }
        }
        self.restore_best()?;
        Ok(TrainReport {
            log,
            best_epoch: self.stopper.best_epoch,
            best_val_mae: self.stopper.best,
            stopped_early,
        })
    }

    fn restore_best(&mut self) -> Result<()> {
        match &self.best {
            Some(best) => self.model.params.assign(best),
            None => Ok(()),
        }
    }
}

/// Batched prediction over one split.
pub fn predict_split(
    model: &Dtrformer<f32>,
    graphs: &GraphPair,
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let starts = dataset.windows.require(split)?;
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    let mut shape = Vec::new();
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = dataset.batch::<f32>(chunk)?;
        let p = model.predict(&batch, graphs, &dataset.stats)?;
        shape = p.shape().to_vec();
        pred.extend_from_slice(p.data());
        target.extend_from_slice(batch.y.data());
    }
    shape[0] = starts.len();
    Ok((Tensor::new(shape.clone(), pred)?, Tensor::new(shape, target)?))
}

/// `epoch,train_mae,val_mae,seconds`.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,train_mae,val_mae,seconds")?;
    for e in log {
        writeln!(out, "{},{:.6},{:.6},{:.3}", e.epoch, e.train_mae, e.val_mae, e.seconds)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the config and best parameters written by [`Trainer::fit`].
pub fn load_run(dir: &Path) -> Result<(TrainConfig, ParamStore<f32>)> {
    let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    let params = ParamStore::load(&dir.join(CHECKPOINT_FILE))?;
    Ok((config, params))
}

/// Rebuilds a trained model for `dataset` from a run directory.
pub fn restore_model(dir: &Path, dataset: &Dataset) -> Result<(TrainConfig, Dtrformer<f32>)> {
    let (config, params) = load_run(dir)?;
    let mc = config.model_config(dataset.nodes(), dataset.channels(), dataset.steps_per_day);
    let mut model = Dtrformer::new(mc, config.seed)?;
    model.params.assign(&params)?;
    Ok((config, model))
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_score_stops_after_patience_plus_one() {
        let mut s = EarlyStopping::new(10);
        let mut epochs = 0;
        for epoch in 1..=200 {
            epochs = epoch;
            s.observe(epoch, 3.25);
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(epochs, 11);
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn improving_score_never_stops() {
        let mut s = EarlyStopping::new(2);
        for epoch in 1..=50 {
            assert!(s.observe(epoch, 100.0 - epoch as f64));
            assert!(!s.should_stop());
        }
        assert!(!s.observe(51, 60.0));
        assert_eq!(s.best, 50.0);
    }

    #[test]
    fn mixing_separates_streams() {
        assert_ne!(mix(0, 1, 0), mix(0, 2, 0));
        assert_ne!(mix(0, 1, 1), mix(0, 1, 2));
        assert_eq!(mix(7, 3, 4), mix(7, 3, 4));
    }
}
