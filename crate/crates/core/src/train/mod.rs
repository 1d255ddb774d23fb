//! Optimization, experiment configuration and synthetic data.

mod adam;
mod baseline;
mod config;
mod experiment;
mod synth;
mod trainer;

pub use adam::{clip_global_norm, Adam};
pub use baseline::{hi_baseline, hi_evaluate, raw_inputs};
pub use config::{TrainConfig, CONFIG_KEYS};
pub use experiment::{load_inputs, train_and_evaluate, RunSummary, METRICS_FILE};
pub use synth::{synth_generate, SynthConfig, SynthData, DISTANCE_FILE, SYNTH_START_EPOCH, TRAFFIC_FILE};
pub use trainer::{
    checkpoint_path, load_run, predict_split, restore_model, write_log, EarlyStopping, EpochLog, TrainReport, Trainer,
    CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE,
};
