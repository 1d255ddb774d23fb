use super::series::TrafficSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits on the first `train_steps` time steps of a `(T, N, C)` tensor.
    pub fn fit(values: &Tensor<f32>, train_steps: usize) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(format!("expected (T, N, C), got {:?}", values.shape())));
        }
        let (t, n, c) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        if train_steps == 0 || train_steps > t {
            return Err(Error::Data(format!(
                "training segment of {train_steps} steps is unusable for a series of {t}"
            )));
        }
        let train = &values.data()[..train_steps * n * c];
        let count = (train_steps * n) as f64;
        let mut mean = vec![0.0; c];
        for row in train.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for row in train.chunks(c) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std = var.iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes any tensor whose last axis is the channel axis.
    pub fn apply(&self, values: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.map_channels(values, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, values: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.map_channels(values, |v, m, s| v * s + m)
    }

    fn map_channels(&self, values: &Tensor<f32>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f32>> {
        let c = *values.shape().last().unwrap_or(&0);
        if c > self.channels() {
            return Err(Error::shape(format!(
                "tensor has {c} channels, statistics cover {}",
                self.channels()
            )));
        }
        let mut out = values.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = f(*v as f64, self.mean[k], self.std[k]) as f32;
            }
        }
        Ok(out)
    }
}

/// Fits statistics on the first `train_steps` steps and normalizes the whole series.
pub fn zscore_fit_apply(series: &TrafficSeries, train_steps: usize) -> Result<(Tensor<f32>, NormStats)> {
    if series.values.is_empty() {
        return Err(Error::Data("cannot normalize an empty series".into()));
    }
    let stats = NormStats::fit(&series.values, train_steps)?;
    Ok((stats.apply(&series.values)?, stats))
}
