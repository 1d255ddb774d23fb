use super::calendar::{calendar_indices, steps_per_day};
use super::normalize::{zscore_fit_apply, NormStats};
use super::series::TrafficSeries;
use super::windows::{make_windows, Split, SplitRatios, WindowSplits};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub ratios: SplitRatios,
    /// Leading channels used as prediction targets.
    pub c_out: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            t_in: 12,
            t_out: 12,
            ratios: SplitRatios::default(),
            c_out: 1,
        }
    }
}

/// A batch of input windows with calendar indices and raw-unit targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<F: Element = f32> {
    /// `(B, T, N, C)`, normalized.
    pub x: Tensor<F>,
    /// `(B, T', N, C_out)`, original units.
    pub y: Tensor<F>,
    /// `(B, T)` time-of-day slots, row-major.
    pub tod: Vec<usize>,
    /// `(B, T)` day-of-week, Monday = 0.
    pub dow: Vec<usize>,
}

impl<F: Element> SampleBatch<F> {
    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn cast<G: Element>(&self) -> SampleBatch<G> {
        SampleBatch {
            x: self.x.cast(),
            y: self.y.cast(),
            tod: self.tod.clone(),
            dow: self.dow.clone(),
        }
    }
}

/// A normalized series together with its windows and statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub series: TrafficSeries,
    pub normalized: Tensor<f32>,
    pub stats: NormStats,
    pub windows: WindowSplits,
    pub steps_per_day: usize,
}

impl Dataset {
    pub fn new(series: TrafficSeries, config: DatasetConfig) -> Result<Self> {
        if config.c_out == 0 || config.c_out > series.channels() {
            return Err(Error::Config(format!(
                "c_out = {} but the series has {} channels",
                config.c_out,
                series.channels()
            )));
        }
        let steps_per_day = steps_per_day(series.step_seconds)?;
        let windows = make_windows(series.steps(), config.t_in, config.t_out, config.ratios)?;
        let (normalized, stats) = zscore_fit_apply(&series, windows.segments[0].len())?;
        Ok(Self {
            config,
            series,
            normalized,
            stats,
            windows,
            steps_per_day,
        })
    }

    pub fn nodes(&self) -> usize {
        self.series.nodes()
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    pub fn window_starts(&self, split: Split) -> &[usize] {
        self.windows.get(split)
    }

    /// Assembles the windows starting at the given raw-series offsets.
    pub fn batch<F: Element>(&self, starts: &[usize]) -> Result<SampleBatch<F>> {
        let (t_in, t_out, c_out) = (self.config.t_in, self.config.t_out, self.config.c_out);
        let (n, c) = (self.nodes(), self.channels());
        if starts.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let row = n * c;
        let src = self.normalized.data();
        let raw = self.series.values.data();
        let mut x = Vec::with_capacity(starts.len() * t_in * row);
        let mut y = Vec::with_capacity(starts.len() * t_out * n * c_out);
        let mut tod = Vec::with_capacity(starts.len() * t_in);
        let mut dow = Vec::with_capacity(starts.len() * t_in);
        for &s in starts {
            if s + t_in + t_out > self.series.steps() {
                return Err(Error::IndexOutOfRange {
                    index: s,
                    len: self.series.steps() + 1 - t_in - t_out,
                });
            }
            x.extend(src[s * row..(s + t_in) * row].iter().map(|&v| F::of(v as f64)));
            for t in s + t_in..s + t_in + t_out {
                for node in 0..n {
                    let base = t * row + node * c;
                    y.extend(raw[base..base + c_out].iter().map(|&v| F::of(v as f64)));
                }
            }
            for t in s..s + t_in {
                let (a, b) = calendar_indices(self.series.start_epoch, self.series.step_seconds, t);
                tod.push(a);
                dow.push(b);
            }
        }
        let b = starts.len();
        Ok(SampleBatch {
            x: Tensor::new(vec![b, t_in, n, c], x)?,
            y: Tensor::new(vec![b, t_out, n, c_out], y)?,
            tod,
            dow,
        })
    }
}
