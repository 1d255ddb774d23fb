//! Persistence ("historical inertia") forecaster.

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, MAPE_FLOOR};
use crate::tensor::{Element, Tensor};

/// Repeats the last observed step of `x` `(B, T, N, C)` for `t_out` steps,
/// keeping the first `c_out` channels.
pub fn hi_baseline<F: Element>(x: &Tensor<F>, t_out: usize, c_out: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 4 || s[1] == 0 || c_out > s[3] {
        return Err(Error::shape(format!(
            "persistence needs (B, T>0, N, C>={c_out}) input, got {s:?}"
        )));
    }
    let (b, t, n, c) = (s[0], s[1], s[2], s[3]);
    Ok(Tensor::from_fn(&[b, t_out, n, c_out], |i| {
        let ch = i % c_out;
        let node = (i / c_out) % n;
        let bi = i / (c_out * n * t_out);
        x.data()[((bi * t + t - 1) * n + node) * c + ch]
    }))
}

/// Raw (un-normalized) input windows starting at `starts`.
pub fn raw_inputs(dataset: &Dataset, starts: &[usize]) -> Result<Tensor<f32>> {
    let (t_in, n, c) = (dataset.config.t_in, dataset.nodes(), dataset.channels());
    let row = n * c;
    let raw = dataset.series.values.data();
    let mut x = Vec::with_capacity(starts.len() * t_in * row);
    for &s in starts {
        if s + t_in > dataset.series.steps() {
            return Err(Error::IndexOutOfRange {
                index: s,
                len: dataset.series.steps(),
            });
        }
        x.extend_from_slice(&raw[s * row..(s + t_in) * row]);
    }
    Tensor::new(vec![starts.len(), t_in, n, c], x)
}

/// Persistence metrics on one split, in original units.
pub fn hi_evaluate(dataset: &Dataset, split: Split) -> Result<MetricReport> {
    let starts = dataset.windows.require(split)?;
    let x = raw_inputs(dataset, starts)?;
    let pred = hi_baseline(&x, dataset.config.t_out, dataset.config.c_out)?;
    let target = dataset.batch::<f32>(starts)?.y;
    evaluate(&pred, &target, MAPE_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetConfig, SplitRatios, TrafficSeries};

    fn series(f: impl Fn(usize, usize) -> f32, steps: usize, nodes: usize) -> TrafficSeries {
        let values = Tensor::from_fn(&[steps, nodes, 1], |i| f(i / nodes, i % nodes));
        TrafficSeries::new(values, 0, 300).unwrap()
    }

    #[test]
    fn repeats_last_step() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let y = hi_baseline(&x, 4, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 2, 1]);
        // batch 0, last step (t = 2) starts at flat index 8
        assert_eq!(&y.data()[..2], &[8.0, 10.0]);
        assert_eq!(&y.data()[6..8], &[8.0, 10.0]);
        assert_eq!(&y.data()[8..10], &[20.0, 22.0]);
        assert!(hi_baseline(&x, 4, 3).is_err());
    }

    #[test]
    fn constant_series_is_exact() {
        let ds = Dataset::new(series(|_, n| 40.0 + n as f32, 200, 3), DatasetConfig::default()).unwrap();
        let r = hi_evaluate(&ds, Split::Test).unwrap();
        assert_eq!(r.all.mae, 0.0);
    }

    #[test]
    fn ramp_error_is_arithmetic_mean_of_horizons() {
        // slope s per step: horizon h is off by s·h, mean over 1..=12 is 6.5·s
        let slope = 0.75f32;
        let cfg = DatasetConfig {
            ratios: SplitRatios::new(0.5, 0.25, 0.25).unwrap(),
            ..DatasetConfig::default()
        };
        let ds = Dataset::new(series(|t, n| 100.0 + n as f32 + slope * t as f32, 240, 2), cfg).unwrap();
        for split in [Split::Train, Split::Test] {
            let r = hi_evaluate(&ds, split).unwrap();
            assert!((r.all.mae - 6.5 * slope as f64).abs() < 1e-4, "{}", r.all.mae);
            let h3 = r.horizons.iter().find(|(h, _)| *h == 3).unwrap().1;
            assert!((h3.mae - 3.0 * slope as f64).abs() < 1e-4);
        }
    }
}
