//! Training loss and evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Targets with `|y| <= MAPE_FLOOR` are excluded from MAPE.
pub const MAPE_FLOOR: f64 = 10.0;

/// Horizons (1-based steps) reported separately besides the pooled row.
pub const HORIZONS: [usize; 3] = [3, 6, 12];

/// Mean absolute error between two equally shaped tape values.
pub fn mae_loss<F: Element>(tape: &Tape<F>, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred), tape.shape(target));
    if ps != ts {
        return Err(Error::shape(format!("loss between {ps:?} and {ts:?}")));
    }
    let diff = tape.sub(pred, target)?;
    Ok(tape.mean(tape.abs(diff)))
}

/// Pooled error statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when no target exceeds the floor.
    pub mape: Option<f64>,
    /// `None` when the targets have zero variance.
    pub nse: Option<f64>,
    pub count: usize,
}

impl Metrics {
    /// Metrics over paired values, accumulated in 64-bit.
    pub fn compute(
        pred: impl IntoIterator<Item = f64>,
        target: impl IntoIterator<Item = f64>,
        mape_floor: f64,
    ) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = pred.into_iter().zip(target).collect();
        if pairs.is_empty() {
            return Err(Error::Data("metrics need at least one value".into()));
        }
        let n = pairs.len() as f64;
        let (mut abs, mut sq, mut ape, mut ape_n, mut ysum) = (0.0, 0.0, 0.0, 0usize, 0.0);
        for &(p, y) in &pairs {
            let e = p - y;
            abs += e.abs();
            sq += e * e;
            ysum += y;
            if y.abs() > mape_floor {
                ape += (e / y).abs();
                ape_n += 1;
            }
        }
        let ymean = ysum / n;
        let var: f64 = pairs.iter().map(|&(_, y)| (y - ymean) * (y - ymean)).sum();
        Ok(Self {
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            mape: (ape_n > 0).then(|| 100.0 * ape / ape_n as f64),
            nse: (var > 0.0).then(|| 1.0 - sq / var),
            count: pairs.len(),
        })
    }
}

/// Pooled and per-horizon metrics for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub all: Metrics,
    /// `(step, metrics)` for each entry of [`HORIZONS`] within range.
    pub horizons: Vec<(usize, Metrics)>,
}

impl MetricReport {
    /// `rows` yields `(horizon label, metrics)` in CSV order.
    pub fn rows(&self) -> Vec<(String, Metrics)> {
        let mut out: Vec<(String, Metrics)> = self.horizons.iter().map(|(h, m)| (h.to_string(), *m)).collect();
        out.push(("all".into(), self.all));
        out
    }
}

/// Metrics on `(B, T', N, C)` predictions and targets in original units.
pub fn evaluate<F: Element>(pred: &Tensor<F>, target: &Tensor<F>, mape_floor: f64) -> Result<MetricReport> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "evaluating {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let all = Metrics::compute(
        pred.data().iter().map(|v| v.as_f64()),
        target.data().iter().map(|v| v.as_f64()),
        mape_floor,
    )?;
    let mut horizons = Vec::new();
    if pred.rank() == 4 {
        let (b, t) = (pred.shape()[0], pred.shape()[1]);
        let inner = pred.len() / (b * t);
        for h in HORIZONS.into_iter().filter(|&h| h <= t) {
            let idx = (0..b).flat_map(|bi| {
                let start = (bi * t + h - 1) * inner;
                start..start + inner
            });
            let p = idx.clone().map(|i| pred.data()[i].as_f64());
            let y = idx.map(|i| target.data()[i].as_f64());
            horizons.push((h, Metrics::compute(p, y, mape_floor)?));
        }
    }
    Ok(MetricReport { all, horizons })
}

/// Writes `split,horizon,mae,rmse,mape,nse` rows; undefined values are left empty.
pub fn write_metrics_csv<W: std::io::Write>(mut out: W, reports: &[(&str, &MetricReport)], header: bool) -> Result<()> {
    if header {
        writeln!(out, "split,horizon,mae,rmse,mape,nse")?;
    }
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (split, report) in reports {
        for (h, m) in report.rows() {
            writeln!(
                out,
                "{split},{h},{:.6},{:.6},{},{}",
                m.mae,
                m.rmse,
                opt(m.mape),
                opt(m.nse)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_example() {
        let m = Metrics::compute([2.0, 4.0], [1.0, 2.0], 0.0).unwrap();
        assert_eq!(m.mae, 1.5);
        assert!((m.rmse - 1.5811).abs() < 1e-4);
        // per-element ratios are 1/1 and 2/2
        assert!((m.mape.unwrap() - 100.0).abs() < 1e-12);
        assert!((m.nse.unwrap() + 9.0).abs() < 1e-12);
        let floored = Metrics::compute([2.0, 4.0], [1.0, 2.0], MAPE_FLOOR).unwrap();
        assert_eq!(floored.mape, None);
    }

    #[test]
    fn perfect_prediction() {
        let y = [12.0, 40.0, 3.0];
        let m = Metrics::compute(y, y, MAPE_FLOOR).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.nse), (0.0, 0.0, Some(0.0), Some(1.0)));
    }

    #[test]
    fn horizon_rows() {
        let target = Tensor::<f64>::from_fn(&[2, 12, 3, 1], |i| 20.0 + i as f64);
        let pred = Tensor::<f64>::from_fn(&[2, 12, 3, 1], |i| 20.0 + i as f64 + ((i / 3) % 12) as f64);
        let r = evaluate(&pred, &target, MAPE_FLOOR).unwrap();
        let steps: Vec<(usize, f64)> = r.horizons.iter().map(|(h, m)| (*h, m.mae)).collect();
        assert_eq!(steps, vec![(3, 2.0), (6, 5.0), (12, 11.0)]);
        assert!((r.all.mae - 5.5).abs() < 1e-12);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("test", &r)], true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().starts_with("test,all,5.500000"));
    }

    #[test]
    fn loss_matches_loop() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -2.5]).unwrap();
        let b = Tensor::from_f64(&[2, 3], &[1.0, 1.0, 1.0, -1.0, 0.25, 0.0]).unwrap();
        let want: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y): (&f64, &f64)| (x - y).abs())
            .sum::<f64>()
            / 6.0;
        let (pa, pb) = (tape.constant(a.clone()), tape.constant(b));
        let l = mae_loss(&tape, pa, pb).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        let shifted = tape.constant(a.map(|v| v + 0.75));
        let pa = tape.constant(a);
        let l = mae_loss(&tape, shifted, pa).unwrap();
        assert!((tape.value(l).item() - 0.75).abs() < 1e-12);
        let wrong = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(mae_loss(&tape, pa, wrong).is_err());
    }
}
