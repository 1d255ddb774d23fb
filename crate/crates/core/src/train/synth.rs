//! Seeded synthetic traffic generator for desk-scale experiments.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{write_edges_csv, Edge, TrafficSeries, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 1970-01-05 00:00 UTC, a Monday.
pub const SYNTH_START_EPOCH: i64 = 4 * SECONDS_PER_DAY;

pub const TRAFFIC_FILE: &str = "traffic.bin";
pub const DISTANCE_FILE: &str = "distances.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub seed: u64,
    pub step_seconds: u32,
    /// Standard deviation of the additive Gaussian noise, in flow units.
    pub noise: f64,
    /// Fractional amplitude drop on Saturdays and Sundays.
    pub weekly_depth: f64,
    pub base: f64,
    pub amplitude: f64,
    /// Weight of the neighbour average in the smoothing pass.
    pub coupling: f64,
    /// Connection radius of the geometric graph in the unit square.
    pub radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 16,
            days: 14,
            seed: 0,
            step_seconds: 300,
            noise: 5.0,
            weekly_depth: 0.1,
            base: 200.0,
            amplitude: 120.0,
            coupling: 0.5,
            radius: 0.35,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub series: TrafficSeries,
    /// Both directions of every geometric-graph link, distances in km.
    pub edges: Vec<Edge>,
    pub positions: Vec<(f64, f64)>,
}

/// Daily sinusoid with a weekend dip, one smoothing pass over a random
/// geometric graph, then noise. Fully determined by `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.nodes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 nodes, got {}",
            cfg.nodes
        )));
    }
    if cfg.days == 0 || cfg.step_seconds == 0 || SECONDS_PER_DAY % i64::from(cfg.step_seconds) != 0 {
        return Err(Error::Config(format!(
            "{} days at {} s steps is not a whole-day series",
            cfg.days, cfg.step_seconds
        )));
    }
    if !(cfg.noise >= 0.0) || !(0.0..=1.0).contains(&cfg.coupling) || !(0.0..=1.0).contains(&cfg.weekly_depth) {
        return Err(Error::Config(
            "noise must be >= 0; coupling and weekly_depth in [0, 1]".into(),
        ));
    }
    let n = cfg.nodes;
    let n_d = (SECONDS_PER_DAY / i64::from(cfg.step_seconds)) as usize;
    let steps = cfg.days * n_d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let positions: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let base: Vec<f64> = (0..n).map(|_| cfg.base * rng.random_range(0.7..1.3)).collect();
    let amp: Vec<f64> = (0..n).map(|_| cfg.amplitude * rng.random_range(0.6..1.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();

    let dist = |i: usize, j: usize| {
        let (a, b) = (positions[i], positions[j]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    };
    let mut linked = vec![vec![false; n]; n];
    for i in 0..n {
        let nearest = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)))
            .expect("at least two nodes");
        for j in 0..n {
            if j != i && (dist(i, j) < cfg.radius || j == nearest) {
                linked[i][j] = true;
                linked[j][i] = true;
            }
        }
    }
    let mut edges = Vec::new();
    for (i, row) in linked.iter().enumerate() {
        for (j, _) in row.iter().enumerate().filter(|(_, l)| **l) {
            // km, rounded so the CSV round-trips exactly
            let d = (dist(i, j) * 10_000.0).round() / 1000.0;
            edges.push(Edge {
                from: i,
                to: j,
                distance: d,
            });
        }
    }

    let mut clean = vec![0.0f64; n];
    let mut values = Vec::with_capacity(steps * n);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    for t in 0..steps {
        let (day, slot) = (t / n_d, t % n_d);
        let weekend = matches!(day % 7, 5 | 6);
        let m = if weekend { 1.0 - cfg.weekly_depth } else { 1.0 };
        let theta = TAU * slot as f64 / n_d as f64;
        for i in 0..n {
            clean[i] = base[i] + m * amp[i] * (theta + phase[i]).sin();
        }
        for i in 0..n {
            let (sum, deg) = (0..n)
                .filter(|&j| linked[i][j])
                .fold((0.0, 0usize), |(s, d), j| (s + clean[j], d + 1));
            let mut v = (1.0 - cfg.coupling) * clean[i] + cfg.coupling * sum / deg as f64;
            if cfg.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            values.push(v as f32);
        }
    }
    let series = TrafficSeries::new(
        Tensor::new(vec![steps, n, 1], values)?,
        SYNTH_START_EPOCH,
        cfg.step_seconds,
    )?;
    Ok(SynthData {
        series,
        edges,
        positions,
    })
}

impl SynthData {
    /// Writes [`TRAFFIC_FILE`] and [`DISTANCE_FILE`] into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let traffic = dir.join(TRAFFIC_FILE);
        let distances = dir.join(DISTANCE_FILE);
        self.series.save_binary(&traffic)?;
        write_edges_csv(&self.edges, BufWriter::new(File::create(&distances)?))?;
        Ok((traffic, distances))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_adjacency, read_edges_csv, Dataset, DatasetConfig, Split};
    use crate::metrics::Metrics;
    use crate::train::hi_evaluate;

    fn quiet() -> SynthConfig {
        SynthConfig {
            nodes: 6,
            days: 3,
            noise: 0.0,
            weekly_depth: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_flat_week_is_daily_periodic() {
        let d = synth_generate(&quiet()).unwrap();
        let v = d.series.values.data();
        let day = 288 * 6;
        assert_eq!(v.len(), 3 * day);
        assert!((0..2 * day).all(|i| v[i] == v[i + day]));
        // and not trivially constant
        assert!(v[..day].iter().any(|&x| x != v[0]));
    }

    #[test]
    fn weekend_dip_breaks_daily_period() {
        let cfg = SynthConfig { days: 7, ..quiet() };
        let flat = synth_generate(&cfg).unwrap();
        let dipped = synth_generate(&SynthConfig {
            weekly_depth: 0.3,
            ..cfg
        })
        .unwrap();
        let day = 288 * 6;
        let (f, d) = (flat.series.values.data(), dipped.series.values.data());
        assert_eq!(&f[..5 * day], &d[..5 * day]);
        assert_ne!(&f[5 * day..], &d[5 * day..]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            nodes: 5,
            days: 2,
            seed: 42,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = synth_generate(&cfg).unwrap().write(&dir.path().join("a")).unwrap();
        let b = synth_generate(&cfg).unwrap().write(&dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(&a.0).unwrap(), std::fs::read(&b.0).unwrap());
        assert_eq!(std::fs::read(&a.1).unwrap(), std::fs::read(&b.1).unwrap());
        let other = synth_generate(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(other.series.to_binary(), std::fs::read(&a.0).unwrap());
    }

    #[test]
    fn files_load_back_and_graph_is_connected_enough() {
        let cfg = SynthConfig {
            nodes: 10,
            days: 1,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (traffic, distances) = data.write(dir.path()).unwrap();
        let series = TrafficSeries::load(&traffic).unwrap();
        assert_eq!(series.values, data.series.values);
        assert_eq!(series.start_epoch, SYNTH_START_EPOCH);
        let edges = read_edges_csv(std::io::BufReader::new(File::open(distances).unwrap())).unwrap();
        assert_eq!(edges, data.edges);
        let mut degree = [0; 10];
        for e in &edges {
            degree[e.from] += 1;
        }
        assert!(degree.iter().all(|&d| d >= 1));
        let a = build_adjacency(&edges, 10, None, 0.1).unwrap();
        assert_eq!(a.shape(), &[10, 10]);
    }

    #[test]
    fn rejects_single_node() {
        assert!(synth_generate(&SynthConfig {
            nodes: 1,
            ..SynthConfig::default()
        })
        .is_err());
    }

    /// Per-node least squares on `[1, cos θ, sin θ]` of the time of day.
    fn harmonic_fit(values: &[f32], n: usize, steps: std::ops::Range<usize>, n_d: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|node| {
                let mut ata = [[0.0f64; 3]; 3];
                let mut aty = [0.0f64; 3];
                for t in steps.clone() {
                    let th = TAU * (t % n_d) as f64 / n_d as f64;
                    let row = [1.0, th.cos(), th.sin()];
                    for r in 0..3 {
                        aty[r] += row[r] * values[t * n + node] as f64;
                        for c in 0..3 {
                            ata[r][c] += row[r] * row[c];
                        }
                    }
                }
                solve3(ata, aty)
            })
            .collect()
    }

    fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
        for col in 0..3 {
            let piv = (col..3)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..3 {
                let f = a[r][col] / a[col][col];
                for c in col..3 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = [0.0; 3];
        for r in (0..3).rev() {
            x[r] = (b[r] - (r + 1..3).map(|c| a[r][c] * x[c]).sum::<f64>()) / a[r][r];
        }
        x
    }

    #[test]
    fn persistence_loses_to_a_daily_harmonic() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg).unwrap();
        let n = cfg.nodes;
        let ds = Dataset::new(data.series, DatasetConfig::default()).unwrap();
        let n_d = ds.steps_per_day;
        let v = ds.series.values.data();
        let coef = harmonic_fit(v, n, ds.windows.segment(Split::Train), n_d);
        let (mut pred, mut target) = (Vec::new(), Vec::new());
        for &s in ds.window_starts(Split::Test) {
            for t in s + 12..s + 24 {
                let th = TAU * (t % n_d) as f64 / n_d as f64;
                for (node, c) in coef.iter().enumerate() {
                    pred.push(c[0] + c[1] * th.cos() + c[2] * th.sin());
                    target.push(v[t * n + node] as f64);
                }
            }
        }
        let fit = Metrics::compute(pred, target, 10.0).unwrap();
        let hi = hi_evaluate(&ds, Split::Test).unwrap();
        assert!(
            hi.all.mae > fit.mae,
            "persistence {} vs harmonic {}",
            hi.all.mae,
            fit.mae
        );
    }
}
