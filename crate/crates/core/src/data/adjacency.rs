use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel weights below this are dropped.
pub const DEFAULT_THETA: f64 = 0.1;

/// A directed road segment between two sensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub distance: f64,
}

/// Reads `from,to,distance` lines. A leading non-numeric header is skipped.
pub fn read_edges_csv<R: BufRead>(reader: R) -> Result<Vec<Edge>> {
    let mut edges = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let bad = || Error::Format(format!("line {}: expected from,to,distance", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad());
        }
        edges.push(Edge {
            from: fields[0].parse().map_err(|_| bad())?,
            to: fields[1].parse().map_err(|_| bad())?,
            distance: fields[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(edges)
}

pub fn write_edges_csv<W: Write>(edges: &[Edge], mut out: W) -> Result<()> {
    writeln!(out, "from,to,distance")?;
    for e in edges {
        writeln!(out, "{},{},{}", e.from, e.to, e.distance)?;
    }
    Ok(())
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Thresholded Gaussian-kernel adjacency with unit self-loops.
///
/// `sigma = None` uses the population std of the listed distances.
pub fn build_adjacency(edges: &[Edge], n: usize, sigma: Option<f64>, theta: f64) -> Result<Tensor<f64>> {
    if n == 0 {
        return Err(Error::Data("adjacency needs at least one node".into()));
    }
    let mut seen: HashMap<(usize, usize), f64> = HashMap::new();
    for e in edges {
        if e.from >= n || e.to >= n {
            return Err(Error::Data(format!(
                "edge {}->{} references a node outside [0, {n})",
                e.from, e.to
            )));
        }
        if !(e.distance >= 0.0) || !e.distance.is_finite() {
            return Err(Error::Data(format!(
                "edge {}->{} has invalid distance {}",
                e.from, e.to, e.distance
            )));
        }
        if let Some(&d) = seen.get(&(e.from, e.to)) {
            if d != e.distance {
                return Err(Error::Data(format!(
                    "edge {}->{} listed with conflicting distances {d} and {}",
                    e.from, e.to, e.distance
                )));
            }
        }
        seen.insert((e.from, e.to), e.distance);
    }

    let mut a = Tensor::<f64>::zeros(&[n, n]);
    if !seen.is_empty() {
        let sigma = match sigma {
            Some(s) => s,
            None => population_std(edges.iter().map(|e| e.distance)),
        };
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Data(format!("kernel width sigma must be positive, got {sigma}")));
        }
        let data = a.data_mut();
        for (&(i, j), &d) in &seen {
            let w = (-(d * d) / (sigma * sigma)).exp();
            data[i * n + j] = if w >= theta { w } else { 0.0 };
        }
    }
    let data = a.data_mut();
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Ok(a)
}

/// Row-normalized forward and backward transition matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphPair {
    pub a_fwd: Tensor<f32>,
    pub a_bwd: Tensor<f32>,
}

fn row_normalize(a: &Tensor<f64>) -> Tensor<f32> {
    let n = a.shape()[1];
    let mut out = Vec::with_capacity(a.len());
    for row in a.data().chunks(n) {
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|&v| if s > 0.0 { (v / s) as f32 } else { 0.0 }));
    }
    Tensor::new(a.shape().to_vec(), out).expect("same shape")
}

impl GraphPair {
    pub fn from_adjacency(a: &Tensor<f64>) -> Result<Self> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(Error::shape(format!("adjacency must be square, got {:?}", a.shape())));
        }
        if a.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Data("adjacency entries must be non-negative".into()));
        }
        Ok(Self {
            a_fwd: row_normalize(a),
            a_bwd: row_normalize(&a.permute(&[1, 0])?),
        })
    }

    pub fn nodes(&self) -> usize {
        self.a_fwd.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(from: usize, to: usize, distance: f64) -> Edge {
        Edge { from, to, distance }
    }

    #[test]
    fn kernel_examples() {
        let a = build_adjacency(&[e(0, 1, 0.0)], 2, Some(1.0), 0.1).unwrap();
        assert_eq!(a.data(), &[1.0, 1.0, 0.0, 1.0]);

        let a = build_adjacency(&[e(0, 1, 2.0)], 2, Some(1.0), 0.1).unwrap();
        assert_eq!(a.data()[1], 0.0, "exp(-4) is under the threshold");

        let a = build_adjacency(&[e(1, 0, 3.5)], 2, Some(3.5), 0.1).unwrap();
        assert!((a.data()[2] - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn sigma_defaults_to_distance_std() {
        let edges = [e(0, 1, 1.0), e(1, 2, 3.0)];
        let a = build_adjacency(&edges, 3, None, 0.0).unwrap();
        assert!((a.data()[1] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((a.data()[5] - (-9.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(build_adjacency(&[e(0, 2, 1.0)], 2, Some(1.0), 0.1).is_err());
        assert!(build_adjacency(&[e(0, 1, 1.0), e(0, 1, 2.0)], 2, Some(1.0), 0.1).is_err());
        assert!(build_adjacency(&[e(0, 1, 1.0), e(0, 1, 1.0)], 2, Some(1.0), 0.1).is_ok());
        assert!(build_adjacency(&[e(0, 1, 1.0)], 2, None, 0.1).is_err(), "zero spread");
        assert_eq!(
            build_adjacency(&[], 2, None, 0.1).unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn zero_rows_stay_zero() {
        let a = Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let g = GraphPair::from_adjacency(&a).unwrap();
        assert_eq!(g.a_fwd.data(), &[0.0, 0.0, 0.5, 0.5]);
        assert_eq!(g.a_bwd.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let edges = vec![e(0, 1, 12.5), e(3, 2, 0.0)];
        let mut buf = Vec::new();
        write_edges_csv(&edges, &mut buf).unwrap();
        assert_eq!(read_edges_csv(buf.as_slice()).unwrap(), edges);
    }

    proptest! {
        #[test]
        fn normalized_rows_sum_to_one(
            n in 1usize..9,
            raw in proptest::collection::vec((0usize..9, 0usize..9, 0.0f64..50.0), 0..30),
        ) {
            let mut seen = std::collections::HashSet::new();
            let edges: Vec<Edge> = raw
                .into_iter()
                .filter(|(f, t, _)| *f < n && *t < n && seen.insert((*f, *t)))
                .map(|(f, t, d)| e(f, t, d))
                .collect();
            let a = build_adjacency(&edges, n, Some(10.0), DEFAULT_THETA).unwrap();
            let g = GraphPair::from_adjacency(&a).unwrap();
            for m in [&g.a_fwd, &g.a_bwd] {
                for row in m.data().chunks(n) {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    let s: f32 = row.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6 || s == 0.0);
                }
            }
        }
    }
}
