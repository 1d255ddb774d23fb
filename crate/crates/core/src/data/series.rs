use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::calendar::steps_per_day;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"TRAF1\n";

/// Raw sensor readings shaped `(T_total, N, C)` with their sampling clock.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    pub values: Tensor<f32>,
    pub start_epoch: i64,
    pub step_seconds: u32,
}

impl TrafficSeries {
    pub fn new(values: Tensor<f32>, start_epoch: i64, step_seconds: u32) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Data(format!(
                "traffic series must be (T, N, C), got {:?}",
                values.shape()
            )));
        }
        steps_per_day(step_seconds)?;
        Ok(Self {
            values,
            start_epoch,
            step_seconds,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Loads either format, picking the binary reader when the magic matches.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_binary(&bytes)
        } else {
            Self::from_csv(BufReader::new(bytes.as_slice()), 0, 300)
        }
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 3 * 4 + 8 + 4;
        if bytes.len() < header || !bytes.starts_with(MAGIC) {
            return Err(Error::Format("missing TRAF1 header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let mut o = MAGIC.len();
        let t = u32_at(o) as usize;
        let n = u32_at(o + 4) as usize;
        let c = u32_at(o + 8) as usize;
        o += 12;
        let start_epoch = i64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let step_seconds = u32_at(o + 8);
        o += 12;
        let count = t * n * c;
        if bytes.len() != o + 4 * count {
            return Err(Error::Format(format!(
                "TRAF1 body holds {} bytes, expected {} for ({t}, {n}, {c})",
                bytes.len() - o,
                4 * count
            )));
        }
        let data = bytes[o..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(Tensor::new(vec![t, n, c], data)?, start_epoch, step_seconds)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAGIC.len() + 24 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        for d in self.values.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.start_epoch.to_le_bytes());
        out.extend_from_slice(&self.step_seconds.to_le_bytes());
        for v in self.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_binary())?;
        Ok(())
    }

    /// Reads `t,n,c,value` rows; every `(t, n, c)` cell must appear once.
    pub fn from_csv<R: BufRead>(reader: R, start_epoch: i64, step_seconds: u32) -> Result<Self> {
        let mut cells = Vec::new();
        let (mut t_max, mut n_max, mut c_max) = (0usize, 0usize, 0usize);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with(|ch: char| ch.is_alphabetic())) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("line {}: expected t,n,c,value", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            let t: usize = fields[0].parse().map_err(|_| bad())?;
            let n: usize = fields[1].parse().map_err(|_| bad())?;
            let c: usize = fields[2].parse().map_err(|_| bad())?;
            let v: f32 = fields[3].parse().map_err(|_| bad())?;
            t_max = t_max.max(t);
            n_max = n_max.max(n);
            c_max = c_max.max(c);
            cells.push((t, n, c, v));
        }
        if cells.is_empty() {
            return Err(Error::Data("empty traffic CSV".into()));
        }
        let shape = [t_max + 1, n_max + 1, c_max + 1];
        let mut data = vec![f32::NAN; shape.iter().product()];
        let mut seen = vec![false; data.len()];
        for (t, n, c, v) in cells {
            let i = (t * shape[1] + n) * shape[2] + c;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("duplicate reading for t={t}, n={n}, c={c}")));
            }
            data[i] = v;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let (t, rest) = (i / (shape[1] * shape[2]), i % (shape[1] * shape[2]));
            return Err(Error::Data(format!(
                "missing reading for t={t}, n={}, c={}",
                rest / shape[2],
                rest % shape[2]
            )));
        }
        Self::new(Tensor::new(shape.to_vec(), data)?, start_epoch, step_seconds)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,n,c,value")?;
        let (n, c) = (self.nodes(), self.channels());
        for (i, v) in self.values.data().iter().enumerate() {
            writeln!(out, "{},{},{},{}", i / (n * c), (i / c) % n, i % c, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrafficSeries {
        let values = Tensor::from_fn(&[5, 3, 2], |i| i as f32 * 1.5 - 4.0);
        TrafficSeries::new(values, 1_700_000_100, 300).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let s = sample();
        let bytes = s.to_binary();
        assert!(bytes.starts_with(b"TRAF1\n"));
        assert_eq!(bytes.len(), 6 + 24 + 4 * 30);
        assert_eq!(TrafficSeries::from_binary(&bytes).unwrap(), s);
        assert!(TrafficSeries::from_binary(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn csv_round_trip_and_gaps() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = TrafficSeries::from_csv(buf.as_slice(), s.start_epoch, 300).unwrap();
        assert_eq!(back, s);

        let text = "t,n,c,value\n0,0,0,1\n1,0,0,2\n1,1,0,3\n";
        let err = TrafficSeries::from_csv(text.as_bytes(), 0, 300).unwrap_err();
        assert!(err.to_string().contains("missing reading for t=0, n=1"));
    }

    #[test]
    fn step_must_divide_a_day() {
        let values = Tensor::zeros(&[2, 1, 1]);
        assert!(TrafficSeries::new(values, 0, 7).is_err());
    }
}
