use std::ops::Range;

use crate::error::{Error, Result};

/// Train/validation/test fractions of the raw series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        if [train, val, test].iter().any(|v| !(*v >= 0.0)) || (train + val + test - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split ratios must be non-negative and sum to 1, got {train}:{val}:{test}"
            )));
        }
        Ok(r)
    }

    /// Raw segment lengths `(train, val, test)`; the test segment takes the remainder.
    pub fn segment_lengths(&self, total: usize) -> (usize, usize, usize) {
        let train = ((total as f64) * self.train + 1e-9).floor() as usize;
        let val = ((total as f64) * self.val + 1e-9).floor() as usize;
        let train = train.min(total);
        let val = val.min(total - train);
        (train, val, total - train - val)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Window start indices into the raw series, per split.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSplits {
    pub t_in: usize,
    pub t_out: usize,
    pub segments: [Range<usize>; 3],
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl WindowSplits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn segment(&self, split: Split) -> Range<usize> {
        self.segments[split as usize].clone()
    }

    /// The split's windows, or an error naming it when it has none.
    pub fn require(&self, split: Split) -> Result<&[usize]> {
        let w = self.get(split);
        if w.is_empty() {
            return Err(too_short(split, self.segment(split).len(), self.t_in + self.t_out));
        }
        Ok(w)
    }
}

fn too_short(split: Split, len: usize, span: usize) -> Error {
    Error::Data(format!(
        "{} split has {len} steps, fewer than the {span} one window needs",
        split.name()
    ))
}

/// Stride-1 windows that never cross a split boundary.
///
/// A train segment that cannot hold `t_in + t_out` steps is an error.
/// Shorter validation or test segments yield no windows; see
/// [`WindowSplits::require`].
pub fn make_windows(total: usize, t_in: usize, t_out: usize, ratios: SplitRatios) -> Result<WindowSplits> {
    if t_in == 0 || t_out == 0 {
        return Err(Error::Config("input and output horizons must be positive".into()));
    }
    let span = t_in + t_out;
    let (a, b, _) = ratios.segment_lengths(total);
    let segments = [0..a, a..a + b, a + b..total];
    let mut lists: [Vec<usize>; 3] = Default::default();
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let seg = &segments[k];
        if seg.len() < span {
            if split == Split::Train {
                return Err(too_short(split, seg.len(), span));
            }
            continue;
        }
        lists[k] = (seg.start..=seg.end - span).collect();
    }
    let [train, val, test] = lists;
    Ok(WindowSplits {
        t_in,
        t_out,
        segments,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_steps() {
        let w = make_windows(100, 12, 12, SplitRatios::default()).unwrap();
        assert_eq!(w.segments, [0..60, 60..80, 80..100]);
        assert_eq!(w.train.len(), 37);
        assert!(w.val.is_empty() && w.test.is_empty());
        let err = w.require(Split::Val).unwrap_err();
        assert!(err.to_string().contains("val split has 20 steps"), "{err}");
        assert_eq!(
            make_windows(150, 12, 12, SplitRatios::default()).unwrap().val,
            vec![90, 91, 92, 93, 94, 95, 96]
        );
    }

    #[test]
    fn minimal_length() {
        let r = SplitRatios::new(1.0, 0.0, 0.0).unwrap();
        let w = make_windows(24, 12, 12, r).unwrap();
        assert_eq!(w.train, vec![0]);
        assert!(w.val.is_empty() && w.test.is_empty());
    }

    #[test]
    fn short_split_is_named() {
        let err = make_windows(30, 12, 12, SplitRatios::default()).unwrap_err();
        assert!(err.to_string().contains("train split"), "{err}");
        assert!(SplitRatios::new(0.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn pems08_split_sizes() {
        let (a, b, c) = SplitRatios::default().segment_lengths(17856);
        assert_eq!((a, b, c), (10713, 3571, 3572));
    }

    proptest! {
        #[test]
        fn windows_stay_inside_their_segment(total in 120usize..400, t_in in 1usize..13, t_out in 1usize..13) {
            let w = make_windows(total, t_in, t_out, SplitRatios::default()).unwrap();
            let mut covered = vec![None; total];
            for split in Split::ALL {
                let seg = w.segment(split);
                for &s in w.get(split) {
                    prop_assert!(s >= seg.start && s + t_in + t_out <= seg.end);
                    for t in s + t_in..s + t_in + t_out {
                        prop_assert!(covered[t].is_none() || covered[t] == Some(split));
                        covered[t] = Some(split);
                    }
                }
                prop_assert_eq!(w.get(split).len(), seg.len() + 1 - t_in - t_out);
            }
        }
    }
}
