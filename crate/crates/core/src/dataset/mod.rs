//! Satellite frames, TCIR-format I/O, synthetic oracle data and year splits.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod synthetic;
pub mod tcir;
pub mod time;

pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticDataset};
pub use tcir::{load_tcir, write_tcir, LoadOptions};
pub use time::{compute_m2n, local_time, M2N_MAX};

pub type Grid = Array2<f32>;

/// Ocean basin, in the fixed one-hot order used by the regressor features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "WPAC")]
    Wpac,
    #[serde(rename = "EPAC")]
    Epac,
    #[serde(rename = "CPAC")]
    Cpac,
    #[serde(rename = "ATLN")]
    Atln,
    #[serde(rename = "IO")]
    Io,
    #[serde(rename = "SH")]
    Sh,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Wpac,
        Region::Epac,
        Region::Cpac,
        Region::Atln,
        Region::Io,
        Region::Sh,
    ];

    pub fn index(self) -> usize {
        Region::ALL.iter().position(|&r| r == self).expect("listed")
    }

    pub fn code(self) -> &'static str {
        match self {
            Region::Wpac => "WPAC",
            Region::Epac => "EPAC",
            Region::Cpac => "CPAC",
            Region::Atln => "ATLN",
            Region::Io => "IO",
            Region::Sh => "SH",
        }
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownRegion(s.to_string()))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Satellite channel, in container order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Ir1,
    Wv,
    Vis,
    Pmw,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Ir1, Channel::Wv, Channel::Vis, Channel::Pmw];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub tc_id: String,
    pub utc_time: NaiveDateTime,
    pub lon: f64,
    pub lat: f64,
    pub region: Region,
    /// Maximum sustained wind, knots.
    pub vmax: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TCFrame {
    pub meta: FrameMeta,
    pub ir1: Grid,
    pub wv: Grid,
    pub vis: Grid,
    pub pmw: Grid,
    pub vis_present: bool,
    pub pmw_present: bool,
}

impl TCFrame {
    pub fn channel(&self, c: Channel) -> &Grid {
        match c {
            Channel::Ir1 => &self.ir1,
            Channel::Wv => &self.wv,
            Channel::Vis => &self.vis,
            Channel::Pmw => &self.pmw,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut Grid {
        match c {
            Channel::Ir1 => &mut self.ir1,
            Channel::Wv => &mut self.wv,
            Channel::Vis => &mut self.vis,
            Channel::Pmw => &mut self.pmw,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        self.ir1.dim()
    }

    pub fn local_time(&self) -> NaiveDateTime {
        time::local_time(&self.meta)
    }

    pub fn m2n(&self) -> f64 {
        time::compute_m2n(&self.local_time())
    }

    fn check(&self) -> Result<()> {
        let d = self.ir1.dim();
        for c in Channel::ALL {
            if self.channel(c).dim() != d {
                return Err(Error::Shape(format!(
                    "frame {} {}: channel {c:?} is {:?}, IR1 is {d:?}",
                    self.meta.tc_id,
                    time::format_time(&self.meta.utc_time),
                    self.channel(c).dim()
                )));
            }
        }
        if !(self.meta.vmax.is_finite() && self.meta.vmax > 0.0) {
            return Err(Error::InvalidInput(format!(
                "frame {}: vmax {} must be finite and positive",
                self.meta.tc_id, self.meta.vmax
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    frames: Vec<TCFrame>,
    pub split: SplitTag,
}

impl Dataset {
    /// Validates shapes, labels and per-storm time ordering.
    pub fn new(frames: Vec<TCFrame>, split: SplitTag) -> Result<Self> {
        let mut last: HashMap<&str, NaiveDateTime> = HashMap::new();
        for f in &frames {
            f.check()?;
            if let Some(prev) = last.insert(&f.meta.tc_id, f.meta.utc_time) {
                if f.meta.utc_time < prev {
                    return Err(Error::InvalidInput(format!(
                        "storm {} is not sorted by time",
                        f.meta.tc_id
                    )));
                }
            }
        }
        if let Some(first) = frames.first() {
            let d = first.size();
            if let Some(bad) = frames.iter().find(|f| f.size() != d) {
                return Err(Error::Shape(format!(
                    "frame {} is {:?}, dataset is {d:?}",
                    bad.meta.tc_id,
                    bad.size()
                )));
            }
        }
        Ok(Dataset { frames, split })
    }

    pub fn empty(split: SplitTag) -> Self {
        Dataset {
            frames: Vec::new(),
            split,
        }
    }

    pub fn frames(&self) -> &[TCFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<TCFrame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(TCFrame::size)
    }

    /// Order-preserving subsequence; ordering invariants carry over.
    pub fn filter(&self, keep: impl Fn(&TCFrame) -> bool) -> Dataset {
        Dataset {
            frames: self.frames.iter().filter(|f| keep(f)).cloned().collect(),
            split: self.split,
        }
    }

    pub fn map_frames(&self, f: impl Fn(&TCFrame) -> TCFrame) -> Dataset {
        Dataset {
            frames: self.frames.iter().map(f).collect(),
            split: self.split,
        }
    }
}

pub const TRAIN_YEARS: std::ops::RangeInclusive<i32> = 2000..=2014;
pub const VALID_YEARS: std::ops::RangeInclusive<i32> = 2015..=2016;
pub const TEST_YEARS: std::ops::RangeInclusive<i32> = 2017..=2017;

#[derive(Debug, Clone)]
pub struct YearSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Frames outside 2000-2017.
    pub dropped: usize,
}

/// Train 2000-2014, validation 2015-2016, test 2017, by UTC year.
pub fn split_by_year(ds: &Dataset) -> YearSplit {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut dropped = 0;
    for f in ds.frames() {
        let y = f.meta.utc_time.year();
        if TRAIN_YEARS.contains(&y) {
            train.push(f.clone());
        } else if VALID_YEARS.contains(&y) {
            valid.push(f.clone());
        } else if TEST_YEARS.contains(&y) {
            test.push(f.clone());
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("split_by_year: dropped {dropped} frames outside 2000-2017");
    }
    YearSplit {
        train: Dataset {
            frames: train,
            split: SplitTag::Train,
        },
        valid: Dataset {
            frames: valid,
            split: SplitTag::Valid,
        },
        test: Dataset {
            frames: test,
            split: SplitTag::Test,
        },
        dropped,
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::frame;
    use super::*;

    #[test]
    fn region_codes_round_trip_in_order() {
        for (i, r) in Region::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(r.code().parse::<Region>().unwrap(), *r);
        }
        assert_eq!(Region::Wpac.index(), 0);
        assert!(matches!("NA".parse::<Region>(), Err(Error::UnknownRegion(_))));
    }

    #[test]
    fn split_examples() {
        let ds = Dataset::new(
            vec![
                frame("A", 1999, 5, 1, 0, 4),
                frame("B", 2003, 5, 1, 0, 4),
                frame("C", 2014, 12, 31, 23, 4),
                frame("D", 2015, 6, 1, 0, 4),
                frame("E", 2016, 1, 1, 0, 4),
                frame("F", 2017, 1, 1, 0, 4),
                frame("G", 2018, 1, 1, 0, 4),
            ],
            SplitTag::Unsplit,
        )
        .unwrap();
        let s = split_by_year(&ds);
        let ids = |d: &Dataset| d.frames().iter().map(|f| f.meta.tc_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&s.train), ["B", "C"]);
        assert_eq!(ids(&s.valid), ["D", "E"]);
        assert_eq!(ids(&s.test), ["F"]);
        assert_eq!(s.dropped, 2);
        assert_eq!(s.valid.split, SplitTag::Valid);

        let e = split_by_year(&Dataset::empty(SplitTag::Unsplit));
        assert!(e.train.is_empty() && e.valid.is_empty() && e.test.is_empty());
    }

    #[test]
    fn rejects_unsorted_storm_and_mixed_shapes() {
        let a = frame("A", 2005, 1, 2, 0, 4);
        let b = frame("A", 2005, 1, 1, 0, 4);
        assert!(Dataset::new(vec![a.clone(), b], SplitTag::Unsplit).is_err());
        let c = frame("B", 2005, 1, 1, 0, 8);
        assert!(matches!(
            Dataset::new(vec![a.clone(), c], SplitTag::Unsplit),
            Err(Error::Shape(_))
        ));
        let mut d = a;
        d.vis = Grid::zeros((3, 3));
        assert!(Dataset::new(vec![d], SplitTag::Unsplit).is_err());
    }

    #[test]
    fn split_partitions_frames_within_range() {
        use proptest::prelude::*;
        proptest!(|(years in proptest::collection::vec(1995i32..2022, 0..40))| {
            let frames: Vec<_> = years.iter().enumerate()
                .map(|(i, &y)| frame(&format!("S{i}"), y, 3, 1, 0, 2)).collect();
            let ds = Dataset::new(frames, SplitTag::Unsplit).unwrap();
            let s = split_by_year(&ds);
            let in_range = years.iter().filter(|&&y| (2000..=2017).contains(&y)).count();
            prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), in_range);
            prop_assert_eq!(s.dropped, years.len() - in_range);
            let mut seen = std::collections::HashSet::new();
            for d in [&s.train, &s.valid, &s.test] {
                for f in d.frames() {
                    prop_assert!(seen.insert(f.meta.tc_id.clone()));
                }
            }
        });
    }
}
