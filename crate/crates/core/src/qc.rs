//! VIS quality control and channel normalization.

use std::io::Write;
use std::path::Path;

use chrono::Timelike;
use serde::{Deserialize, Serialize};

use crate::dataset::time::format_time;
use crate::dataset::{Channel, Dataset, TCFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Good,
    BadMean,
    BadStd,
    BadHour,
    Missing,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Good => "good",
            Verdict::BadMean => "bad_mean",
            Verdict::BadStd => "bad_std",
            Verdict::BadHour => "bad_hour",
            Verdict::Missing => "missing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QCStats {
    pub mean: f64,
    pub std: f64,
    pub local_hour: u32,
    pub verdict: Verdict,
}

/// Closed intervals a usable VIS frame must fall in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcThresholds {
    pub mean: (f64, f64),
    pub std: (f64, f64),
    /// Inclusive local-hour window.
    pub hours: (u32, u32),
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            mean: (0.1, 0.7),
            std: (0.1, 0.31),
            hours: (7, 16),
        }
    }
}

pub fn vis_qc(frame: &TCFrame) -> QCStats {
    vis_qc_with(frame, &QcThresholds::default())
}

/// Verdict priority: missing, then mean, std, hour.
pub fn vis_qc_with(frame: &TCFrame, thr: &QcThresholds) -> QCStats {
    let n = frame.vis.len().max(1) as f64;
    let mean = frame.vis.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = frame
        .vis
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let local_hour = frame.local_time().hour();
    let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
    let verdict = if !frame.vis_present {
        Verdict::Missing
    } else if !within(mean, thr.mean) {
        Verdict::BadMean
    } else if !within(std, thr.std) {
        Verdict::BadStd
    } else if local_hour < thr.hours.0 || local_hour > thr.hours.1 {
        Verdict::BadHour
    } else {
        Verdict::Good
    };
    QCStats {
        mean,
        std,
        local_hour,
        verdict,
    }
}

pub fn filter_good_vis(ds: &Dataset) -> Dataset {
    filter_good_vis_with(ds, &QcThresholds::default())
}

pub fn filter_good_vis_with(ds: &Dataset, thr: &QcThresholds) -> Dataset {
    ds.filter(|f| vis_qc_with(f, thr).verdict == Verdict::Good)
}

pub const QC_REPORT_VERSION: &str = "# tcgan qc-report v1";

/// CSV `tc_id,time,mean,std,local_hour,verdict`, one row per frame.
pub fn write_qc_report(path: &Path, ds: &Dataset, thr: &QcThresholds) -> Result<Vec<QCStats>> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{QC_REPORT_VERSION}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["tc_id", "time", "mean", "std", "local_hour", "verdict"])?;
    let mut out = Vec::with_capacity(ds.len());
    for f in ds.frames() {
        let s = vis_qc_with(f, thr);
        w.write_record([
            f.meta.tc_id.clone(),
            format_time(&f.meta.utc_time),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.std),
            s.local_hour.to_string(),
            s.verdict.as_str().to_string(),
        ])?;
        out.push(s);
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(out)
}

/// Affine scaling `(x - mean) / std` for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub std: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        mean: 0.0,
        std: 1.0,
    };
}

/// Dataset-level channel scaling. IR1/WV are z-scored; VIS stays in
/// reflectance units; PMW is only divided by its scale so it stays
/// nonnegative, matching the generators' final relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub ir1: Affine,
    pub wv: Affine,
    pub vis: Affine,
    pub pmw: Affine,
}

impl ChannelStats {
    pub fn identity() -> Self {
        ChannelStats {
            ir1: Affine::IDENTITY,
            wv: Affine::IDENTITY,
            vis: Affine::IDENTITY,
            pmw: Affine::IDENTITY,
        }
    }

    pub fn get(&self, c: Channel) -> Affine {
        match c {
            Channel::Ir1 => self.ir1,
            Channel::Wv => self.wv,
            Channel::Vis => self.vis,
            Channel::Pmw => self.pmw,
        }
    }

    pub fn fit(ds: &Dataset) -> Result<Self> {
        let moments = |c: Channel, center: bool| -> Result<Affine> {
            let mut n = 0f64;
            let mut s = 0f64;
            let mut s2 = 0f64;
            for f in ds.frames() {
                if (c == Channel::Pmw && !f.pmw_present) || (c == Channel::Vis && !f.vis_present) {
                    continue;
                }
                for &v in f.channel(c) {
                    n += 1.0;
                    s += v as f64;
                    s2 += (v as f64).powi(2);
                }
            }
            if n == 0.0 {
                return Ok(Affine::IDENTITY);
            }
            let mean = s / n;
            let std = if center {
                (s2 / n - mean * mean).max(0.0).sqrt()
            } else {
                (s2 / n).sqrt()
            };
            if !(std.is_finite() && std > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "channel {c:?} has zero spread; cannot fit normalization"
                )));
            }
            Ok(Affine {
                mean: if center { mean } else { 0.0 },
                std,
            })
        };
        Ok(ChannelStats {
            ir1: moments(Channel::Ir1, true)?,
            wv: moments(Channel::Wv, true)?,
            vis: Affine::IDENTITY,
            pmw: moments(Channel::Pmw, false)?,
        })
    }

    fn validate(&self) -> Result<()> {
        for c in Channel::ALL {
            let a = self.get(c);
            if !(a.mean.is_finite() && a.std.is_finite()) || a.std <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "normalization for {c:?} needs finite stats with std > 0, got {a:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Applies the channel scaling; VIS is clipped to `[0, 1]` afterwards.
pub fn normalize_frame(frame: &TCFrame, stats: &ChannelStats) -> Result<TCFrame> {
    stats.validate()?;
    let mut out = frame.clone();
    for c in Channel::ALL {
        let a = stats.get(c);
        let (m, inv) = (a.mean as f32, (1.0 / a.std) as f32);
        out.channel_mut(c).mapv_inplace(|v| (v - m) * inv);
    }
    out.vis.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

pub fn denormalize_frame(frame: &TCFrame, stats: &ChannelStats) -> Result<TCFrame> {
    stats.validate()?;
    let mut out = frame.clone();
    for c in Channel::ALL {
        let a = stats.get(c);
        let (m, s) = (a.mean as f32, a.std as f32);
        out.channel_mut(c).mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}

pub fn normalize_dataset(ds: &Dataset, stats: &ChannelStats) -> Result<Dataset> {
    let frames = ds
        .frames()
        .iter()
        .map(|f| normalize_frame(f, stats))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(frames, ds.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_util::frame;
    use crate::dataset::Grid;
    use ndarray::Array2;

    /// VIS field with exactly the requested mean and population std.
    fn vis_with(mean: f32, std: f32, n: usize) -> Grid {
        Array2::from_shape_fn((n, n), |(i, j)| {
            if (i + j) % 2 == 0 {
                mean + std
            } else {
                mean - std
            }
        })
    }

    fn at_hour(h: u32, mean: f32, std: f32) -> TCFrame {
        let mut f = frame("Q", 2010, 6, 1, h, 8);
        f.vis = vis_with(mean, std, 8);
        f
    }

    #[test]
    fn examples() {
        let mut f = at_hour(12, 0.0, 0.0);
        f.vis.fill(0.0);
        assert_eq!(vis_qc(&f).verdict, Verdict::BadMean);
        let s = vis_qc(&at_hour(12, 0.4, 0.2));
        assert_eq!(s.verdict, Verdict::Good);
        assert!((s.mean - 0.4).abs() < 1e-6 && (s.std - 0.2).abs() < 1e-6);
        assert_eq!(vis_qc(&at_hour(3, 0.4, 0.2)).verdict, Verdict::BadHour);
        let mut f = at_hour(12, 0.4, 0.2);
        f.vis_present = false;
        assert_eq!(vis_qc(&f).verdict, Verdict::Missing);
    }

    #[test]
    fn flipping_one_predicate_flips_verdict() {
        assert_eq!(vis_qc(&at_hour(12, 0.75, 0.2)).verdict, Verdict::BadMean);
        assert_eq!(vis_qc(&at_hour(12, 0.05, 0.04)).verdict, Verdict::BadMean);
        assert_eq!(vis_qc(&at_hour(12, 0.4, 0.35)).verdict, Verdict::BadStd);
        assert_eq!(vis_qc(&at_hour(12, 0.4, 0.05)).verdict, Verdict::BadStd);
        assert_eq!(vis_qc(&at_hour(17, 0.4, 0.2)).verdict, Verdict::BadHour);
        assert_eq!(vis_qc(&at_hour(6, 0.4, 0.2)).verdict, Verdict::BadHour);
        assert_eq!(vis_qc(&at_hour(7, 0.4, 0.2)).verdict, Verdict::Good);
        assert_eq!(vis_qc(&at_hour(16, 0.4, 0.2)).verdict, Verdict::Good);
        // several failures: mean reported first, then std
        assert_eq!(vis_qc(&at_hour(3, 0.8, 0.4)).verdict, Verdict::BadMean);
        assert_eq!(vis_qc(&at_hour(3, 0.4, 0.4)).verdict, Verdict::BadStd);
    }

    #[test]
    fn filter_keeps_order_and_m2n_bound() {
        let frames = vec![
            at_hour(8, 0.4, 0.2),
            at_hour(2, 0.4, 0.2),
            at_hour(12, 0.4, 0.2),
            at_hour(16, 0.4, 0.2),
        ];
        let frames: Vec<_> = frames
            .into_iter()
            .enumerate()
            .map(|(i, mut f)| {
                f.meta.tc_id = format!("S{i}");
                f
            })
            .collect();
        let ds = Dataset::new(frames, crate::dataset::SplitTag::Train).unwrap();
        let good = filter_good_vis(&ds);
        let ids: Vec<_> = good.frames().iter().map(|f| f.meta.tc_id.as_str()).collect();
        assert_eq!(ids, ["S0", "S2", "S3"]);
        assert!(good.frames().iter().all(|f| f.m2n() <= 300.0));

        let none = ds.map_frames(|f| {
            let mut f = f.clone();
            f.vis_present = false;
            f
        });
        assert!(filter_good_vis(&none).is_empty());
    }

    #[test]
    fn normalization_cases() {
        let f = at_hour(12, 0.4, 0.2);
        assert_eq!(normalize_frame(&f, &ChannelStats::identity()).unwrap(), f);

        let mut c = f.clone();
        c.ir1.fill(3.5);
        let mut stats = ChannelStats::identity();
        stats.ir1 = Affine { mean: 3.5, std: 1.0 };
        let n = normalize_frame(&c, &stats).unwrap();
        assert!(n.ir1.iter().all(|&v| v == 0.0));

        stats.wv = Affine { mean: 0.0, std: 0.0 };
        assert!(normalize_frame(&c, &stats).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let mut f = at_hour(12, 0.4, 0.2);
        f.ir1 = Array2::from_shape_fn((8, 8), |(i, j)| 200.0 + (i * 8 + j) as f32);
        f.pmw = Array2::from_shape_fn((8, 8), |(i, j)| (i * j) as f32 * 0.3);
        let stats = ChannelStats {
            ir1: Affine { mean: 230.0, std: 25.0 },
            wv: Affine { mean: 0.1, std: 2.0 },
            vis: Affine::IDENTITY,
            pmw: Affine { mean: 0.0, std: 4.0 },
        };
        let back = denormalize_frame(&normalize_frame(&f, &stats).unwrap(), &stats).unwrap();
        for c in Channel::ALL {
            for (a, b) in back.channel(c).iter().zip(f.channel(c).iter()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{c:?} {a} {b}");
            }
        }
    }
}
