use chrono::{Duration, NaiveDateTime, Timelike};

use crate::dataset::FrameMeta;
use crate::error::{Error, Result};

/// Largest minutes-to-noon reachable inside the 07:00-16:59 daylight window.
pub const M2N_MAX: f64 = 300.0;

/// Parses `yyyymmddHHMM`, or `yyyymmddHH` with minutes defaulting to 00.
pub fn parse_time(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    let padded;
    let full = match s.len() {
        12 => s,
        10 => {
            padded = format!("{s}00");
            &padded
        }
        _ => {
            return Err(Error::InvalidInput(format!(
                "time {s:?} is not yyyymmddHH[MM]"
            )))
        }
    };
    NaiveDateTime::parse_from_str(full, "%Y%m%d%H%M")
        .map_err(|e| Error::InvalidInput(format!("time {s:?}: {e}")))
}

pub fn format_time(t: &NaiveDateTime) -> String {
    t.format("%Y%m%d%H%M").to_string()
}

/// Local solar time: UTC shifted by `lon / 15` hours, rounded to the minute.
pub fn local_time(meta: &FrameMeta) -> NaiveDateTime {
    let offset_minutes = (meta.lon * 4.0).round() as i64;
    meta.utc_time + Duration::minutes(offset_minutes)
}

/// Minutes to local noon, `|60 * hour + minute - 720|`.
pub fn compute_m2n(local: &NaiveDateTime) -> f64 {
    (60.0 * local.hour() as f64 + local.minute() as f64 - 720.0).abs()
}
