use std::f64::consts::TAU;

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::dataset::{local_time, FrameMeta};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const AUX_LEN: usize = 10;

const DAYS_PER_YEAR: f64 = 365.25;

/// `[sin doy, cos doy, sin hour, cos hour, one-hot region x6]`, with the
/// region order WPAC, EPAC, CPAC, ATLN, IO, SH. Day and hour are taken in
/// local solar time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxFeatures(pub [f64; AUX_LEN]);

impl AuxFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn region_one_hot(&self) -> &[f64] {
        &self.0[4..]
    }
}

pub fn build_aux(meta: &FrameMeta) -> AuxFeatures {
    let local = local_time(meta);
    let day = (local.ordinal0() as f64 + local.num_seconds_from_midnight() as f64 / 86_400.0) / DAYS_PER_YEAR;
    let hour = local.num_seconds_from_midnight() as f64 / 86_400.0;
    let mut v = [0.0; AUX_LEN];
    (v[0], v[1]) = (TAU * day).sin_cos();
    (v[2], v[3]) = (TAU * hour).sin_cos();
    v[4 + meta.region.index()] = 1.0;
    AuxFeatures(v)
}

/// `[N, 10]` feature batch.
pub fn aux_batch<'a, T: Scalar>(metas: impl IntoIterator<Item = &'a FrameMeta>) -> Result<Tensor<T>> {
    let data: Vec<T> = metas
        .into_iter()
        .flat_map(|m| build_aux(m).0.map(T::of))
        .collect();
    Tensor::from_vec(&[data.len() / AUX_LEN, AUX_LEN], data)
}
