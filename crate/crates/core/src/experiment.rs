//! The scaled synthetic experiment: train the hybrid model and an IR1+WV
//! regressor with the same regressor budget, then measure what the
//! generators learned against the generator's known structure.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::synthetic::{generate_synthetic, SyntheticConfig};
use crate::dataset::{split_by_year, Dataset, Grid};
use crate::error::{Error, Result};
use crate::imaging::{disc_radius, rotate};
use crate::inference::{Estimator, FrameInput};
use crate::qc::ChannelStats;
use crate::tensor::Scalar;
use crate::training::{
    five_stage_schedule, train_regressor_baseline, ChannelSet, EpochRow, ModelSpecs, NullObserver, Observer,
    TrainConfig, Trainer,
};

/// Requested m2n values for the brightness sweep.
pub const M2N_SWEEP: [f64; 4] = [0.0, 100.0, 200.0, 300.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_frames: usize,
    pub image_size: usize,
    pub synthetic_seed: u64,
    pub epochs: [usize; 5],
    pub train: TrainConfig,
    /// Also train an IR1+PMW regressor on real PMW.
    pub ir1_pmw_baseline: bool,
    /// Directory receiving one epoch log per run.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_frames: 2000,
            image_size: 64,
            synthetic_seed: 0,
            epochs: [10, 30, 10, 30, 20],
            train: TrainConfig {
                width_divisor: 2,
                ..TrainConfig::default()
            },
            ir1_pmw_baseline: false,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_good_vis: usize,
    /// Generated PMW against real PMW, scaled units, disc pixels of the
    /// validation frames.
    pub pmw_mse_generated: f64,
    /// `relu(wv - ir1)` against real PMW on the same pixels.
    pub pmw_mse_baseline: f64,
    /// Mean generated VIS over disc pixels for each value of [`M2N_SWEEP`].
    pub vis_brightness: Vec<f64>,
    pub vis_spearman: f64,
    pub hybrid_val_mse: f64,
    pub direct_val_mse: f64,
    pub ir1_pmw_val_mse: Option<f64>,
    pub seconds: f64,
    pub hybrid_log: Vec<EpochRow>,
    pub direct_log: Vec<EpochRow>,
    pub ir1_pmw_log: Vec<EpochRow>,
}

impl ExperimentReport {
    pub fn pmw_beats_baseline(&self) -> bool {
        self.pmw_mse_generated < self.pmw_mse_baseline
    }

    pub fn vis_follows_m2n(&self) -> bool {
        self.vis_brightness.windows(2).all(|w| w[1] < w[0]) && self.vis_spearman <= -0.8
    }

    pub fn hybrid_within(&self, factor: f64) -> bool {
        self.hybrid_val_mse <= factor * self.direct_val_mse
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // ties share the mean of their positions
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidInput("spearman of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn in_disc(n: usize) -> impl Fn(usize, usize) -> bool {
    let (c, r) = (n as f64 / 2.0, disc_radius(n));
    move |i, j| {
        let (y, x) = (i as f64 + 0.5 - c, j as f64 + 0.5 - c);
        (x * x + y * y).sqrt() <= r
    }
}

fn disc_mse(a: &Grid, b: &Grid) -> (f64, usize) {
    let inside = in_disc(a.nrows());
    let mut s = 0.0;
    let mut n = 0;
    for ((i, j), &v) in a.indexed_iter() {
        if inside(i, j) {
            s += (v as f64 - b[[i, j]] as f64).powi(2);
            n += 1;
        }
    }
    (s, n)
}

fn disc_mean(a: &Grid) -> (f64, usize) {
    let inside = in_disc(a.nrows());
    let mut s = 0.0;
    let mut n = 0;
    for ((i, j), &v) in a.indexed_iter() {
        if inside(i, j) {
            s += v as f64;
            n += 1;
        }
    }
    (s, n)
}

/// Pixel MSE of generated PMW and of `relu(wv - ir1)` against real PMW,
/// both in the scaled units PMW is trained in.
pub fn pmw_errors<T: Scalar>(est: &mut Estimator<T>, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("no frames to score".into()));
    }
    let stats: ChannelStats = est.bundle.stats.clone();
    let inv = (1.0 / stats.pmw.std) as f32;
    let generated = est.generate(&FrameInput::from_dataset(ds), 0.0)?;
    let (mut sg, mut sb, mut n) = (0.0, 0.0, 0);
    for (f, g) in ds.frames().iter().zip(&generated) {
        let truth = rotate(&f.pmw.mapv(|v| (v - stats.pmw.mean as f32) * inv), 0.0);
        let base = rotate(&(&f.wv - &f.ir1).mapv(|v| (v.max(0.0) - stats.pmw.mean as f32) * inv), 0.0);
        let (a, k) = disc_mse(&g.pmw, &truth);
        let (b, _) = disc_mse(&base, &truth);
        sg += a;
        sb += b;
        n += k;
    }
    Ok((sg / n as f64, sb / n as f64))
}

/// Mean generated VIS over the disc for each requested m2n.
pub fn vis_brightness<T: Scalar>(est: &mut Estimator<T>, ds: &Dataset, m2n: &[f64]) -> Result<Vec<f64>> {
    let frames = FrameInput::from_dataset(ds);
    m2n.iter()
        .map(|&m| {
            let g = est.generate(&frames, m)?;
            let (s, n) = g.iter().map(|x| disc_mean(&x.vis)).fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            if n == 0 {
                return Err(Error::InvalidInput("no frames to score".into()));
            }
            Ok(s / n as f64)
        })
        .collect()
}

fn final_val(rows: &[EpochRow]) -> Result<f64> {
    rows.last()
        .and_then(|r| r.val_mse)
        .ok_or_else(|| Error::Training("run produced no validation MSE".into()))
}

/// Runs the hybrid five-stage model and the equally budgeted baselines.
pub fn run_experiment(cfg: &ExperimentConfig, obs: &mut dyn Observer<f32>) -> Result<ExperimentReport> {
    let t0 = Instant::now();
    let syn = generate_synthetic(&SyntheticConfig {
        n_frames: cfg.n_frames,
        image_size: cfg.image_size,
        rng_seed: cfg.synthetic_seed,
        ..SyntheticConfig::default()
    })?;
    let split = split_by_year(&syn.dataset);
    let specs = ModelSpecs::full(cfg.train.width_divisor);
    let log_cfg = |name: &str| {
        let mut c = cfg.train.clone();
        c.log_dir = cfg.out_dir.as_ref().map(|d| d.join(name));
        c.checkpoint_dir = None;
        c
    };

    let mut hybrid = Trainer::<f32>::new(
        log_cfg("ir1_wv_gan"),
        five_stage_schedule(cfg.epochs),
        &specs,
        &split.train,
        &split.valid,
    )?;
    let n_good = hybrid.train_set().indices(crate::training::DataFilter::GoodVisOnly).len();
    let hybrid_log = hybrid.run(obs)?.history;

    let regr_epochs = cfg.epochs[0] + cfg.epochs[2] + cfg.epochs[4];
    let direct = train_regressor_baseline::<f32>(
        log_cfg("ir1_wv"),
        &specs,
        ChannelSet::IR1_WV,
        regr_epochs,
        &split.train,
        &split.valid,
        &mut NullObserver,
    )?;
    let direct_log = direct.state.history.clone();

    let ir1_pmw_log = if cfg.ir1_pmw_baseline {
        let t = train_regressor_baseline::<f32>(
            log_cfg("ir1_pmw"),
            &specs,
            ChannelSet::IR1_PMW,
            regr_epochs,
            &split.train,
            &split.valid,
            &mut NullObserver,
        )?;
        t.state.history.clone()
    } else {
        Vec::new()
    };

    let hybrid_val_mse = final_val(&hybrid_log)?;
    let mut est = Estimator::new(hybrid.into_bundle());
    let (pmw_mse_generated, pmw_mse_baseline) = pmw_errors(&mut est, &split.valid)?;
    let vis_brightness = vis_brightness(&mut est, &split.valid, &M2N_SWEEP)?;
    let vis_spearman = spearman(&M2N_SWEEP, &vis_brightness)?;

    Ok(ExperimentReport {
        n_train: split.train.len(),
        n_valid: split.valid.len(),
        n_good_vis: n_good,
        pmw_mse_generated,
        pmw_mse_baseline,
        vis_brightness,
        vis_spearman,
        hybrid_val_mse,
        direct_val_mse: final_val(&direct_log)?,
        ir1_pmw_val_mse: if ir1_pmw_log.is_empty() { None } else { Some(final_val(&ir1_pmw_log)?) },
        seconds: t0.elapsed().as_secs_f64(),
        hybrid_log,
        direct_log,
        ir1_pmw_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_values() {
        let x = [0.0, 100.0, 200.0, 300.0];
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&x, &[0.1, 0.5, 0.9, 7.0]).unwrap(), 1.0);
        // one swap in four: 1 - 6*2/(4*15)
        assert!((spearman(&x, &[4.0, 2.0, 3.0, 1.0]).unwrap() - 0.8 * -1.0).abs() < 1e-12);
        assert!(spearman(&x, &[1.0; 4]).is_err());
        assert!(spearman(&x[..1], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), [3.5, 1.0, 3.5, 2.0]);
    }
}
