//! Desk-scale synthetic storms with known channel relationships.
//!
//! Each frame is an idealized vortex: a cold cloud shield with spiral banding,
//! a clear eye and a convective eyewall ring. The generated channels satisfy
//!
//! * `pmw = rotate(smooth(relu(wv - ir1)), pmw_rotation_offset)`
//! * `vis = clip(brightness(ir1) * sunlight(m2n) + noise, 0, 1)`
//! * `vmax = base + eye_coef / eye_radius + extent_coef * cloud_extent + core_coef * core_strength`
//!
//! and every per-frame latent is recorded in [`FrameTruth`].

use chrono::{Duration, NaiveDate};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::time::{compute_m2n, local_time};
use crate::dataset::{Dataset, FrameMeta, Grid, Region, SplitTag, TCFrame};
use crate::error::{Error, Result};
use crate::imaging;

/// Generators downsample six times by a factor of two.
pub const SIZE_DIVISOR: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Std of additive Gaussian VIS noise.
    pub gaussian: f64,
    /// Probability that a frame's VIS is blacked out over at least 92% of its rows.
    pub block: f64,
    /// Probability that a frame's VIS carries saturated horizontal strips.
    pub strip: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gaussian: 0.02,
            block: 0.1,
            strip: 0.05,
        }
    }
}

/// Daylight factor `cos(pi/2 * m2n / half_day)^exponent`, zero past `half_day`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SunlightModel {
    pub half_day_minutes: f64,
    pub exponent: f64,
}

impl Default for SunlightModel {
    fn default() -> Self {
        SunlightModel {
            half_day_minutes: 390.0,
            exponent: 0.3,
        }
    }
}

impl SunlightModel {
    pub fn factor(&self, m2n: f64) -> f64 {
        if m2n >= self.half_day_minutes {
            return 0.0;
        }
        (std::f64::consts::FRAC_PI_2 * m2n / self.half_day_minutes)
            .cos()
            .max(0.0)
            .powf(self.exponent)
    }
}

/// Closed-form intensity of a synthetic vortex. Radii are in pixels at the
/// 64-pixel reference scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmaxModel {
    pub base: f64,
    pub eye_coef: f64,
    pub extent_coef: f64,
    pub core_coef: f64,
}

impl Default for VmaxModel {
    fn default() -> Self {
        VmaxModel {
            base: -10.0,
            eye_coef: 200.0,
            extent_coef: 0.5,
            core_coef: 80.0,
        }
    }
}

impl VmaxModel {
    pub fn vmax(&self, eye_radius: f64, cloud_extent: f64, core_strength: f64) -> f64 {
        self.base
            + self.eye_coef / eye_radius
            + self.extent_coef * cloud_extent
            + self.core_coef * core_strength
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_frames: usize,
    pub image_size: usize,
    pub frames_per_storm: usize,
    /// Hours between consecutive frames of a storm.
    pub cadence_hours: i64,
    pub eye_radius: (f64, f64),
    pub cloud_extent: (f64, f64),
    pub asymmetry: (f64, f64),
    pub core_strength: (f64, f64),
    pub noise: NoiseConfig,
    /// Rotation of PMW relative to the other channels, degrees.
    pub pmw_rotation_offset: f64,
    /// Gaussian sigma of the PMW smoothing at the 64-pixel reference scale.
    pub pmw_smoothing: f64,
    pub sunlight: SunlightModel,
    pub vmax_model: VmaxModel,
    pub first_year: i32,
    pub last_year: i32,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_frames: 2000,
            image_size: 64,
            frames_per_storm: 24,
            cadence_hours: 3,
            eye_radius: (3.0, 12.0),
            cloud_extent: (18.0, 32.0),
            asymmetry: (0.0, 0.4),
            core_strength: (0.1, 1.0),
            noise: NoiseConfig::default(),
            pmw_rotation_offset: 12.0,
            pmw_smoothing: 3.0,
            sunlight: SunlightModel::default(),
            vmax_model: VmaxModel::default(),
            first_year: 2000,
            last_year: 2017,
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % SIZE_DIVISOR != 0 {
            return Err(Error::ImageSize {
                size: self.image_size,
                divisor: SIZE_DIVISOR,
            });
        }
        let ranges = [
            ("eye_radius", self.eye_radius),
            ("cloud_extent", self.cloud_extent),
            ("asymmetry", self.asymmetry),
            ("core_strength", self.core_strength),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.eye_radius.0 <= 0.0 {
            return Err(Error::Config("eye_radius must be positive".into()));
        }
        for (name, p) in [("block", self.noise.block), ("strip", self.noise.strip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("noise.{name} must be a probability")));
            }
        }
        if self.noise.gaussian < 0.0 || self.pmw_smoothing < 0.0 {
            return Err(Error::Config("noise and smoothing scales must be >= 0".into()));
        }
        if self.frames_per_storm == 0 || self.cadence_hours <= 0 {
            return Err(Error::Config("storms need at least one frame and a positive cadence".into()));
        }
        if self.first_year > self.last_year {
            return Err(Error::Config("first_year after last_year".into()));
        }
        Ok(())
    }
}

/// Latent parameters and injected corruptions of one synthetic frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub eye_radius: f64,
    pub cloud_extent: f64,
    pub asymmetry: f64,
    pub core_strength: f64,
    pub m2n: f64,
    /// Local hour inside the 07-16 daylight window.
    pub daytime: bool,
    pub block_noise: bool,
    pub strip_noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub truth: Vec<FrameTruth>,
    pub config: SyntheticConfig,
}

/// Sidecar document recording the closed forms next to a written dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub config: SyntheticConfig,
    pub relations: Vec<String>,
    pub truth: Vec<FrameTruth>,
}

impl SyntheticDataset {
    pub fn record(&self) -> SyntheticRecord {
        SyntheticRecord {
            config: self.config.clone(),
            relations: vec![
                "pmw = rotate(gaussian_smooth(relu(wv - ir1), pmw_smoothing * image_size / 64), pmw_rotation_offset)".into(),
                "vis = clip(cloud_brightness(ir1) * sunlight(m2n) + noise, 0, 1); cloud_brightness(x) = clip(0.1 + 1.2 * (1 - x), 0, 1)".into(),
                "vmax = base + eye_coef / eye_radius + extent_coef * cloud_extent + core_coef * core_strength".into(),
            ],
            truth: self.truth.clone(),
        }
    }
}

/// Monotone map from IR1 (cold cloud = low) to VIS reflectance at noon.
pub fn cloud_brightness(ir1: f32) -> f32 {
    (0.1 + 1.2 * (1.0 - ir1)).clamp(0.0, 1.0)
}

/// `smooth(relu(wv - ir1))`, the rotation-free PMW construction.
pub fn pmw_from_ir_wv(ir1: &Grid, wv: &Grid, sigma: f64) -> Grid {
    let diff = Array2::from_shape_fn(ir1.dim(), |ij| (wv[ij] - ir1[ij]).max(0.0));
    imaging::gaussian_smooth(&diff, sigma)
}

struct Vortex {
    eye_radius: f64,
    cloud_extent: f64,
    asymmetry: f64,
    core_strength: f64,
    spin: f64,
}

fn wrap_lon(lon: f64) -> f64 {
    if lon < -180.0 {
        lon + 360.0
    } else {
        lon
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn render_ir_wv(v: &Vortex, n: usize) -> (Grid, Grid) {
    let scale = n as f64 / 64.0;
    let re = v.eye_radius * scale;
    let rc = v.cloud_extent * scale;
    let ring_r = 1.6 * re;
    let ring_w = 0.6 * re + scale;
    let c = n as f64 / 2.0;
    let mut ir1 = Grid::zeros((n, n));
    let mut wv = Grid::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let y = i as f64 + 0.5 - c;
            let x = j as f64 + 0.5 - c;
            let r = (x * x + y * y).sqrt();
            let theta = y.atan2(x);
            let eye = (-(r / re).powi(2)).exp();
            let spiral = 1.0 + v.asymmetry * (2.0 * theta - 3.0 * (1.0 + r / re).ln() + v.spin).cos();
            let cloud = ((-(r / rc).powi(2)).exp() * spiral * (1.0 - 0.85 * eye)).clamp(0.0, 1.0);
            let ring = (-((r - ring_r) / ring_w).powi(2)).exp();
            let conv = v.core_strength * ring * (1.0 + 0.5 * v.asymmetry * (theta + v.spin).cos());
            let t_ir = 1.0 - 0.7 * cloud - 0.15 * conv;
            let t_wv = t_ir + conv - 0.08 - 0.05 * (1.0 - cloud);
            ir1[[i, j]] = t_ir as f32;
            wv[[i, j]] = t_wv as f32;
        }
    }
    (ir1, wv)
}

fn basin(rng: &mut ChaCha8Rng) -> (Region, f64, f64) {
    // (region, lon range, lat range)
    let table: [(Region, (f64, f64), (f64, f64)); 6] = [
        (Region::Wpac, (120.0, 170.0), (8.0, 30.0)),
        (Region::Epac, (-140.0, -95.0), (10.0, 25.0)),
        (Region::Cpac, (-179.0, -141.0), (10.0, 25.0)),
        (Region::Atln, (-80.0, -20.0), (10.0, 35.0)),
        (Region::Io, (60.0, 95.0), (5.0, 22.0)),
        (Region::Sh, (40.0, 179.0), (-30.0, -8.0)),
    ];
    let (region, lon, lat) = table[rng.gen_range(0..table.len())];
    (region, rng.gen_range(lon.0..lon.1), rng.gen_range(lat.0..lat.1))
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic in `cfg.rng_seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let n = cfg.image_size;
    let scale = n as f64 / 64.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let gauss = Normal::new(0.0, cfg.noise.gaussian.max(f64::MIN_POSITIVE)).expect("std >= 0");
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut truth = Vec::with_capacity(cfg.n_frames);
    let mut storm = 0usize;
    while frames.len() < cfg.n_frames {
        let year = rng.gen_range(cfg.first_year..=cfg.last_year);
        let day = rng.gen_range(0..360);
        let start = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year")
            .and_hms_opt(rng.gen_range(0..24), 15 * rng.gen_range(0..4), 0)
            .expect("valid time")
            + Duration::days(day);
        let (region, lon, lat) = basin(&mut rng);
        let a = [
            uniform(&mut rng, cfg.eye_radius),
            uniform(&mut rng, cfg.cloud_extent),
            uniform(&mut rng, cfg.asymmetry),
            uniform(&mut rng, cfg.core_strength),
        ];
        let b = [
            uniform(&mut rng, cfg.eye_radius),
            uniform(&mut rng, cfg.cloud_extent),
            uniform(&mut rng, cfg.asymmetry),
            uniform(&mut rng, cfg.core_strength),
        ];
        let spin0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let tc_id = format!("SYN{year}{storm:04}");
        storm += 1;
        let count = cfg.frames_per_storm.min(cfg.n_frames - frames.len());
        for k in 0..count {
            let t = if cfg.frames_per_storm > 1 {
                k as f64 / (cfg.frames_per_storm - 1) as f64
            } else {
                0.0
            };
            let v = Vortex {
                eye_radius: lerp(a[0], b[0], t),
                cloud_extent: lerp(a[1], b[1], t),
                asymmetry: lerp(a[2], b[2], t),
                core_strength: lerp(a[3], b[3], t),
                spin: spin0 + 0.4 * k as f64,
            };
            let meta = FrameMeta {
                tc_id: tc_id.clone(),
                utc_time: start + Duration::hours(cfg.cadence_hours * k as i64),
                lon: wrap_lon(lon - 0.2 * k as f64),
                lat,
                region,
                vmax: cfg
                    .vmax_model
                    .vmax(v.eye_radius, v.cloud_extent, v.core_strength),
            };
            let local = local_time(&meta);
            let m2n = compute_m2n(&local);
            let hour = chrono::Timelike::hour(&local);
            let daytime = (7..=16).contains(&hour);

            let (ir1, wv) = render_ir_wv(&v, n);
            let pmw = imaging::rotate_unmasked(
                &pmw_from_ir_wv(&ir1, &wv, cfg.pmw_smoothing * scale),
                cfg.pmw_rotation_offset,
            );
            let sun = cfg.sunlight.factor(m2n) as f32;
            let mut vis = ir1.mapv(|x| cloud_brightness(x) * sun);
            if cfg.noise.gaussian > 0.0 {
                vis.mapv_inplace(|v| v + gauss.sample(&mut rng) as f32);
            }
            let block_noise = rng.gen_bool(cfg.noise.block);
            if block_noise {
                let rows = ((rng.gen_range(0.92..1.0) * n as f64).ceil() as usize).min(n);
                let top = rng.gen_range(0..=n - rows);
                vis.slice_mut(ndarray::s![top..top + rows, ..]).fill(0.0);
            }
            let strip_noise = rng.gen_bool(cfg.noise.strip);
            if strip_noise {
                let period = (4.0 * scale).max(2.0) as usize;
                let phase = rng.gen_range(0..period);
                for i in (phase..n).step_by(period) {
                    vis.row_mut(i).fill(1.0);
                }
            }
            vis.mapv_inplace(|v| v.clamp(0.0, 1.0));

            truth.push(FrameTruth {
                eye_radius: v.eye_radius,
                cloud_extent: v.cloud_extent,
                asymmetry: v.asymmetry,
                core_strength: v.core_strength,
                m2n,
                daytime,
                block_noise,
                strip_noise,
            });
            frames.push(TCFrame {
                meta,
                ir1,
                wv,
                vis,
                pmw,
                vis_present: true,
                pmw_present: true,
            });
        }
    }
    Ok(SyntheticDataset {
        dataset: Dataset::new(frames, SplitTag::Unsplit)?,
        truth,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_frames: 30,
            frames_per_storm: 8,
            rng_seed: seed,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_indivisible_size() {
        let cfg = SyntheticConfig {
            image_size: 48,
            ..small(0)
        };
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(Error::ImageSize { size: 48, divisor: 64 })
        ));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(8)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn noise_free_pmw_matches_construction_exactly() {
        let cfg = SyntheticConfig {
            noise: NoiseConfig {
                gaussian: 0.0,
                block: 0.0,
                strip: 0.0,
            },
            pmw_rotation_offset: 0.0,
            ..small(3)
        };
        let s = generate_synthetic(&cfg).unwrap();
        for f in s.dataset.frames() {
            let want = pmw_from_ir_wv(&f.ir1, &f.wv, cfg.pmw_smoothing);
            assert_eq!(f.pmw, want);
        }
    }

    #[test]
    fn vmax_follows_recorded_closed_form() {
        let s = generate_synthetic(&small(4)).unwrap();
        for (f, t) in s.dataset.frames().iter().zip(&s.truth) {
            let want = s.config.vmax_model.vmax(t.eye_radius, t.cloud_extent, t.core_strength);
            assert_eq!(f.meta.vmax, want);
            assert!((20.0..=180.0).contains(&f.meta.vmax));
        }
    }

    #[test]
    fn frames_share_shape_and_storms_are_sorted() {
        let s = generate_synthetic(&small(5)).unwrap();
        assert_eq!(s.dataset.len(), 30);
        for f in s.dataset.frames() {
            assert_eq!(f.size(), (64, 64));
            assert!(f.pmw.iter().all(|&v| v >= 0.0));
            assert!(f.vis.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sunlight_is_monotone_and_dark_at_night() {
        let s = SunlightModel::default();
        assert_eq!(s.factor(0.0), 1.0);
        let vals: Vec<f64> = [0.0, 100.0, 200.0, 300.0].iter().map(|&m| s.factor(m)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.factor(400.0), 0.0);
    }
}
