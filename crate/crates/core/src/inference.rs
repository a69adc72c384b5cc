//! Operational estimation: IR1 and WV in, VIS and PMW generated, intensity
//! out, optionally blended over rotations and smoothed along each storm.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::time::{format_time, parse_time};
use crate::dataset::{Dataset, FrameMeta, Grid};
use crate::error::{Error, Result};
use crate::imaging::rotate;
use crate::layers::Ctx;
use crate::nets::{aux_batch, grids_to_tensor};
use crate::qc::Affine;
use crate::tensor::{Scalar, Tensor};
use crate::training::ModelBundle;

pub const ESTIMATE_CSV_VERSION: &str = "# tcgan estimates v1";
pub const BLEND_ANGLES: usize = 10;
pub const SMOOTH_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub tc_id: String,
    pub utc_time: NaiveDateTime,
    /// Single pass at angle 0, knots.
    pub vmax_raw: f64,
    /// Blend over `angles_used`, knots.
    pub vmax_blend: f64,
    pub vmax_smooth: Option<f64>,
    pub angles_used: Vec<f64>,
}

/// `k * 360 / n` for `k` in `0..n`.
pub fn blend_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * 360.0 / n as f64).collect()
}

pub fn blend(values: &[f64], mode: BlendMode) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("nothing to blend".into()));
    }
    Ok(match mode {
        BlendMode::Mean => values.iter().sum::<f64>() / values.len() as f64,
        BlendMode::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            if v.len() % 2 == 1 {
                v[m]
            } else {
                (v[m - 1] + v[m]) / 2.0
            }
        }
    })
}

/// Read-only view of one frame's operational inputs.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub ir1: &'a Grid,
    pub wv: &'a Grid,
    pub meta: &'a FrameMeta,
}

impl<'a> FrameInput<'a> {
    /// Only IR1, WV and metadata of every frame; VIS and PMW are never read.
    pub fn from_dataset(ds: &'a Dataset) -> Vec<FrameInput<'a>> {
        ds.frames()
            .iter()
            .map(|f| FrameInput {
                ir1: &f.ir1,
                wv: &f.wv,
                meta: &f.meta,
            })
            .collect()
    }
}

/// Generated channels in normalized units for one frame.
#[derive(Debug, Clone)]
pub struct Generated {
    pub vis: Grid,
    pub pmw: Grid,
}

/// Trained networks in inference mode.
pub struct Estimator<T> {
    pub bundle: ModelBundle<T>,
    pub mode: BlendMode,
    pub angles: Vec<f64>,
    /// Frames per forward pass.
    pub batch_size: usize,
}

fn scaled(g: &Grid, a: Affine) -> Grid {
    let (m, inv) = (a.mean as f32, (1.0 / a.std) as f32);
    g.mapv(|v| (v - m) * inv)
}

impl<T: Scalar> Estimator<T> {
    pub fn new(bundle: ModelBundle<T>) -> Self {
        Estimator {
            bundle,
            mode: BlendMode::Mean,
            angles: blend_angles(BLEND_ANGLES),
            batch_size: 32,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self::new(ModelBundle::load(dir)?))
    }

    fn check(&self, f: &FrameInput<'_>) -> Result<()> {
        let size = self.bundle.models.image_size();
        for (name, g) in [("ir1", f.ir1), ("wv", f.wv)] {
            if g.dim() != (size, size) {
                return Err(Error::Shape(format!(
                    "{} {}: {name} is {:?}, model expects {size}x{size}",
                    f.meta.tc_id,
                    format_time(&f.meta.utc_time),
                    g.dim()
                )));
            }
        }
        Ok(())
    }

    /// Normalized, rotated `[N, 1, H, W]` IR1 and WV tensors.
    fn inputs(&self, frames: &[FrameInput<'_>], angles: &[f64]) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = &self.bundle.stats;
        let mut ir1 = Vec::with_capacity(frames.len());
        let mut wv = Vec::with_capacity(frames.len());
        for (f, &a) in frames.iter().zip(angles) {
            self.check(f)?;
            ir1.push(rotate(&scaled(f.ir1, s.ir1), a));
            wv.push(rotate(&scaled(f.wv, s.wv), a));
        }
        let stack = |gs: &[Grid]| -> Result<Tensor<T>> {
            let refs: Vec<&Grid> = gs.iter().collect();
            let t: Tensor<T> = grids_to_tensor(&refs)?;
            let (h, w) = gs[0].dim();
            t.reshape(&[gs.len(), 1, h, w])
        };
        Ok((stack(&ir1)?, stack(&wv)?))
    }

    /// Runs the operational path on frame/angle pairs; returns knots.
    fn forward(&mut self, frames: &[FrameInput<'_>], angles: &[f64]) -> Result<Vec<f64>> {
        let (ir1, wv) = self.inputs(frames, angles)?;
        let n = frames.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx {
            train: false,
            update_stats: false,
            rng: &mut rng,
        };
        let m = &mut self.bundle.models;
        let vis = m.gen_vis.forward(&m.gen_vis.input(&ir1, &wv, Some(&vec![0.0; n]))?, &mut ctx)?;
        let pmw = m.gen_pmw.forward(&m.gen_pmw.input(&ir1, &wv, None)?, &mut ctx)?;
        let x = Tensor::concat_channels(&[&ir1, &wv, &vis, &pmw])?;
        let aux: Tensor<T> = aux_batch(frames.iter().map(|f| f.meta))?;
        let est = m.regressor.forward(&x, &aux, &mut ctx)?;
        Ok(est.data().iter().map(|v| v.f64()).collect())
    }

    fn forward_chunked(&mut self, frames: &[FrameInput<'_>], angles: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(frames.len());
        let bs = self.batch_size.max(1);
        for (fs, an) in frames.chunks(bs).zip(angles.chunks(bs)) {
            out.extend(self.forward(fs, an)?);
        }
        Ok(out)
    }

    /// Single-pass estimate at angle 0. `vmax_blend` equals `vmax_raw`.
    pub fn estimate(&mut self, ir1: &Grid, wv: &Grid, meta: &FrameMeta) -> Result<EstimateRecord> {
        let f = FrameInput { ir1, wv, meta };
        let v = self.forward(&[f], &[0.0])?[0];
        Ok(EstimateRecord {
            tc_id: meta.tc_id.clone(),
            utc_time: meta.utc_time,
            vmax_raw: v,
            vmax_blend: v,
            vmax_smooth: None,
            angles_used: vec![0.0],
        })
    }

    pub fn estimate_blended(&mut self, ir1: &Grid, wv: &Grid, meta: &FrameMeta) -> Result<EstimateRecord> {
        Ok(self.estimate_many(&[FrameInput { ir1, wv, meta }])?.remove(0))
    }

    /// Blended estimates for many frames, in input order.
    pub fn estimate_many(&mut self, frames: &[FrameInput<'_>]) -> Result<Vec<EstimateRecord>> {
        let angles = self.angles.clone();
        if angles.is_empty() {
            return Err(Error::Config("no blend angles".into()));
        }
        let raw = self.forward_chunked(frames, &vec![0.0; frames.len()])?;
        let mut per_angle = Vec::with_capacity(angles.len());
        for &a in &angles {
            // angle 0 reuses the single-pass values
            if a == 0.0 {
                per_angle.push(raw.clone());
            } else {
                per_angle.push(self.forward_chunked(frames, &vec![a; frames.len()])?);
            }
        }
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let vals: Vec<f64> = per_angle.iter().map(|v| v[i]).collect();
                Ok(EstimateRecord {
                    tc_id: f.meta.tc_id.clone(),
                    utc_time: f.meta.utc_time,
                    vmax_raw: raw[i],
                    vmax_blend: blend(&vals, self.mode)?,
                    vmax_smooth: None,
                    angles_used: angles.clone(),
                })
            })
            .collect()
    }

    /// Estimates for every angle separately: `[angle][frame]`.
    pub fn estimate_per_angle(&mut self, frames: &[FrameInput<'_>]) -> Result<Vec<Vec<f64>>> {
        let angles = self.angles.clone();
        angles
            .iter()
            .map(|&a| self.forward_chunked(frames, &vec![a; frames.len()]))
            .collect()
    }

    /// Generated VIS at `vis_m2n` and generated PMW, angle 0, in the scaled
    /// units the networks work in.
    pub fn generate(&mut self, frames: &[FrameInput<'_>], vis_m2n: f64) -> Result<Vec<Generated>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(self.batch_size.max(1)) {
            let n = chunk.len();
            let (ir1, wv) = self.inputs(chunk, &vec![0.0; n])?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = Ctx {
                train: false,
                update_stats: false,
                rng: &mut rng,
            };
            let m = &mut self.bundle.models;
            let vis = m.gen_vis.forward(&m.gen_vis.input(&ir1, &wv, Some(&vec![vis_m2n; n]))?, &mut ctx)?;
            let pmw = m.gen_pmw.forward(&m.gen_pmw.input(&ir1, &wv, None)?, &mut ctx)?;
            let (h, w) = (ir1.shape()[2], ir1.shape()[3]);
            let grid = |t: &Tensor<T>, i: usize| Grid::from_shape_fn((h, w), |(y, x)| t.item(i)[y * w + x].f64() as f32);
            for i in 0..n {
                out.push(Generated {
                    vis: grid(&vis, i),
                    pmw: grid(&pmw, i),
                });
            }
        }
        Ok(out)
    }
}

/// Centered rolling mean of `vmax_blend` over `window` records of the same
/// storm, shrunk at the series ends. Records of one storm must appear in
/// increasing time order; storms may interleave.
pub fn smooth_series(records: &mut [EstimateRecord], window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::Config("smoothing window must be positive".into()));
    }
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let g = groups.entry(r.tc_id.as_str()).or_insert_with(|| {
            order.push(r.tc_id.as_str());
            Vec::new()
        });
        if let Some(&prev) = g.last() {
            if records[prev].utc_time >= r.utc_time {
                return Err(Error::InvalidInput(format!(
                    "storm {} is not sorted by time at {}",
                    r.tc_id,
                    format_time(&r.utc_time)
                )));
            }
        }
        g.push(i);
    }
    let half = window / 2;
    let mut smoothed = vec![0.0; records.len()];
    for tc in order {
        let idx = &groups[tc];
        for (k, &i) in idx.iter().enumerate() {
            let lo = k.saturating_sub(half);
            let hi = (k + window - half).min(idx.len());
            let vals: Vec<f64> = idx[lo..hi].iter().map(|&j| records[j].vmax_blend).collect();
            smoothed[i] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    for (r, s) in records.iter_mut().zip(smoothed) {
        r.vmax_smooth = Some(s);
    }
    Ok(())
}

pub fn write_estimates(path: &Path, records: &[EstimateRecord]) -> Result<()> {
    let mut buf = format!("{ESTIMATE_CSV_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["tc_id", "time", "vmax_raw", "vmax_blend", "vmax_smooth"])?;
        for r in records {
            w.write_record([
                r.tc_id.clone(),
                format_time(&r.utc_time),
                r.vmax_raw.to_string(),
                r.vmax_blend.to_string(),
                r.vmax_smooth.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an estimate CSV; `angles_used` is not stored and comes back empty.
pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(ESTIMATE_CSV_VERSION) {
        return Err(Error::InvalidInput(format!(
            "{}: missing `{ESTIMATE_CSV_VERSION}` header",
            path.display()
        )));
    }
    let body: String = lines.map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::InvalidInput(format!("{} row {}: expected 5 fields", path.display(), i + 1)));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{} row {}: bad number {:?}", path.display(), i + 1, &rec[k])))
        };
        out.push(EstimateRecord {
            tc_id: rec[0].to_string(),
            utc_time: parse_time(&rec[1])?,
            vmax_raw: num(2)?,
            vmax_blend: num(3)?,
            vmax_smooth: if rec[4].is_empty() { None } else { Some(num(4)?) },
            angles_used: Vec::new(),
        });
    }
    Ok(out)
}
