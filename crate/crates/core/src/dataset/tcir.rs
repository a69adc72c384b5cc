//! TCIR-format container: an HDF5 file with a `matrix` dataset of shape
//! `[N, H, W, C]` (`C` = 4 for IR1, WV, VIS, PMW or 2 for IR1, WV) plus a CSV
//! sidecar with header `ID,time,lon,lat,vmax,region`.

use std::path::Path;

use ndarray::{s, Array4, Axis, Ix4};
use serde::{Deserialize, Serialize};

use crate::dataset::time::{format_time, parse_time};
use crate::dataset::{Channel, Dataset, FrameMeta, Grid, Region, SplitTag, TCFrame};
use crate::error::{Error, Result};
use crate::imaging;

pub const MATRIX: &str = "matrix";

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Center-crop and average-pool frames down to this edge length.
    pub target_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    #[serde(rename = "ID")]
    id: String,
    time: String,
    lon: f64,
    lat: f64,
    vmax: f64,
    region: String,
}

pub fn read_meta(path: &Path) -> Result<Vec<FrameMeta>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in rdr.deserialize::<MetaRow>().enumerate() {
        let rec = rec?;
        let utc_time = parse_time(&rec.time).map_err(|e| Error::Metadata {
            row,
            msg: e.to_string(),
        })?;
        let region: Region = rec.region.parse()?;
        if !(-180.0..=180.0).contains(&rec.lon) {
            return Err(Error::Metadata {
                row,
                msg: format!("longitude {} outside [-180, 180]", rec.lon),
            });
        }
        out.push(FrameMeta {
            tc_id: rec.id,
            utc_time,
            lon: rec.lon,
            lat: rec.lat,
            region,
            vmax: rec.vmax,
        });
    }
    Ok(out)
}

pub fn write_meta(path: &Path, metas: impl IntoIterator<Item = FrameMeta>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metas {
        w.serialize(MetaRow {
            id: m.tc_id,
            time: format_time(&m.utc_time),
            lon: m.lon,
            lat: m.lat,
            vmax: m.vmax,
            region: m.region.code().to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Replaces NaNs with the median of the finite pixels. Returns `false` when
/// the channel carries no signal (all NaN or all zero), in which case it is
/// zeroed.
pub fn clean_channel(g: &mut Grid) -> bool {
    let mut finite: Vec<f32> = g.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || finite.iter().all(|&v| v == 0.0) {
        g.fill(0.0);
        return false;
    }
    if finite.len() < g.len() {
        finite.sort_by(f32::total_cmp);
        let m = finite.len();
        let median = if m % 2 == 1 {
            finite[m / 2]
        } else {
            0.5 * (finite[m / 2 - 1] + finite[m / 2])
        };
        g.mapv_inplace(|v| if v.is_finite() { v } else { median });
    }
    true
}

pub fn load_tcir(container: &Path, meta: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let file = hdf5::File::open(container)?;
    let matrix: Array4<f32> = file.dataset(MATRIX)?.read::<f32, Ix4>()?;
    let metas = read_meta(meta)?;
    let (n, h, w, c) = matrix.dim();
    if n != metas.len() {
        return Err(Error::RowCount {
            array: n,
            table: metas.len(),
        });
    }
    if c != 4 && c != 2 {
        return Err(Error::Shape(format!(
            "{}: expected 2 or 4 channels, found {c}",
            container.display()
        )));
    }
    if h != w && n > 0 {
        return Err(Error::Shape(format!("frames must be square, got {h}x{w}")));
    }
    let mut frames = Vec::with_capacity(n);
    for (i, m) in metas.into_iter().enumerate() {
        let item = matrix.index_axis(Axis(0), i);
        let mut grids: Vec<Grid> = (0..4)
            .map(|ch| {
                if ch < c {
                    item.slice(s![.., .., ch]).to_owned()
                } else {
                    Grid::from_elem((h, w), f32::NAN)
                }
            })
            .collect();
        let mut present = [true; 4];
        for (ch, g) in grids.iter_mut().enumerate() {
            present[ch] = clean_channel(g);
        }
        if !(present[0] && present[1]) {
            log::warn!(
                "frame {} {}: IR1/WV channel has no valid pixels",
                m.tc_id,
                format_time(&m.utc_time)
            );
        }
        if let Some(size) = opts.target_size {
            for g in grids.iter_mut() {
                *g = imaging::resample(g, size)?;
            }
        }
        let pmw = grids.pop().expect("4 channels");
        let vis = grids.pop().expect("4 channels");
        let wv = grids.pop().expect("4 channels");
        let ir1 = grids.pop().expect("4 channels");
        frames.push(TCFrame {
            meta: m,
            ir1,
            wv,
            vis,
            pmw,
            vis_present: present[2],
            pmw_present: present[3],
        });
    }
    sort_storms(&mut frames);
    Dataset::new(frames, SplitTag::Unsplit)
}

/// Stable-sorts by (storm first appearance, time) only when some storm is
/// out of order, so interleaved but ordered storms keep their layout.
fn sort_storms(frames: &mut [TCFrame]) {
    use std::collections::HashMap;
    let mut last = HashMap::new();
    let sorted = frames.iter().all(|f| {
        last.insert(f.meta.tc_id.clone(), f.meta.utc_time)
            .is_none_or(|prev| prev <= f.meta.utc_time)
    });
    if sorted {
        return;
    }
    let mut rank = HashMap::new();
    for f in frames.iter() {
        let next = rank.len();
        rank.entry(f.meta.tc_id.clone()).or_insert(next);
    }
    frames.sort_by_key(|f| (rank[&f.meta.tc_id], f.meta.utc_time));
}

/// Writes a dataset in the TCIR layout; absent VIS/PMW channels become NaN.
pub fn write_tcir(ds: &Dataset, container: &Path, meta: &Path) -> Result<()> {
    let (h, w) = ds.image_size().unwrap_or((0, 0));
    let mut matrix = Array4::<f32>::zeros((ds.len(), h, w, 4));
    for (i, f) in ds.frames().iter().enumerate() {
        for (ch, c) in Channel::ALL.iter().enumerate() {
            let absent = match c {
                Channel::Vis => !f.vis_present,
                Channel::Pmw => !f.pmw_present,
                _ => false,
            };
            let mut dst = matrix.slice_mut(s![i, .., .., ch]);
            if absent {
                dst.fill(f32::NAN);
            } else {
                dst.assign(f.channel(*c));
            }
        }
    }
    let file = hdf5::File::create(container)?;
    file.new_dataset::<f32>()
        .shape(matrix.shape())
        .create(MATRIX)?
        .write(&matrix)?;
    write_meta(meta, ds.frames().iter().map(|f| f.meta.clone()))
}
