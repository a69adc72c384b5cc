//! PNG figures with CSV sidecars holding the plotted data.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::NaiveDateTime;
use image::{GrayImage, Luma};
use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::dataset::time::format_time;
use crate::dataset::Grid;
use crate::error::{Error, Result};
use crate::training::EpochRow;

pub const CURVE_CSV_VERSION: &str = "# tcgan learning-curve v1";
pub const GRID_CSV_VERSION: &str = "# tcgan generation-grid v1";

/// Env var naming a TTF file for plot text.
pub const FONT_ENV: &str = "TCGAN_FONT";

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a sans-serif font once; plots skip text when none is found.
fn has_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var(FONT_ENV).ok();
        let candidates = env.iter().map(String::as_str).chain(FONT_PATHS);
        for p in candidates {
            if let Ok(bytes) = fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no font found; plots are drawn without text (set {FONT_ENV})");
        false
    })
}

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plot: {e}"))
}

/// Path of the data sidecar next to `png`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("csv")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    /// (regressor epoch, validation MSE).
    pub points: Vec<(usize, f64)>,
}

impl Curve {
    /// Validation MSE after each regressor epoch of a run, numbered
    /// cumulatively across its regressor stages so runs with the same
    /// regressor budget line up.
    pub fn from_log(label: &str, rows: &[EpochRow]) -> Result<Self> {
        let points: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.target == "regressor")
            .filter_map(|r| r.val_mse)
            .enumerate()
            .map(|(i, v)| (i + 1, v))
            .collect();
        if points.is_empty() {
            return Err(Error::InvalidInput(format!("log {label:?} has no regressor epochs with validation MSE")));
        }
        Ok(Curve {
            label: label.to_string(),
            points,
        })
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

/// Validation MSE against epoch, one line per curve, limited to the first
/// `epochs` epochs when given. Returns the legend entries.
pub fn learning_curve_plot(curves: &[Curve], epochs: Option<usize>, png: &Path) -> Result<Vec<String>> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("learning curve plot needs at least one log".into()));
    }
    let limit = epochs.unwrap_or(usize::MAX);
    let shown: Vec<Curve> = curves
        .iter()
        .map(|c| Curve {
            label: c.label.clone(),
            points: c.points.iter().copied().filter(|p| p.0 <= limit).collect(),
        })
        .collect();
    let pts = || shown.iter().flat_map(|c| c.points.iter());
    if pts().next().is_none() {
        return Err(Error::InvalidInput("no points within the epoch limit".into()));
    }
    let x_max = pts().map(|p| p.0).max().unwrap_or(1).max(2);
    let (lo, hi) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pad = ((hi - lo) * 0.05).max(1e-6);

    let text = has_font();
    {
        let root = BitMapBackend::new(png, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let mut builder = ChartBuilder::on(&root);
        builder.margin(15);
        if text {
            builder
                .caption("validation MSE", ("sans-serif", 20))
                .x_label_area_size(35)
                .y_label_area_size(55);
        }
        let mut chart = builder
            .build_cartesian_2d(1usize..x_max, (lo - pad)..(hi + pad))
            .map_err(draw_err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("epoch").y_desc("MSE (kt^2)");
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(draw_err)?;
        for (i, c) in shown.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let s = chart
                .draw_series(LineSeries::new(c.points.iter().copied(), color.stroke_width(2)))
                .map_err(draw_err)?;
            if text {
                s.label(c.label.clone())
                    .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
            }
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(draw_err)?;
        }
        root.present().map_err(draw_err)?;
    }

    let mut buf = format!("{CURVE_CSV_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["series", "epoch", "val_mse"])?;
        for c in &shown {
            for (e, v) in &c.points {
                w.write_record([c.label.clone(), e.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(png, e))?;
    }
    let side = sidecar_path(png);
    fs::write(&side, buf).map_err(|e| Error::io(&side, e))?;
    Ok(shown.into_iter().map(|c| c.label).collect())
}

/// Real and generated channels of one frame.
#[derive(Debug, Clone, Copy)]
pub struct GridPanel<'a> {
    pub tc_id: &'a str,
    pub utc_time: NaiveDateTime,
    pub real_vis: &'a Grid,
    pub gen_vis: &'a Grid,
    pub real_pmw: &'a Grid,
    pub gen_pmw: &'a Grid,
}

/// Where each frame's block landed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    pub columns: usize,
    pub rows: usize,
    /// (row, column) of each block, in input order.
    pub blocks: Vec<(usize, usize)>,
    pub width: u32,
    pub height: u32,
}

const GUTTER: u32 = 2;
const BLOCK_GAP: u32 = 6;

fn paste(img: &mut GrayImage, g: &Grid, x0: u32, y0: u32, lo: f32, hi: f32) {
    let span = if hi > lo { hi - lo } else { 1.0 };
    for ((i, j), &v) in g.indexed_iter() {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        img.put_pixel(x0 + j as u32, y0 + i as u32, Luma([(t * 255.0).round() as u8]));
    }
}

/// Tiles one 2x2 block per frame: real VIS and generated VIS on top, real
/// PMW and generated PMW below. Blocks fill rows of `columns` left to right.
/// VIS is shown on [0, 1]; PMW on [0, max] of the frame's pair.
pub fn generation_grid_plot(panels: &[GridPanel<'_>], columns: usize, png: &Path) -> Result<GridLayout> {
    if panels.is_empty() {
        return Err(Error::InvalidInput("generation grid needs at least one frame".into()));
    }
    let (h, w) = panels[0].real_vis.dim();
    for p in panels {
        for g in [p.real_vis, p.gen_vis, p.real_pmw, p.gen_pmw] {
            if g.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "{} {}: channel {:?} does not pair with {:?}",
                    p.tc_id,
                    format_time(&p.utc_time),
                    g.dim(),
                    (h, w)
                )));
            }
        }
    }
    let columns = columns.clamp(1, panels.len());
    let rows = panels.len().div_ceil(columns);
    let (h, w) = (h as u32, w as u32);
    let bw = 2 * w + GUTTER;
    let bh = 2 * h + GUTTER;
    let width = columns as u32 * bw + (columns as u32 - 1) * BLOCK_GAP;
    let height = rows as u32 * bh + (rows as u32 - 1) * BLOCK_GAP;
    let mut img = GrayImage::from_pixel(width, height, Luma([128]));
    let mut blocks = Vec::with_capacity(panels.len());
    for (k, p) in panels.iter().enumerate() {
        let (r, c) = (k / columns, k % columns);
        blocks.push((r, c));
        let x0 = c as u32 * (bw + BLOCK_GAP);
        let y0 = r as u32 * (bh + BLOCK_GAP);
        let pmw_hi = p.real_pmw.iter().chain(p.gen_pmw.iter()).fold(0.0f32, |a, &b| a.max(b));
        paste(&mut img, p.real_vis, x0, y0, 0.0, 1.0);
        paste(&mut img, p.gen_vis, x0 + w + GUTTER, y0, 0.0, 1.0);
        paste(&mut img, p.real_pmw, x0, y0 + h + GUTTER, 0.0, pmw_hi);
        paste(&mut img, p.gen_pmw, x0 + w + GUTTER, y0 + h + GUTTER, 0.0, pmw_hi);
    }
    img.save(png)?;

    let mut buf = format!("{GRID_CSV_VERSION}\n").into_bytes();
    {
        let mut wr = csv::Writer::from_writer(&mut buf);
        wr.write_record(["block", "row", "column", "tc_id", "time", "vis_mse", "pmw_mse"])?;
        for (k, (p, (r, c))) in panels.iter().zip(&blocks).enumerate() {
            wr.write_record([
                k.to_string(),
                r.to_string(),
                c.to_string(),
                p.tc_id.to_string(),
                format_time(&p.utc_time),
                grid_mse(p.real_vis, p.gen_vis).to_string(),
                grid_mse(p.real_pmw, p.gen_pmw).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io(png, e))?;
    }
    let side = sidecar_path(png);
    fs::write(&side, buf).map_err(|e| Error::io(&side, e))?;
    Ok(GridLayout {
        columns,
        rows,
        blocks,
        width,
        height,
    })
}

fn grid_mse(a: &Grid, b: &Grid) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n
}
