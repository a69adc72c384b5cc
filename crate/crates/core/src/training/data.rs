//! Normalized training frames and batch assembly with rotation augmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Channel, Dataset, TCFrame, M2N_MAX};
use crate::error::{Error, Result};
use crate::imaging::rotate;
use crate::nets::aux_batch;
use crate::qc::{normalize_frame, vis_qc_with, ChannelStats, QcThresholds, Verdict};
use crate::tensor::{Scalar, Tensor};

use super::DataFilter;

/// Regressor input channels that carry data; the others are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSet {
    pub ir1: bool,
    pub wv: bool,
    pub vis: bool,
    pub pmw: bool,
}

impl ChannelSet {
    pub const ALL: ChannelSet = ChannelSet {
        ir1: true,
        wv: true,
        vis: true,
        pmw: true,
    };
    pub const IR1_WV: ChannelSet = ChannelSet {
        ir1: true,
        wv: true,
        vis: false,
        pmw: false,
    };
    pub const IR1_PMW: ChannelSet = ChannelSet {
        ir1: true,
        wv: false,
        vis: false,
        pmw: true,
    };

    pub fn mask(&self) -> [bool; 4] {
        [self.ir1, self.wv, self.vis, self.pmw]
    }

    pub fn label(&self) -> String {
        let names = ["ir1", "wv", "vis", "pmw"];
        let on: Vec<&str> = names
            .iter()
            .zip(self.mask())
            .filter_map(|(n, m)| m.then_some(*n))
            .collect();
        on.join("+")
    }
}

/// Frames scaled by fixed channel statistics, with their VIS verdicts
/// computed on the unscaled data. m2n is capped at 300 minutes, the top of
/// the conditioning range.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    frames: Vec<TCFrame>,
    vis_good: Vec<bool>,
    m2n: Vec<f64>,
}

impl PreparedSet {
    pub fn new(ds: &Dataset, stats: &ChannelStats, thr: &QcThresholds) -> Result<Self> {
        let mut frames = Vec::with_capacity(ds.len());
        let mut vis_good = Vec::with_capacity(ds.len());
        let mut m2n = Vec::with_capacity(ds.len());
        for f in ds.frames() {
            vis_good.push(vis_qc_with(f, thr).verdict == Verdict::Good);
            m2n.push(f.m2n().min(M2N_MAX));
            frames.push(normalize_frame(f, stats)?);
        }
        Ok(PreparedSet { frames, vis_good, m2n })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[TCFrame] {
        &self.frames
    }

    pub fn vis_good(&self, i: usize) -> bool {
        self.vis_good[i]
    }

    pub fn image_size(&self) -> Option<usize> {
        self.frames.first().map(|f| f.size().0)
    }

    /// Frame indices admitted by `filter`, in dataset order.
    pub fn indices(&self, filter: DataFilter) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| filter == DataFilter::All || self.vis_good[i])
            .collect()
    }

    /// Stacks frames `idx`, each rotated by its own angle in degrees. Every
    /// channel is disc-masked, so an angle of 0 still clears the corners.
    pub fn batch<T: Scalar>(&self, idx: &[usize], angles: &[f64]) -> Result<Batch<T>> {
        if idx.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        if idx.len() != angles.len() {
            return Err(Error::Shape(format!("{} frames but {} angles", idx.len(), angles.len())));
        }
        let size = self.frames[idx[0]].size();
        let per = size.0 * size.1;
        let shape = [idx.len(), 1, size.0, size.1];
        let mut chans: Vec<Vec<T>> = (0..4).map(|_| Vec::with_capacity(idx.len() * per)).collect();
        for (&i, &a) in idx.iter().zip(angles) {
            let f = self.frames.get(i).ok_or_else(|| Error::Training(format!("frame index {i} out of range")))?;
            for (c, out) in Channel::ALL.into_iter().zip(chans.iter_mut()) {
                let g = rotate(f.channel(c), a);
                out.extend(g.iter().map(|&v| T::of(v as f64)));
            }
        }
        let mut it = chans.into_iter().map(|d| Tensor::from_vec(&shape, d));
        let mut next = || it.next().expect("four channels");
        Ok(Batch {
            idx: idx.to_vec(),
            ir1: next()?,
            wv: next()?,
            vis: next()?,
            pmw: next()?,
            aux: aux_batch(idx.iter().map(|&i| &self.frames[i].meta))?,
            vmax: idx.iter().map(|&i| self.frames[i].meta.vmax).collect(),
            m2n: idx.iter().map(|&i| self.m2n[i]).collect(),
            vis_good: idx.iter().map(|&i| self.vis_good[i]).collect(),
        })
    }

    /// One epoch of batches: a shuffled order chunked to `batch_size`, with a
    /// trailing single frame dropped because batch statistics need two.
    pub fn epoch_order(&self, filter: DataFilter, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx = self.indices(filter);
        idx.shuffle(rng);
        idx.chunks(batch_size.max(2))
            .filter(|c| c.len() > 1)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Number of optimizer steps one epoch over `n` frames takes; batch sizes
/// below 2 yield none.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    if batch_size < 2 {
        return 0;
    }
    n / batch_size + usize::from(n % batch_size > 1)
}

/// Draws one angle per sample, uniform in `[0, 360)`, or zeros.
pub(crate) fn draw_angles(n: usize, rotate: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rotate { rng.gen_range(0.0..360.0) } else { 0.0 })
        .collect()
}

/// Tensors of one batch, each `[N, 1, H, W]`, plus per-sample labels.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub idx: Vec<usize>,
    pub ir1: Tensor<T>,
    pub wv: Tensor<T>,
    pub vis: Tensor<T>,
    pub pmw: Tensor<T>,
    /// `[N, AUX_LEN]`.
    pub aux: Tensor<T>,
    pub vmax: Vec<f64>,
    pub m2n: Vec<f64>,
    pub vis_good: Vec<bool>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// The batch restricted to positions `keep`, in the given order.
    pub fn subset(&self, keep: &[usize]) -> Result<Batch<T>> {
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let mut shape = t.shape().to_vec();
            shape[0] = keep.len();
            let mut data = Vec::with_capacity(keep.len() * t.item_len());
            for &k in keep {
                data.extend_from_slice(t.item(k));
            }
            Tensor::from_vec(&shape, data)
        };
        Ok(Batch {
            idx: keep.iter().map(|&k| self.idx[k]).collect(),
            ir1: pick(&self.ir1)?,
            wv: pick(&self.wv)?,
            vis: pick(&self.vis)?,
            pmw: pick(&self.pmw)?,
            aux: pick(&self.aux)?,
            vmax: keep.iter().map(|&k| self.vmax[k]).collect(),
            m2n: keep.iter().map(|&k| self.m2n[k]).collect(),
            vis_good: keep.iter().map(|&k| self.vis_good[k]).collect(),
        })
    }

    /// Positions of QC-good frames.
    pub fn good_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.vis_good[i]).collect()
    }
}
