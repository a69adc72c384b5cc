//! Staged training: regressor pre-training, GAN stages with a frozen
//! regressor in the loop, and regressor fine-tuning on generated channels.

mod data;
mod models;
mod step;
mod trainer;

#[cfg(test)]
mod tests;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossOptions, LossWeights};
use crate::nets::NetworkName;
use crate::optim::AdamConfig;
use crate::qc::QcThresholds;

pub use data::{batches_per_epoch, Batch, ChannelSet, PreparedSet};
pub use models::{ModelBundle, ModelSpecs, Models, STATS_FILE};
pub use step::{disc_objective, gen_objective, regr_objective, GanOutcome, StepTrace};
pub use trainer::{
    read_epoch_log, train_regressor_baseline, write_epoch_log, BestVal, EpochRow, NullObserver, Observer,
    TrainOutcome, TrainState, Trainer, EPOCH_LOG, STEP_LOG, TRAIN_LOG_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Regressor only.
    Regressor,
    /// Generators and discriminators with the regressor frozen.
    Gan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFilter {
    All,
    GoodVisOnly,
}

/// Where the regressor's VIS or PMW input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Generated,
}

/// Loss weights per generator target; `None` when that target is not trained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub vis: Option<LossWeights>,
    pub pmw: Option<LossWeights>,
}

impl StageWeights {
    pub const NONE: StageWeights = StageWeights { vis: None, pmw: None };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// 1-based position in the schedule.
    pub stage_id: usize,
    pub label: String,
    pub kind: StageKind,
    pub trainable: Vec<NetworkName>,
    pub frozen: Vec<NetworkName>,
    pub data_filter: DataFilter,
    pub vis_source_for_lregr: Source,
    pub pmw_source_for_lregr: Source,
    pub weights: StageWeights,
    pub max_epochs: usize,
}

impl StageConfig {
    fn new(
        label: &str,
        kind: StageKind,
        trainable: &[NetworkName],
        data_filter: DataFilter,
        sources: (Source, Source),
        weights: StageWeights,
        max_epochs: usize,
    ) -> Self {
        let frozen = NetworkName::ALL
            .iter()
            .copied()
            .filter(|n| !trainable.contains(n))
            .collect();
        StageConfig {
            stage_id: 0,
            label: label.to_string(),
            kind,
            trainable: trainable.to_vec(),
            frozen,
            data_filter,
            vis_source_for_lregr: sources.0,
            pmw_source_for_lregr: sources.1,
            weights,
            max_epochs,
        }
    }

    pub fn is_trainable(&self, n: NetworkName) -> bool {
        self.trainable.contains(&n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("stage {} ({}): {msg}", self.stage_id, self.label)));
        for n in NetworkName::ALL {
            let (t, f) = (self.trainable.contains(&n), self.frozen.contains(&n));
            if t == f {
                return bad(&format!("{n} must be exactly one of trainable or frozen"));
            }
        }
        if self.trainable.len() + self.frozen.len() != NetworkName::ALL.len() {
            return bad("duplicate network in trainable/frozen lists");
        }
        match self.kind {
            StageKind::Regressor => {
                if self.trainable != [NetworkName::Regressor] {
                    return bad("a regressor stage trains only the regressor");
                }
            }
            StageKind::Gan => {
                if self.is_trainable(NetworkName::Regressor) {
                    return bad("the regressor is frozen during GAN stages");
                }
                let vis = self.is_trainable(NetworkName::GenVis);
                let pmw = self.is_trainable(NetworkName::GenPmw);
                if !vis && !pmw {
                    return bad("a GAN stage trains at least one generator");
                }
                if vis != self.is_trainable(NetworkName::DiscVis) || pmw != self.is_trainable(NetworkName::DiscPmw) {
                    return bad("each trained generator trains with its discriminator");
                }
                if vis && (self.weights.vis.is_none() || self.vis_source_for_lregr != Source::Generated) {
                    return bad("training gen_vis needs VIS weights and generated VIS in l_regr");
                }
                if pmw && (self.weights.pmw.is_none() || self.pmw_source_for_lregr != Source::Generated) {
                    return bad("training gen_pmw needs PMW weights and generated PMW in l_regr");
                }
                for w in [self.weights.vis, self.weights.pmw].into_iter().flatten() {
                    w.validate()?;
                }
            }
        }
        Ok(())
    }
}

use NetworkName::{DiscPmw, DiscVis, GenPmw, GenVis, Regressor as Reg};
use Source::{Generated, Real};

fn numbered(mut stages: Vec<StageConfig>) -> Vec<StageConfig> {
    for (i, s) in stages.iter_mut().enumerate() {
        s.stage_id = i + 1;
    }
    stages
}

/// Two loops of (regressor pre-training, one GAN) followed by regressor
/// fine-tuning. Loop 1 uses only good-VIS frames, keeps real PMW in the
/// regressor input and trains the VIS GAN; loop 2 uses every frame and
/// trains the PMW GAN behind the fixed VIS generator.
pub fn five_stage_schedule(epochs: [usize; 5]) -> Vec<StageConfig> {
    numbered(vec![
        StageConfig::new(
            "pretrain_r",
            StageKind::Regressor,
            &[Reg],
            DataFilter::GoodVisOnly,
            (Real, Real),
            StageWeights::NONE,
            epochs[0],
        ),
        StageConfig::new(
            "gen_vis",
            StageKind::Gan,
            &[GenVis, DiscVis],
            DataFilter::GoodVisOnly,
            (Generated, Real),
            StageWeights {
                vis: Some(LossWeights::VIS),
                pmw: None,
            },
            epochs[1],
        ),
        StageConfig::new(
            "pretrain_r",
            StageKind::Regressor,
            &[Reg],
            DataFilter::All,
            (Generated, Real),
            StageWeights::NONE,
            epochs[2],
        ),
        StageConfig::new(
            "gen_pmw",
            StageKind::Gan,
            &[GenPmw, DiscPmw],
            DataFilter::All,
            (Generated, Generated),
            StageWeights {
                vis: None,
                pmw: Some(LossWeights::PMW),
            },
            epochs[3],
        ),
        StageConfig::new(
            "finetune_r",
            StageKind::Regressor,
            &[Reg],
            DataFilter::All,
            (Generated, Generated),
            StageWeights::NONE,
            epochs[4],
        ),
    ])
}

pub const FIVE_STAGE_EPOCHS: [usize; 5] = [70, 500, 100, 200, 300];

/// Regressor pre-training on real channels, joint training of both GANs,
/// then regressor fine-tuning on generated channels.
pub fn three_stage_schedule(epochs: [usize; 3]) -> Vec<StageConfig> {
    numbered(vec![
        StageConfig::new(
            "pretrain_r",
            StageKind::Regressor,
            &[Reg],
            DataFilter::All,
            (Real, Real),
            StageWeights::NONE,
            epochs[0],
        ),
        StageConfig::new(
            "gan",
            StageKind::Gan,
            &[GenVis, GenPmw, DiscVis, DiscPmw],
            DataFilter::All,
            (Generated, Generated),
            StageWeights {
                vis: Some(LossWeights::VIS),
                pmw: Some(LossWeights::PMW),
            },
            epochs[1],
        ),
        StageConfig::new(
            "finetune_r",
            StageKind::Regressor,
            &[Reg],
            DataFilter::All,
            (Generated, Generated),
            StageWeights::NONE,
            epochs[2],
        ),
    ])
}

/// Epoch budgets for the three-stage protocol, which has no published table;
/// they mirror the first pre-training, the VIS GAN and the fine-tuning rows.
pub const THREE_STAGE_EPOCHS: [usize; 3] = [70, 500, 300];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    /// Random rotation augmentation of every training sample.
    pub rotate: bool,
    pub adam: AdamConfig,
    /// Learning-rate override for the regressor's optimizer.
    pub regressor_lr: Option<f64>,
    pub loss: LossOptions,
    /// Stop a stage after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Divides hidden widths of every network.
    pub width_divisor: usize,
    pub qc: QcThresholds,
    /// Fresh discriminator weights at the start of every GAN stage after the
    /// first; by default they persist.
    pub reinit_discriminators: bool,
    /// Directory for the resumable training state, written each epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Directory for the JSON-lines step log and the per-epoch CSV.
    pub log_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            seed: 0,
            rotate: true,
            adam: AdamConfig::default(),
            regressor_lr: None,
            loss: LossOptions::default(),
            patience: None,
            width_divisor: 1,
            qc: QcThresholds::default(),
            reinit_discriminators: false,
            checkpoint_dir: None,
            log_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch statistics".into()));
        }
        if self.width_divisor == 0 {
            return Err(Error::Config("width_divisor must be positive".into()));
        }
        let lr = self.regressor_lr.unwrap_or(self.adam.lr);
        if !(self.adam.lr > 0.0 && lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

