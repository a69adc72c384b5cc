//! Stage-by-stage training driver with validation, logs and resumable state.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, M2N_MAX};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::losses::{composite_losses, LossParts, LossReport, TargetKind};
use crate::nets::checkpoint::{load_params, read_container, write_container};
use crate::nets::NetworkName;
use crate::optim::{Adam, AdamConfig};
use crate::qc::ChannelStats;
use crate::tensor::Scalar;

use super::data::{batches_per_epoch, draw_angles, Batch, ChannelSet, PreparedSet};
use super::models::{network_seed, write_bundle, ModelBundle, ModelSpecs, Models};
use super::step::{disc_objective, gen_objective, regr_objective, routed_input, StepTrace};
use super::{DataFilter, Source, StageConfig, StageKind, StageWeights, TrainConfig};

pub const TRAIN_LOG_VERSION: &str = "# tcgan train-log v1";
const STATE_VERSION: u32 = 1;
pub const STEP_LOG: &str = "steps.jsonl";
pub const EPOCH_LOG: &str = "epochs.csv";
const EPOCH_COLUMNS: [&str; 16] = [
    "stage",
    "label",
    "epoch",
    "step",
    "target",
    "l_disc",
    "l_gen",
    "l_l2",
    "l_m2n_d",
    "l_m2n_g",
    "l_regr",
    "composite_d",
    "composite_g",
    "composite_r",
    "val_mse",
    "val_mse_stage",
];

/// Mean losses of one epoch for one target, with validation MSEs in kt^2.
///
/// `val_mse` follows the operational path (generated VIS and PMW unless the
/// trainer says otherwise); `val_mse_stage` uses the stage's own routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage_id: usize,
    pub label: String,
    /// 1-based within the stage.
    pub epoch: usize,
    /// Global optimizer steps completed.
    pub step: u64,
    /// `regressor`, `vis` or `pmw`.
    pub target: String,
    pub report: LossReport,
    pub val_mse: Option<f64>,
    pub val_mse_stage: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestVal {
    pub epoch: usize,
    pub val_mse: f64,
}

/// Everything besides network weights and optimizer moments needed to
/// continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Index into the schedule of the stage in progress.
    pub stage_index: usize,
    /// Completed epochs per stage.
    pub stage_epochs: Vec<usize>,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRow>,
    /// Best stage-routed validation MSE per stage.
    pub best: Vec<Option<BestVal>>,
    /// Epochs since the current stage last improved.
    pub stale: usize,
    /// Whether the stage in progress stopped early.
    pub stopped_early: Vec<bool>,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRow>,
    pub steps: u64,
    pub best: Vec<Option<BestVal>>,
}

/// Hooks into the training loop, used for tracing and invariant checks.
pub trait Observer<T: Scalar> {
    fn stage_start(&mut self, _stage: &StageConfig, _models: &mut Models<T>) {}
    fn batch(&mut self, _stage: &StageConfig, _batch: &Batch<T>, _trace: &StepTrace<T>) {}
    fn epoch_end(&mut self, _rows: &[EpochRow]) {}
    fn stage_end(&mut self, _stage: &StageConfig, _models: &mut Models<T>) {}
}

pub struct NullObserver;

impl<T: Scalar> Observer<T> for NullObserver {}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    state_version: u32,
    image_size: usize,
    specs: ModelSpecs,
    spec_hashes: BTreeMap<String, String>,
    config: TrainConfig,
    schedule: Vec<StageConfig>,
    channels: ChannelSet,
    eval_sources: (Source, Source),
    stats: ChannelStats,
    train_frames: usize,
    valid_frames: usize,
    adam: Vec<(NetworkName, AdamConfig, u64)>,
    state: TrainState,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub schedule: Vec<StageConfig>,
    pub models: Models<T>,
    pub stats: ChannelStats,
    /// Regressor input channels; the rest are zeroed.
    pub channels: ChannelSet,
    /// VIS and PMW routing of `val_mse`.
    pub eval_sources: (Source, Source),
    pub state: TrainState,
    train: PreparedSet,
    valid: PreparedSet,
    adam: Vec<(NetworkName, Adam<T>)>,
}

fn image_size(ds: &Dataset) -> Result<usize> {
    let (h, w) = ds
        .image_size()
        .ok_or_else(|| Error::Training("training set is empty".into()))?;
    if h != w {
        return Err(Error::Shape(format!("frames must be square, got {h}x{w}")));
    }
    Ok(h)
}

fn spec_hashes(specs: &ModelSpecs, size: usize) -> BTreeMap<String, String> {
    NetworkName::ALL
        .iter()
        .map(|&n| (n.to_string(), specs.get(n).spec_hash(size)))
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl<T: Scalar> Trainer<T> {
    /// Prepares a fresh run: fits channel scaling and the regressor's output
    /// scale on `train`, builds every network from `config.seed`, and checks
    /// that each stage has at least one batch.
    pub fn new(
        config: TrainConfig,
        schedule: Vec<StageConfig>,
        specs: &ModelSpecs,
        train: &Dataset,
        valid: &Dataset,
    ) -> Result<Self> {
        Self::with_channels(config, schedule, specs, train, valid, ChannelSet::ALL, (Source::Generated, Source::Generated))
    }

    pub fn with_channels(
        config: TrainConfig,
        schedule: Vec<StageConfig>,
        specs: &ModelSpecs,
        train: &Dataset,
        valid: &Dataset,
        channels: ChannelSet,
        eval_sources: (Source, Source),
    ) -> Result<Self> {
        let size = image_size(train)?;
        let stats = ChannelStats::fit(train)?;
        let mut models = Models::build(specs, size, config.seed)?;
        let vmax: Vec<f64> = train.frames().iter().map(|f| f.meta.vmax).collect();
        let (m, s) = mean_std(&vmax);
        models.regressor.set_target_scale(m, if s > 0.0 { s } else { 1.0 })?;
        let state = TrainState {
            stage_index: 0,
            stage_epochs: vec![0; schedule.len()],
            global_step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            history: Vec::new(),
            best: vec![None; schedule.len()],
            stale: 0,
            stopped_early: vec![false; schedule.len()],
        };
        let t = Self::assemble(config, schedule, models, stats, channels, eval_sources, state, train, valid)?;
        if let Some(dir) = &t.config.log_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for f in [STEP_LOG, EPOCH_LOG] {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        schedule: Vec<StageConfig>,
        models: Models<T>,
        stats: ChannelStats,
        channels: ChannelSet,
        eval_sources: (Source, Source),
        state: TrainState,
        train: &Dataset,
        valid: &Dataset,
    ) -> Result<Self> {
        config.validate()?;
        if schedule.is_empty() {
            return Err(Error::Config("empty stage schedule".into()));
        }
        for (i, s) in schedule.iter().enumerate() {
            s.validate()?;
            if s.stage_id != i + 1 {
                return Err(Error::Config(format!("stage {} listed at position {}", s.stage_id, i + 1)));
            }
            if s.kind == StageKind::Gan && channels != ChannelSet::ALL {
                return Err(Error::Config("GAN stages need all four regressor channels".into()));
            }
        }
        let size = image_size(train)?;
        if let Some((h, w)) = valid.image_size() {
            if (h, w) != (size, size) {
                return Err(Error::Shape(format!("validation frames are {h}x{w}, training frames {size}x{size}")));
            }
        }
        let needs_pmw = channels.pmw
            && schedule.iter().any(|s| {
                s.pmw_source_for_lregr == Source::Real || s.is_trainable(NetworkName::GenPmw)
            });
        if needs_pmw {
            if let Some(f) = train.frames().iter().find(|f| !f.pmw_present) {
                return Err(Error::Training(format!(
                    "frame {} {} has no PMW channel; training needs PMW for every frame",
                    f.meta.tc_id, f.meta.utc_time
                )));
            }
        }
        let train = PreparedSet::new(train, &stats, &config.qc)?;
        let valid = PreparedSet::new(valid, &stats, &config.qc)?;
        for s in &schedule {
            let n = train.indices(s.data_filter).len();
            if s.max_epochs > 0 && batches_per_epoch(n, config.batch_size) == 0 {
                let why = match s.data_filter {
                    DataFilter::GoodVisOnly => "frames pass VIS quality control",
                    DataFilter::All => "training frames",
                };
                return Err(Error::Training(format!(
                    "stage {} ({}): only {n} {why}; a batch needs at least 2",
                    s.stage_id, s.label
                )));
            }
        }
        Ok(Trainer {
            config,
            schedule,
            models,
            stats,
            channels,
            eval_sources,
            state,
            train,
            valid,
            adam: Vec::new(),
        })
    }

    /// Hands the networks and channel scaling over for inference.
    pub fn into_bundle(self) -> ModelBundle<T> {
        ModelBundle {
            models: self.models,
            stats: self.stats,
        }
    }

    pub fn train_set(&self) -> &PreparedSet {
        &self.train
    }

    pub fn valid_set(&self) -> &PreparedSet {
        &self.valid
    }

    /// Optimizer steps each stage will take when it runs to `max_epochs`.
    pub fn planned_steps(&self) -> Vec<u64> {
        self.schedule
            .iter()
            .map(|s| {
                let b = batches_per_epoch(self.train.indices(s.data_filter).len(), self.config.batch_size);
                (s.max_epochs * b) as u64
            })
            .collect()
    }

    pub fn is_finished(&self) -> bool {
        self.state.stage_index >= self.schedule.len()
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self, obs: &mut dyn Observer<T>) -> Result<TrainOutcome> {
        while self.step_epoch(obs)? {}
        Ok(TrainOutcome {
            history: self.state.history.clone(),
            steps: self.state.global_step,
            best: self.state.best.clone(),
        })
    }

    fn apply_freeze(&mut self, stage: &StageConfig) {
        for n in NetworkName::ALL {
            self.models.set_trainable(n, stage.is_trainable(n));
        }
    }

    fn adam_config(&self, n: NetworkName) -> AdamConfig {
        let mut c = self.config.adam;
        if n == NetworkName::Regressor {
            if let Some(lr) = self.config.regressor_lr {
                c.lr = lr;
            }
        }
        c
    }

    fn begin_stage(&mut self, stage: &StageConfig, obs: &mut dyn Observer<T>) -> Result<()> {
        let idx = stage.stage_id - 1;
        if self.config.reinit_discriminators && stage.kind == StageKind::Gan {
            let earlier_gan = self.schedule[..idx].iter().any(|s| s.kind == StageKind::Gan);
            if earlier_gan {
                for d in [NetworkName::DiscVis, NetworkName::DiscPmw] {
                    if stage.is_trainable(d) {
                        let seed = network_seed(self.config.seed, d).wrapping_add(1000 * stage.stage_id as u64);
                        self.models.reinit_discriminator(d, seed)?;
                    }
                }
            }
        }
        self.adam = stage
            .trainable
            .iter()
            .map(|&n| (n, Adam::new(self.adam_config(n))))
            .collect();
        self.state.stale = 0;
        log::info!("stage {} ({}): up to {} epochs", stage.stage_id, stage.label, stage.max_epochs);
        obs.stage_start(stage, &mut self.models);
        Ok(())
    }

    fn optimizer_step(&mut self, nets: &[NetworkName]) {
        for (n, adam) in self.adam.iter_mut() {
            if nets.contains(n) {
                let models = &mut self.models;
                let name = *n;
                adam.step(|f| models.visit(name, f));
            }
        }
    }

    /// Runs one epoch of the current stage; returns false once the schedule
    /// is complete.
    pub fn step_epoch(&mut self, obs: &mut dyn Observer<T>) -> Result<bool> {
        let Some(stage) = self.schedule.get(self.state.stage_index).cloned() else {
            return Ok(false);
        };
        let idx = self.state.stage_index;
        self.apply_freeze(&stage);
        if self.state.stage_epochs[idx] == 0 {
            self.begin_stage(&stage, obs)?;
        }
        if stage.max_epochs == 0 {
            self.end_stage(&stage, obs)?;
            return Ok(true);
        }
        let epoch = self.state.stage_epochs[idx] + 1;
        let order = self
            .train
            .epoch_order(stage.data_filter, self.config.batch_size, &mut self.state.rng);
        if order.is_empty() {
            return Err(Error::Training(format!("stage {}: empty batch stream", stage.stage_id)));
        }
        let mut sums: Vec<(String, LossReport, usize)> = Vec::new();
        for ids in order {
            let angles = draw_angles(ids.len(), self.config.rotate, &mut self.state.rng);
            let batch = self.train.batch::<T>(&ids, &angles)?;
            let (reports, trace) = match stage.kind {
                StageKind::Regressor => self.regressor_step(&stage, &batch)?,
                StageKind::Gan => self.gan_step(&stage, &batch)?,
            };
            self.state.global_step += 1;
            self.log_step(&stage, epoch, &reports)?;
            for (target, r) in reports {
                match sums.iter_mut().find(|(t, _, _)| *t == target) {
                    Some((_, acc, k)) => {
                        add_report(acc, &r);
                        *k += 1;
                    }
                    None => sums.push((target, r, 1)),
                }
            }
            obs.batch(&stage, &batch, &trace);
        }

        let val_stage = self.validate((stage.vis_source_for_lregr, stage.pmw_source_for_lregr))?;
        let val = if self.eval_sources == (stage.vis_source_for_lregr, stage.pmw_source_for_lregr) {
            val_stage
        } else {
            self.validate(self.eval_sources)?
        };
        let rows: Vec<EpochRow> = sums
            .into_iter()
            .map(|(target, mut r, k)| {
                scale_report(&mut r, 1.0 / k as f64);
                EpochRow {
                    stage_id: stage.stage_id,
                    label: stage.label.clone(),
                    epoch,
                    step: self.state.global_step,
                    target,
                    report: r,
                    val_mse: val,
                    val_mse_stage: val_stage,
                }
            })
            .collect();
        self.log_epoch(&rows)?;
        log::info!(
            "stage {} epoch {epoch}/{}: val_mse {:?} (stage routing {:?})",
            stage.stage_id,
            stage.max_epochs,
            val,
            val_stage
        );
        self.state.history.extend(rows.iter().cloned());
        self.state.stage_epochs[idx] = epoch;

        let mut stop = epoch >= stage.max_epochs;
        if let Some(v) = val_stage {
            let improved = self.state.best[idx].map_or(true, |b| v < b.val_mse);
            if improved {
                self.state.best[idx] = Some(BestVal { epoch, val_mse: v });
                self.state.stale = 0;
                if let Some(dir) = self.config.checkpoint_dir.clone() {
                    self.save_bundle(&dir.join("best").join(format!("stage{}", stage.stage_id)), &stage.label)?;
                }
            } else {
                self.state.stale += 1;
                if self.config.patience.is_some_and(|p| self.state.stale >= p) && !stop {
                    log::info!("stage {}: no improvement for {} epochs, stopping", stage.stage_id, self.state.stale);
                    self.state.stopped_early[idx] = true;
                    stop = true;
                }
            }
        }
        if stop {
            self.end_stage(&stage, obs)?;
        }
        if let Some(dir) = self.config.checkpoint_dir.clone() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            self.save_state(&dir.join("state.ckpt"))?;
        }
        obs.epoch_end(&rows);
        Ok(true)
    }

    fn end_stage(&mut self, stage: &StageConfig, obs: &mut dyn Observer<T>) -> Result<()> {
        obs.stage_end(stage, &mut self.models);
        self.state.stage_index += 1;
        self.state.stale = 0;
        self.adam.clear();
        Ok(())
    }

    fn regressor_step(
        &mut self,
        stage: &StageConfig,
        batch: &Batch<T>,
    ) -> Result<(Vec<(String, LossReport)>, StepTrace<T>)> {
        let (l, trace) = regr_objective(&mut self.models, stage, batch, self.channels, &mut self.state.rng)?;
        self.optimizer_step(&[NetworkName::Regressor]);
        let report = LossReport {
            l_regr: l,
            composite_r: l,
            ..LossReport::default()
        };
        Ok((vec![("regressor".into(), report)], trace))
    }

    fn gan_step(&mut self, stage: &StageConfig, batch: &Batch<T>) -> Result<(Vec<(String, LossReport)>, StepTrace<T>)> {
        let StageWeights { vis: wv, pmw: wp } = stage.weights;
        let train_vis = stage.is_trainable(NetworkName::GenVis);
        let train_pmw = stage.is_trainable(NetworkName::GenPmw);
        let rng = &mut self.state.rng;

        let vis_batch = if train_vis {
            let good = batch.good_positions();
            if good.len() == batch.len() {
                Some(batch.clone())
            } else if good.len() >= 2 {
                Some(batch.subset(&good)?)
            } else {
                None
            }
        } else {
            None
        };
        let m2n_fake: Vec<f64> = vis_batch
            .as_ref()
            .map(|vb| (0..vb.len()).map(|_| rng.gen_range(0.0..=M2N_MAX)).collect())
            .unwrap_or_default();

        let opts = self.config.loss;
        let mut d_vis = LossParts::default();
        let mut d_pmw = LossParts::default();
        if let (Some(vb), Some(w)) = (&vis_batch, wv) {
            d_vis = disc_objective(&mut self.models, TargetKind::Vis, vb, w, &opts, &m2n_fake, rng)?;
        }
        if let (true, Some(w)) = (train_pmw, wp) {
            d_pmw = disc_objective(&mut self.models, TargetKind::Pmw, batch, w, &opts, &[], rng)?;
        }
        self.optimizer_step(&[NetworkName::DiscVis, NetworkName::DiscPmw]);

        let rng = &mut self.state.rng;
        let (g, trace) = gen_objective(&mut self.models, stage, batch, vis_batch.as_ref(), &opts, &m2n_fake, rng)?;
        self.optimizer_step(&[NetworkName::GenVis, NetworkName::GenPmw]);

        let mut reports = Vec::new();
        for (target, kind, d, g, w) in [
            ("vis", TargetKind::Vis, d_vis, g.vis, wv),
            ("pmw", TargetKind::Pmw, d_pmw, g.pmw, wp),
        ] {
            if let (Some(mut parts), Some(w)) = (g, w) {
                parts.l_disc = d.l_disc;
                parts.l_m2n_d = d.l_m2n_d;
                reports.push((target.to_string(), composite_losses(parts, w, kind)?));
            }
        }
        Ok((reports, trace))
    }

    /// Validation MSE in kt^2 with inference-mode networks at angle 0.
    fn validate(&mut self, sources: (Source, Source)) -> Result<Option<f64>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<usize> = (0..self.valid.len()).collect();
        let mut se = 0.0;
        for chunk in ids.chunks(self.config.batch_size) {
            let batch = self.valid.batch::<T>(chunk, &vec![0.0; chunk.len()])?;
            let trace = routed_input(&mut self.models, &batch, sources, self.channels, &mut rng)?;
            let mut ctx = Ctx {
                train: false,
                update_stats: false,
                rng: &mut rng,
            };
            let est = self.models.regressor.forward(&trace.regr_input, &batch.aux, &mut ctx)?;
            se += est
                .data()
                .iter()
                .zip(&batch.vmax)
                .map(|(e, t)| (e.f64() - t).powi(2))
                .sum::<f64>();
        }
        Ok(Some(se / self.valid.len() as f64))
    }

    fn log_step(&self, stage: &StageConfig, epoch: usize, reports: &[(String, LossReport)]) -> Result<()> {
        let Some(dir) = &self.config.log_dir else {
            return Ok(());
        };
        let path = dir.join(STEP_LOG);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for (target, r) in reports {
            let line = serde_json::json!({
                "stage": stage.stage_id,
                "label": stage.label,
                "epoch": epoch,
                "step": self.state.global_step,
                "target": target,
                "losses": r,
            });
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn log_epoch(&self, rows: &[EpochRow]) -> Result<()> {
        let Some(dir) = &self.config.log_dir else {
            return Ok(());
        };
        let path = dir.join(EPOCH_LOG);
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(f, "{TRAIN_LOG_VERSION}").map_err(|e| Error::io(&path, e))?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        if fresh {
            w.write_record(EPOCH_COLUMNS)?;
        }
        for r in rows {
            w.write_record(epoch_record(r))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Saves the current networks with the channel scaling as a model
    /// directory usable for inference.
    pub fn save_bundle(&mut self, dir: &Path, stage: &str) -> Result<()> {
        write_bundle(dir, &mut self.models, &self.stats, stage)
    }

    /// Serializes weights, optimizer moments, RNG and progress into one
    /// container file.
    pub fn save_state(&mut self, path: &Path) -> Result<()> {
        let specs = self.models.specs();
        let size = self.models.image_size();
        let meta = StateMeta {
            state_version: STATE_VERSION,
            image_size: size,
            spec_hashes: spec_hashes(&specs, size),
            specs,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            channels: self.channels,
            eval_sources: self.eval_sources,
            stats: self.stats.clone(),
            train_frames: self.train.len(),
            valid_frames: self.valid.len(),
            adam: self.adam.iter().map(|(n, a)| (*n, a.config, a.step)).collect(),
            state: self.state.clone(),
        };
        let mut tensors: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
        for n in NetworkName::ALL {
            self.models.visit(n, &mut |name, _, p| {
                tensors.push((format!("{n}/{name}"), p.shape.clone(), p.value.clone()))
            });
        }
        for (n, a) in &self.adam {
            for (kind, map) in [("m", &a.m), ("v", &a.v)] {
                for (name, vals) in map {
                    tensors.push((format!("adam/{n}/{kind}/{name}"), vec![vals.len()], vals.clone()));
                }
            }
        }
        let refs: Vec<_> = tensors
            .iter()
            .map(|(n, s, v)| (n.clone(), s.clone(), v.as_slice()))
            .collect();
        write_container(path, serde_json::to_value(meta)?, &refs)
    }

    /// Restores a run saved by [`Trainer::save_state`] against the same
    /// datasets. The stored specs must hash identically for the image size
    /// of `train`.
    pub fn resume(path: &Path, train: &Dataset, valid: &Dataset) -> Result<Self> {
        let ckpt_err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut c = read_container(path)?;
        if c.dtype != T::DTYPE {
            return Err(ckpt_err(format!("stored dtype {} but {} requested", c.dtype, T::DTYPE)));
        }
        let meta: StateMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| ckpt_err(format!("bad training state: {e}")))?;
        if meta.state_version != STATE_VERSION {
            return Err(ckpt_err(format!("unsupported state version {}", meta.state_version)));
        }
        let size = image_size(train)?;
        let hashes = spec_hashes(&meta.specs, size);
        if hashes != meta.spec_hashes {
            return Err(ckpt_err(format!(
                "spec hash mismatch: checkpoint built for image size {}, data is {size}",
                meta.image_size
            )));
        }
        if (train.len(), valid.len()) != (meta.train_frames, meta.valid_frames) {
            return Err(ckpt_err(format!(
                "checkpoint saw {}/{} train/valid frames, got {}/{}",
                meta.train_frames,
                meta.valid_frames,
                train.len(),
                valid.len()
            )));
        }
        let mut models = Models::<T>::build(&meta.specs, size, 0)?;
        for n in NetworkName::ALL {
            load_params(path, &format!("{n}/"), &mut c.tensors, |f| {
                models.visit(n, &mut |name, _, p| f(name, p))
            })?;
        }
        let mut adam = Vec::new();
        for (n, cfg, step) in &meta.adam {
            let mut a = Adam::<T>::new(*cfg);
            a.step = *step;
            let prefix = format!("adam/{n}/");
            let keys: Vec<String> = c.tensors.keys().filter(|k| k.starts_with(&prefix)).cloned().collect();
            for k in keys {
                let (_, vals) = c.tensors.remove(&k).expect("listed key");
                let rest = &k[prefix.len()..];
                let (kind, name) = rest
                    .split_once('/')
                    .ok_or_else(|| ckpt_err(format!("bad optimizer tensor {k}")))?;
                let vals: Vec<T> = vals.into_iter().map(T::of).collect();
                match kind {
                    "m" => a.m.insert(name.to_string(), vals),
                    "v" => a.v.insert(name.to_string(), vals),
                    _ => return Err(ckpt_err(format!("bad optimizer tensor {k}"))),
                };
            }
            adam.push((*n, a));
        }
        if let Some(extra) = c.tensors.keys().next() {
            return Err(ckpt_err(format!("unexpected tensor {extra}")));
        }
        let mut t = Self::assemble(
            meta.config,
            meta.schedule,
            models,
            meta.stats,
            meta.channels,
            meta.eval_sources,
            meta.state,
            train,
            valid,
        )?;
        t.adam = adam;
        Ok(t)
    }
}

fn add_report(acc: &mut LossReport, r: &LossReport) {
    acc.l_disc += r.l_disc;
    acc.l_gen += r.l_gen;
    acc.l_l2 += r.l_l2;
    acc.l_m2n_d += r.l_m2n_d;
    acc.l_m2n_g += r.l_m2n_g;
    acc.l_regr += r.l_regr;
    acc.composite_d += r.composite_d;
    acc.composite_g += r.composite_g;
    acc.composite_r += r.composite_r;
}

fn scale_report(r: &mut LossReport, s: f64) {
    for v in [
        &mut r.l_disc,
        &mut r.l_gen,
        &mut r.l_l2,
        &mut r.l_m2n_d,
        &mut r.l_m2n_g,
        &mut r.l_regr,
        &mut r.composite_d,
        &mut r.composite_g,
        &mut r.composite_r,
    ] {
        *v *= s;
    }
}

fn epoch_record(r: &EpochRow) -> Vec<String> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let p = &r.report;
    vec![
        r.stage_id.to_string(),
        r.label.clone(),
        r.epoch.to_string(),
        r.step.to_string(),
        r.target.clone(),
        p.l_disc.to_string(),
        p.l_gen.to_string(),
        p.l_l2.to_string(),
        p.l_m2n_d.to_string(),
        p.l_m2n_g.to_string(),
        p.l_regr.to_string(),
        p.composite_d.to_string(),
        p.composite_g.to_string(),
        p.composite_r.to_string(),
        opt(r.val_mse),
        opt(r.val_mse_stage),
    ]
}

/// Parses an epoch CSV written by the trainer.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRAIN_LOG_VERSION) {
        return Err(Error::InvalidInput(format!(
            "{}: missing `{TRAIN_LOG_VERSION}` header",
            path.display()
        )));
    }
    let body: String = lines.map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != EPOCH_COLUMNS {
        return Err(Error::InvalidInput(format!("{}: unexpected columns", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::InvalidInput(format!("{} row {}: bad {what}", path.display(), i + 1));
        let num = |k: usize| -> Result<f64> { rec[k].parse::<f64>().map_err(|_| bad(EPOCH_COLUMNS[k])) };
        let opt = |k: usize| -> Result<Option<f64>> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        rows.push(EpochRow {
            stage_id: rec[0].parse().map_err(|_| bad("stage"))?,
            label: rec[1].to_string(),
            epoch: rec[2].parse().map_err(|_| bad("epoch"))?,
            step: rec[3].parse().map_err(|_| bad("step"))?,
            target: rec[4].to_string(),
            report: LossReport {
                l_disc: num(5)?,
                l_gen: num(6)?,
                l_l2: num(7)?,
                l_m2n_d: num(8)?,
                l_m2n_g: num(9)?,
                l_regr: num(10)?,
                composite_d: num(11)?,
                composite_g: num(12)?,
                composite_r: num(13)?,
            },
            val_mse: opt(14)?,
            val_mse_stage: opt(15)?,
        });
    }
    Ok(rows)
}

/// Trains only a regressor on real channels restricted to `channels`, for
/// channel-combination baselines. Validation uses the same channels.
pub fn train_regressor_baseline<T: Scalar>(
    config: TrainConfig,
    specs: &ModelSpecs,
    channels: ChannelSet,
    epochs: usize,
    train: &Dataset,
    valid: &Dataset,
    obs: &mut dyn Observer<T>,
) -> Result<Trainer<T>> {
    let mut stage = StageConfig::new(
        "baseline_r",
        StageKind::Regressor,
        &[NetworkName::Regressor],
        DataFilter::All,
        (Source::Real, Source::Real),
        StageWeights::NONE,
        epochs,
    );
    stage.stage_id = 1;
    let mut t = Trainer::with_channels(
        config,
        vec![stage],
        specs,
        train,
        valid,
        channels,
        (Source::Real, Source::Real),
    )?;
    t.run(obs)?;
    Ok(t)
}

/// Writes `rows` in the epoch-log format.
pub fn write_epoch_log(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut buf = format!("{TRAIN_LOG_VERSION}\n").into_bytes();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        w.write_record(EPOCH_COLUMNS)?;
        for r in rows {
            w.write_record(epoch_record(r))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
