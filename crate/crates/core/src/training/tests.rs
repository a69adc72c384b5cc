use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{generate_synthetic, Dataset, SplitTag, SyntheticConfig, TCFrame};
use crate::imaging::resample;
use crate::layers::TensorRole;
use crate::losses::{composite_losses, TargetKind};
use crate::qc::ChannelStats;
use crate::tensor::{Scalar, Tensor};

fn shrink(f: &TCFrame, size: usize) -> TCFrame {
    let mut g = f.clone();
    g.ir1 = resample(&f.ir1, size).unwrap();
    g.wv = resample(&f.wv, size).unwrap();
    g.vis = resample(&f.vis, size).unwrap();
    g.pmw = resample(&f.pmw, size).unwrap();
    g
}

/// Synthetic storms shrunk to `size` pixels, split into train and valid.
fn toy_sets(n: usize, size: usize) -> (Dataset, Dataset) {
    let syn = generate_synthetic(&SyntheticConfig {
        n_frames: n,
        frames_per_storm: 6,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let frames: Vec<TCFrame> = syn.dataset.frames().iter().map(|f| shrink(f, size)).collect();
    let cut = n * 3 / 4;
    (
        Dataset::new(frames[..cut].to_vec(), SplitTag::Train).unwrap(),
        Dataset::new(frames[cut..].to_vec(), SplitTag::Valid).unwrap(),
    )
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn toy_trainer(cfg: TrainConfig, epochs: [usize; 5]) -> Trainer<f32> {
    let (train, valid) = toy_sets(48, 8);
    Trainer::new(cfg, five_stage_schedule(epochs), &ModelSpecs::toy(), &train, &valid).unwrap()
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn five_stage_schedule_matches_published_table() {
    let s = five_stage_schedule(FIVE_STAGE_EPOCHS);
    let epochs: Vec<_> = s.iter().map(|x| x.max_epochs).collect();
    assert_eq!(epochs, [70, 500, 100, 200, 300]);
    let ids: Vec<_> = s.iter().map(|x| x.stage_id).collect();
    assert_eq!(ids, [1, 2, 3, 4, 5]);
    for st in &s {
        st.validate().unwrap();
    }

    let vis = s[1].weights.vis.unwrap();
    assert_eq!((vis.alpha, vis.beta, vis.gamma), (1000.0, 1e-4, 0.002));
    assert!(s[1].weights.pmw.is_none());
    let pmw = s[3].weights.pmw.unwrap();
    assert_eq!((pmw.alpha, pmw.beta, pmw.gamma), (10.0, 1e-3, 0.0));
    assert!(s[3].weights.vis.is_none());

    use NetworkName::*;
    assert_eq!(s[1].trainable, [GenVis, DiscVis]);
    assert_eq!(s[3].trainable, [GenPmw, DiscPmw]);
    for i in [0, 2, 4] {
        assert_eq!(s[i].trainable, [Regressor]);
        assert_eq!(s[i].kind, StageKind::Regressor);
    }
    let filters: Vec<_> = s.iter().map(|x| x.data_filter).collect();
    assert_eq!(
        filters,
        [DataFilter::GoodVisOnly, DataFilter::GoodVisOnly, DataFilter::All, DataFilter::All, DataFilter::All]
    );
    let pmw_src: Vec<_> = s.iter().map(|x| x.pmw_source_for_lregr).collect();
    assert_eq!(pmw_src, [Real, Real, Real, Generated, Generated]);
    let vis_src: Vec<_> = s.iter().map(|x| x.vis_source_for_lregr).collect();
    assert_eq!(vis_src, [Real, Generated, Generated, Generated, Generated]);
}

#[test]
fn three_stage_schedule_is_valid() {
    let s = three_stage_schedule(THREE_STAGE_EPOCHS);
    assert_eq!(s.len(), 3);
    for st in &s {
        st.validate().unwrap();
    }
    assert_eq!(s[1].trainable.len(), 4);
    assert!(s[1].weights.vis.is_some() && s[1].weights.pmw.is_some());
}

#[test]
fn stage_validation_rejects_bad_freezes() {
    let base = five_stage_schedule([1; 5]);

    let mut s = base[1].clone();
    s.trainable.push(NetworkName::Regressor);
    s.frozen.retain(|&n| n != NetworkName::Regressor);
    assert!(s.validate().is_err(), "regressor trained in a GAN stage");

    let mut s = base[1].clone();
    s.trainable.retain(|&n| n != NetworkName::DiscVis);
    s.frozen.push(NetworkName::DiscVis);
    assert!(s.validate().is_err(), "generator without its discriminator");

    let mut s = base[0].clone();
    s.frozen.push(NetworkName::Regressor);
    assert!(s.validate().is_err(), "network both trainable and frozen");

    let mut s = base[3].clone();
    s.weights.pmw = None;
    assert!(s.validate().is_err(), "missing weights");

    let mut s = base[1].clone();
    s.vis_source_for_lregr = Source::Real;
    assert!(s.validate().is_err(), "trained generator must feed the regressor");
}

#[test]
fn batches_per_epoch_drops_singletons() {
    assert_eq!(batches_per_epoch(10, 4), 3);
    assert_eq!(batches_per_epoch(9, 4), 2);
    assert_eq!(batches_per_epoch(8, 4), 2);
    assert_eq!(batches_per_epoch(1, 4), 0);
    assert_eq!(batches_per_epoch(0, 4), 0);
    assert_eq!(batches_per_epoch(5, 1), 0);
}

#[derive(Default)]
struct Audit {
    start: std::collections::HashMap<(usize, NetworkName), Vec<(String, Vec<f32>)>>,
    frozen_changed: Vec<String>,
    trained_unchanged: Vec<String>,
    batches: Vec<usize>,
    bad_qc: usize,
    routing_errors: Vec<String>,
}

impl Observer<f32> for Audit {
    fn stage_start(&mut self, stage: &StageConfig, models: &mut Models<f32>) {
        for n in NetworkName::ALL {
            self.start.insert((stage.stage_id, n), models.snapshot(n));
        }
        self.batches.push(0);
    }

    fn batch(&mut self, stage: &StageConfig, batch: &Batch<f32>, trace: &StepTrace<f32>) {
        *self.batches.last_mut().unwrap() += 1;
        if stage.data_filter == DataFilter::GoodVisOnly && batch.vis_good.iter().any(|g| !g) {
            self.bad_qc += 1;
        }
        let pmw_in = trace.regr_input.channel(3);
        let vis_in = trace.regr_input.channel(2);
        let ok_pmw = match stage.pmw_source_for_lregr {
            Source::Real => pmw_in.bit_eq(&batch.pmw) && trace.generated_pmw.is_none(),
            Source::Generated => trace.generated_pmw.as_ref().is_some_and(|g| pmw_in.bit_eq(g)) && !pmw_in.bit_eq(&batch.pmw),
        };
        let ok_vis = match stage.vis_source_for_lregr {
            Source::Real => vis_in.bit_eq(&batch.vis),
            Source::Generated => trace.generated_vis.as_ref().is_some_and(|g| vis_in.bit_eq(g)),
        };
        if !(ok_pmw && ok_vis) {
            self.routing_errors.push(format!("stage {}", stage.stage_id));
        }
    }

    fn stage_end(&mut self, stage: &StageConfig, models: &mut Models<f32>) {
        for n in NetworkName::ALL {
            let before = &self.start[&(stage.stage_id, n)];
            let after = models.snapshot(n);
            let same = before == &after;
            if stage.is_trainable(n) && same {
                self.trained_unchanged.push(format!("stage {} {n}", stage.stage_id));
            }
            if !stage.is_trainable(n) && !same {
                self.frozen_changed.push(format!("stage {} {n}", stage.stage_id));
            }
        }
    }
}

#[test]
fn five_stage_protocol_on_toy_networks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(3);
    cfg.log_dir = Some(dir.path().join("logs"));
    let mut t = toy_trainer(cfg, [2, 2, 1, 2, 2]);
    let planned = t.planned_steps();
    let good = t.train_set().indices(DataFilter::GoodVisOnly).len();
    assert!(good >= 2 && good < t.train_set().len(), "toy set needs a mixed QC outcome, got {good}");

    let mut audit = Audit::default();
    let out = t.run(&mut audit).unwrap();

    assert!(audit.frozen_changed.is_empty(), "frozen networks changed: {:?}", audit.frozen_changed);
    assert!(audit.trained_unchanged.is_empty(), "trained networks idle: {:?}", audit.trained_unchanged);
    assert_eq!(audit.bad_qc, 0, "loop 1 saw QC-failing frames");
    assert!(audit.routing_errors.is_empty(), "routing: {:?}", audit.routing_errors);
    assert_eq!(audit.batches.iter().map(|&b| b as u64).collect::<Vec<_>>(), planned);
    assert_eq!(out.steps, planned.iter().sum::<u64>());

    assert_eq!(out.history.len(), 9);
    let logged = read_epoch_log(&dir.path().join("logs").join(EPOCH_LOG)).unwrap();
    assert_eq!(logged, out.history);
    let steps = fs::read_to_string(dir.path().join("logs").join(STEP_LOG)).unwrap();
    assert_eq!(steps.lines().count() as u64, out.steps);
    assert!(out.history.iter().all(|r| r.val_mse.is_some_and(f64::is_finite)));
}

#[test]
fn gan_stage_fails_without_good_frames() {
    let (train, valid) = toy_sets(24, 8);
    let mut cfg = toy_config(0);
    cfg.qc.mean = (2.0, 3.0);
    let err = Trainer::<f32>::new(cfg, five_stage_schedule([1; 5]), &ModelSpecs::toy(), &train, &valid)
        .err()
        .expect("no frame passes QC");
    assert!(err.to_string().contains("quality control"), "{err}");
}

fn run_to_dir(seed: u64, dir: &Path) -> Vec<EpochRow> {
    let mut cfg = toy_config(seed);
    cfg.log_dir = Some(dir.join("logs"));
    let mut t = toy_trainer(cfg, [1, 2, 1, 2, 1]);
    let out = t.run(&mut NullObserver).unwrap();
    t.save_bundle(&dir.join("model"), "final").unwrap();
    out.history
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = run_to_dir(11, a.path());
    let hb = run_to_dir(11, b.path());
    assert_eq!(ha, hb);
    assert_eq!(read_dir_bytes(&a.path().join("logs")), read_dir_bytes(&b.path().join("logs")));
    assert_eq!(read_dir_bytes(&a.path().join("model")), read_dir_bytes(&b.path().join("model")));

    run_to_dir(12, c.path());
    assert_ne!(read_dir_bytes(&a.path().join("model")), read_dir_bytes(&c.path().join("model")));
}

#[test]
fn resume_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = toy_sets(48, 8);
    let cfg = toy_config(5);
    let sched = five_stage_schedule([1, 2, 1, 2, 1]);
    let mut a = Trainer::<f32>::new(cfg, sched, &ModelSpecs::toy(), &train, &valid).unwrap();
    // stop inside the VIS GAN stage
    for _ in 0..2 {
        assert!(a.step_epoch(&mut NullObserver).unwrap());
    }
    let s1 = dir.path().join("s1.ckpt");
    a.save_state(&s1).unwrap();
    let mut b = Trainer::<f32>::resume(&s1, &train, &valid).unwrap();
    let s2 = dir.path().join("s2.ckpt");
    b.save_state(&s2).unwrap();
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());

    let ha = a.run(&mut NullObserver).unwrap();
    let hb = b.run(&mut NullObserver).unwrap();
    assert_eq!(ha.history, hb.history);
    a.save_bundle(&dir.path().join("a"), "final").unwrap();
    b.save_bundle(&dir.path().join("b"), "final").unwrap();
    assert_eq!(read_dir_bytes(&dir.path().join("a")), read_dir_bytes(&dir.path().join("b")));
}

#[test]
fn resume_rejects_other_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let (train, valid) = toy_sets(48, 8);
    let mut t = Trainer::<f32>::new(toy_config(0), five_stage_schedule([1; 5]), &ModelSpecs::toy(), &train, &valid).unwrap();
    let p = dir.path().join("state.ckpt");
    t.save_state(&p).unwrap();
    let (big_train, big_valid) = toy_sets(48, 16);
    let err = Trainer::<f32>::resume(&p, &big_train, &big_valid).err().expect("size mismatch");
    assert!(err.to_string().contains("spec hash mismatch"), "{err}");
    assert!(err.to_string().contains("image size 8"), "{err}");
}

#[test]
fn full_rotation_matches_no_rotation() {
    let (train, _) = toy_sets(24, 8);
    let set = PreparedSet::new(&train, &ChannelStats::fit(&train).unwrap(), &Default::default()).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let a: Batch<f32> = set.batch(&idx, &[0.0; 6]).unwrap();
    let b: Batch<f32> = set.batch(&idx, &[360.0; 6]).unwrap();
    for (x, y) in [(&a.ir1, &b.ir1), (&a.wv, &b.wv), (&a.vis, &b.vis), (&a.pmw, &b.pmw)] {
        let d = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(d < 1e-5, "max difference {d}");
    }
}

// Finite-difference checks of the composite objectives in f64.

const EPS: f64 = 1e-6;
const PER_TENSOR: usize = 6;

fn fd_models() -> (Models<f64>, Batch<f64>) {
    let (train, _) = toy_sets(24, 8);
    let stats = ChannelStats::fit(&train).unwrap();
    let set = PreparedSet::new(&train, &stats, &Default::default()).unwrap();
    let idx: Vec<usize> = (0..4).collect();
    let batch = set.batch(&idx, &[0.0, 30.0, 75.0, 200.0]).unwrap();
    let mut models = Models::<f64>::build(&ModelSpecs::toy(), 8, 9).unwrap();
    models.regressor.set_target_scale(50.0, 20.0).unwrap();
    (models, batch)
}

fn zero_grads(models: &mut Models<f64>) {
    for n in NetworkName::ALL {
        models.visit(n, &mut |_, _, p| p.zero_grad());
    }
}

fn set_stage(models: &mut Models<f64>, stage: &StageConfig) {
    for n in NetworkName::ALL {
        models.set_trainable(n, stage.is_trainable(n));
    }
}

/// Compares the analytic gradient of `net` left by `objective` with central
/// differences of its returned value, on a spread of entries of every
/// trainable tensor.
fn check_fd(
    models: &mut Models<f64>,
    net: NetworkName,
    mut objective: impl FnMut(&mut Models<f64>, &mut ChaCha8Rng) -> f64,
) {
    zero_grads(models);
    objective(models, &mut ChaCha8Rng::seed_from_u64(1));
    let mut tensors = Vec::new();
    models.visit(net, &mut |n, role, p| {
        if role == TensorRole::Trainable {
            tensors.push((n.to_string(), p.len(), p.grad.clone()));
        }
    });
    assert!(!tensors.is_empty());
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, len, grad) in &tensors {
        let step = (len / PER_TENSOR).max(1);
        for i in (0..*len).step_by(step).take(PER_TENSOR) {
            let mut eval = |d: f64| {
                models.visit(net, &mut |n, _, p| {
                    if n == name {
                        p.value[i] += d;
                    }
                });
                let v = objective(models, &mut ChaCha8Rng::seed_from_u64(1));
                models.visit(net, &mut |n, _, p| {
                    if n == name {
                        p.value[i] -= d;
                    }
                });
                v
            };
            let (lp, lm) = (eval(EPS), eval(-EPS));
            analytic.push(grad[i]);
            numeric.push((lp - lm) / (2.0 * EPS));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(scale > 0.0, "{net}: zero gradient");
    let e = diff / scale;
    assert!(e < 1e-4, "{net}: relative error {e}");
}

#[test]
fn composite_r_gradient_matches_finite_differences() {
    let (mut models, batch) = fd_models();
    let sched = five_stage_schedule([1; 5]);
    for stage in [&sched[0], &sched[4]] {
        set_stage(&mut models, stage);
        check_fd(&mut models, NetworkName::Regressor, |m, rng| {
            regr_objective(m, stage, &batch, ChannelSet::ALL, rng).unwrap().0
        });
    }
}

#[test]
fn composite_d_gradient_matches_finite_differences() {
    let (mut models, batch) = fd_models();
    let opts = crate::losses::LossOptions::default();
    let m2n_fake = [10.0, 250.0, 120.0, 0.0];
    let sched = five_stage_schedule([1; 5]);
    for (stage, kind, net) in [
        (&sched[1], TargetKind::Vis, NetworkName::DiscVis),
        (&sched[3], TargetKind::Pmw, NetworkName::DiscPmw),
    ] {
        set_stage(&mut models, stage);
        let w = match kind {
            TargetKind::Vis => stage.weights.vis.unwrap(),
            TargetKind::Pmw => stage.weights.pmw.unwrap(),
        };
        check_fd(&mut models, net, |m, rng| {
            let parts = disc_objective(m, kind, &batch, w, &opts, &m2n_fake, rng).unwrap();
            composite_losses(parts, w, kind).unwrap().composite_d
        });
    }
}

#[test]
fn composite_g_gradient_matches_finite_differences() {
    let (mut models, batch) = fd_models();
    let opts = crate::losses::LossOptions::default();
    let m2n_fake = [10.0, 250.0, 120.0, 0.0];
    let sched = five_stage_schedule([1; 5]);

    let vis_stage = &sched[1];
    set_stage(&mut models, vis_stage);
    let w = vis_stage.weights.vis.unwrap();
    check_fd(&mut models, NetworkName::GenVis, |m, rng| {
        let (out, _) = gen_objective(m, vis_stage, &batch, Some(&batch), &opts, &m2n_fake, rng).unwrap();
        composite_losses(out.vis.unwrap(), w, TargetKind::Vis).unwrap().composite_g
    });

    let pmw_stage = &sched[3];
    set_stage(&mut models, pmw_stage);
    let w = pmw_stage.weights.pmw.unwrap();
    check_fd(&mut models, NetworkName::GenPmw, |m, rng| {
        let (out, _) = gen_objective(m, pmw_stage, &batch, None, &opts, &m2n_fake, rng).unwrap();
        composite_losses(out.pmw.unwrap(), w, TargetKind::Pmw).unwrap().composite_g
    });
}

#[test]
fn joint_stage_routes_both_generators() {
    let (mut models, batch) = fd_models();
    let opts = crate::losses::LossOptions::default();
    let stage = &three_stage_schedule([1; 3])[1];
    set_stage(&mut models, stage);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, trace) = gen_objective(&mut models, stage, &batch, Some(&batch), &opts, &[0.0; 4], &mut rng).unwrap();
    assert!(out.vis.is_some() && out.pmw.is_some());
    let x: &Tensor<f64> = &trace.regr_input;
    assert!(x.channel(2).bit_eq(trace.generated_vis.as_ref().unwrap()));
    assert!(x.channel(3).bit_eq(trace.generated_pmw.as_ref().unwrap()));
    assert!(out.vis.unwrap().l_regr.f64() > 0.0);
}
