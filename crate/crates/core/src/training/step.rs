//! Per-batch objectives. Each runs forward and backward passes and leaves
//! the gradients of the networks it optimizes accumulated; the caller
//! applies the optimizer.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::losses::{
    disc_fake, disc_real, loss_gen_adv, loss_m2n, loss_reconstruction, loss_regr, LossOptions, LossParts,
    LossWeights, TargetKind,
};
use crate::nets::{Discriminator, NetworkName};
use crate::tensor::{Scalar, Tensor};

use super::data::{Batch, ChannelSet};
use super::models::Models;
use super::{Source, StageConfig};

fn ctx(rng: &mut ChaCha8Rng, train: bool, update_stats: bool) -> Ctx<'_> {
    Ctx {
        train,
        update_stats,
        rng,
    }
}

/// What the regressor saw on the l_regr pathway of one step.
#[derive(Debug, Clone)]
pub struct StepTrace<T> {
    /// `[N, 4, H, W]` as fed to the regressor.
    pub regr_input: Tensor<T>,
    /// Generated VIS fed to the regressor, when VIS was generated.
    pub generated_vis: Option<Tensor<T>>,
    /// Generated PMW fed to the regressor, when PMW was generated.
    pub generated_pmw: Option<Tensor<T>>,
}

/// Raw loss terms of one GAN step per trained target.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GanOutcome {
    pub vis: Option<LossParts>,
    pub pmw: Option<LossParts>,
}

fn zeros_m2n(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

/// Inference-mode VIS at m2n = 0 from a generator that is not being trained.
fn frozen_vis<T: Scalar>(models: &mut Models<T>, b: &Batch<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let x = models.gen_vis.input(&b.ir1, &b.wv, Some(&zeros_m2n(b.len())))?;
    models.gen_vis.forward(&x, &mut ctx(rng, false, false))
}

fn frozen_pmw<T: Scalar>(models: &mut Models<T>, b: &Batch<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let x = models.gen_pmw.input(&b.ir1, &b.wv, None)?;
    models.gen_pmw.forward(&x, &mut ctx(rng, false, false))
}

/// `[ir1, wv, vis, pmw]` with channels outside `channels` zeroed.
pub(crate) fn regressor_input<T: Scalar>(
    b: &Batch<T>,
    vis: &Tensor<T>,
    pmw: &Tensor<T>,
    channels: ChannelSet,
) -> Result<Tensor<T>> {
    let zero = Tensor::zeros(b.ir1.shape());
    let parts = [&b.ir1, &b.wv, vis, pmw];
    let kept: Vec<&Tensor<T>> = parts
        .iter()
        .zip(channels.mask())
        .map(|(&t, keep)| if keep { t } else { &zero })
        .collect();
    Tensor::concat_channels(&kept)
}

/// Regressor input for a stage's routing with every generator in inference
/// mode. Also returns the generated channels that were used.
pub(crate) fn routed_input<T: Scalar>(
    models: &mut Models<T>,
    b: &Batch<T>,
    sources: (Source, Source),
    channels: ChannelSet,
    rng: &mut ChaCha8Rng,
) -> Result<StepTrace<T>> {
    let gv = match sources.0 {
        Source::Generated if channels.vis => Some(frozen_vis(models, b, rng)?),
        _ => None,
    };
    let gp = match sources.1 {
        Source::Generated if channels.pmw => Some(frozen_pmw(models, b, rng)?),
        _ => None,
    };
    let x = regressor_input(b, gv.as_ref().unwrap_or(&b.vis), gp.as_ref().unwrap_or(&b.pmw), channels)?;
    Ok(StepTrace {
        regr_input: x,
        generated_vis: gv,
        generated_pmw: gp,
    })
}

/// Regressor stage objective: squared intensity error of the trainable
/// regressor on the routed input. Returns `l_regr` in kt^2.
pub fn regr_objective<T: Scalar>(
    models: &mut Models<T>,
    stage: &StageConfig,
    batch: &Batch<T>,
    channels: ChannelSet,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, StepTrace<T>)> {
    let sources = (stage.vis_source_for_lregr, stage.pmw_source_for_lregr);
    let trace = routed_input(models, batch, sources, channels, rng)?;
    let est = models
        .regressor
        .forward(&trace.regr_input, &batch.aux, &mut ctx(rng, true, true))?;
    let t = loss_regr(&batch.vmax, &est)?;
    models.regressor.backward(&t.grad, true)?;
    Ok((t.value, trace))
}

fn pair<T: Scalar>(
    models: &mut Models<T>,
    kind: TargetKind,
) -> (&mut crate::nets::Generator<T>, &mut Discriminator<T>) {
    match kind {
        TargetKind::Vis => (&mut models.gen_vis, &mut models.disc_vis),
        TargetKind::Pmw => (&mut models.gen_pmw, &mut models.disc_pmw),
    }
}

/// Discriminator objective for one target on `batch`: real frames scored
/// as real (plus the weighted m2n regression for VIS), generated frames as
/// fake. VIS fakes are conditioned on `m2n_fake`.
pub fn disc_objective<T: Scalar>(
    models: &mut Models<T>,
    kind: TargetKind,
    batch: &Batch<T>,
    weights: LossWeights,
    opts: &LossOptions,
    m2n_fake: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let (gen, disc) = pair(models, kind);
    let (target, cond) = match kind {
        TargetKind::Vis => (&batch.vis, Some(m2n_fake)),
        TargetKind::Pmw => (&batch.pmw, None),
    };
    let gx = gen.input(&batch.ir1, &batch.wv, cond)?;
    let fake = gen.forward(&gx, &mut ctx(rng, true, false))?;

    let mut parts = LossParts::default();
    let out = disc.forward(&Discriminator::input(&batch.ir1, &batch.wv, target)?, &mut ctx(rng, true, true))?;
    let real = disc_real(&out.patch, opts.adversarial);
    parts.l_disc = real.value;
    let d_m2n = match kind {
        TargetKind::Vis => {
            let m = loss_m2n(&out.m2n, &batch.m2n, opts.m2n_raw)?;
            parts.l_m2n_d = m.value;
            Some(m.grad.scale(T::of(weights.gamma)))
        }
        TargetKind::Pmw => None,
    };
    disc.backward(Some(&real.grad), d_m2n.as_ref(), true)?;

    let out = disc.forward(&Discriminator::input(&batch.ir1, &batch.wv, &fake)?, &mut ctx(rng, true, true))?;
    let f = disc_fake(&out.patch, opts.adversarial);
    parts.l_disc += f.value;
    disc.backward(Some(&f.grad), None, true)?;
    Ok(parts)
}

/// Generator objective of a GAN stage.
///
/// For a trained VIS generator, `vis_batch` (the QC-good part of `batch`,
/// if it has at least two frames) carries the adversarial and m2n terms,
/// conditioned on `m2n_fake`, and the reconstruction term, conditioned on
/// each frame's true m2n. The regressor term runs on all of `batch` with
/// VIS generated at m2n = 0. Each generator receives the gradient of its own
/// composite.
#[allow(clippy::too_many_arguments)]
pub fn gen_objective<T: Scalar>(
    models: &mut Models<T>,
    stage: &StageConfig,
    batch: &Batch<T>,
    vis_batch: Option<&Batch<T>>,
    opts: &LossOptions,
    m2n_fake: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(GanOutcome, StepTrace<T>)> {
    let train_vis = stage.is_trainable(NetworkName::GenVis);
    let train_pmw = stage.is_trainable(NetworkName::GenPmw);
    let missing = |t: &str| Error::Config(format!("stage {} trains {t} without weights", stage.stage_id));
    let mut outcome = GanOutcome::default();

    let mut vis_in: Option<Tensor<T>> = None;
    if train_vis {
        let w = stage.weights.vis.ok_or_else(|| missing("gen_vis"))?;
        let mut parts = LossParts::default();
        if let Some(vb) = vis_batch {
            // adversarial and m2n terms through the discriminator
            let x = models.gen_vis.input(&vb.ir1, &vb.wv, Some(m2n_fake))?;
            let fake = models.gen_vis.forward(&x, &mut ctx(rng, true, true))?;
            let out = models
                .disc_vis
                .forward(&Discriminator::input(&vb.ir1, &vb.wv, &fake)?, &mut ctx(rng, true, false))?;
            let g = loss_gen_adv(&out.patch, opts.adversarial);
            let m = loss_m2n(&out.m2n, m2n_fake, opts.m2n_raw)?;
            parts.l_gen = g.value;
            parts.l_m2n_g = m.value;
            let dx = models
                .disc_vis
                .backward(Some(&g.grad), Some(&m.grad.scale(T::of(w.gamma))), false)?;
            models.gen_vis.backward(&dx.channel(2), true)?;

            // reconstruction at the true m2n
            let x = models.gen_vis.input(&vb.ir1, &vb.wv, Some(&vb.m2n))?;
            let y = models.gen_vis.forward(&x, &mut ctx(rng, true, true))?;
            let l = loss_reconstruction(&vb.vis, &y, opts.reconstruction)?;
            parts.l_l2 = l.value;
            models.gen_vis.backward(&l.grad.scale(T::of(w.alpha)), true)?;
        }
        outcome.vis = Some(parts);
        let x = models.gen_vis.input(&batch.ir1, &batch.wv, Some(&zeros_m2n(batch.len())))?;
        vis_in = Some(models.gen_vis.forward(&x, &mut ctx(rng, true, true))?);
    } else if stage.vis_source_for_lregr == Source::Generated {
        vis_in = Some(frozen_vis(models, batch, rng)?);
    }

    let mut pmw_in: Option<Tensor<T>> = None;
    let mut d_pmw: Option<Tensor<T>> = None;
    if train_pmw {
        let w = stage.weights.pmw.ok_or_else(|| missing("gen_pmw"))?;
        let mut parts = LossParts::default();
        let x = models.gen_pmw.input(&batch.ir1, &batch.wv, None)?;
        let y = models.gen_pmw.forward(&x, &mut ctx(rng, true, true))?;
        let out = models
            .disc_pmw
            .forward(&Discriminator::input(&batch.ir1, &batch.wv, &y)?, &mut ctx(rng, true, false))?;
        let g = loss_gen_adv(&out.patch, opts.adversarial);
        parts.l_gen = g.value;
        let mut d = models.disc_pmw.backward(Some(&g.grad), None, false)?.channel(2);
        let l = loss_reconstruction(&batch.pmw, &y, opts.reconstruction)?;
        parts.l_l2 = l.value;
        d.add_assign(&l.grad.scale(T::of(w.alpha)));
        outcome.pmw = Some(parts);
        d_pmw = Some(d);
        pmw_in = Some(y);
    } else if stage.pmw_source_for_lregr == Source::Generated {
        pmw_in = Some(frozen_pmw(models, batch, rng)?);
    }

    let x = regressor_input(
        batch,
        vis_in.as_ref().unwrap_or(&batch.vis),
        pmw_in.as_ref().unwrap_or(&batch.pmw),
        ChannelSet::ALL,
    )?;
    let est = models.regressor.forward(&x, &batch.aux, &mut ctx(rng, false, false))?;
    let t = loss_regr(&batch.vmax, &est)?;
    let dx = models.regressor.backward(&t.grad, false)?;

    if let Some(p) = outcome.vis.as_mut() {
        p.l_regr = t.value;
        let beta = stage.weights.vis.map_or(0.0, |w| w.beta);
        models.gen_vis.backward(&dx.channel(2).scale(T::of(beta)), true)?;
    }
    if let (Some(p), Some(mut d)) = (outcome.pmw.as_mut(), d_pmw) {
        p.l_regr = t.value;
        let beta = stage.weights.pmw.map_or(0.0, |w| w.beta);
        d.add_assign(&dx.channel(3).scale(T::of(beta)));
        models.gen_pmw.backward(&d, true)?;
    }

    Ok((
        outcome,
        StepTrace {
            regr_input: x,
            generated_vis: vis_in,
            generated_pmw: pmw_in,
        },
    ))
}
