//! Loss terms with their gradients, and the weighted per-network composites.
//!
//! Every term returns its value in `f64` together with the gradient with
//! respect to the network output it consumes. Patch and pixel reductions are
//! means, so magnitudes do not depend on image size.

use serde::{Deserialize, Serialize};

use crate::dataset::M2N_MAX;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A loss value and its gradient with respect to one input.
#[derive(Debug, Clone)]
pub struct Term<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Adversarial loss formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Binary cross-entropy discriminator, non-saturating `-log D(fake)`
    /// generator.
    #[default]
    Standard,
    /// `log D(real) + 1 - log D(fake)` for the discriminator and
    /// `log D(fake)` for the generator, both minimized as written.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub adversarial: AdversarialForm,
    pub reconstruction: Reconstruction,
    /// Use raw minutes in the m2n loss instead of minutes / 300.
    pub m2n_raw: bool,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise mean of `f(x)` with gradient `f'(x) / n`.
fn mean_map<T: Scalar>(x: &Tensor<T>, f: impl Fn(f64) -> (f64, f64)) -> Term<T> {
    let n = x.len().max(1) as f64;
    let mut value = 0.0;
    let grad: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            let (y, dy) = f(v.f64());
            value += y;
            T::of(dy / n)
        })
        .collect();
    Term {
        value: value / n,
        grad: Tensor::from_vec(x.shape(), grad).expect("same shape"),
    }
}

/// Mean binary cross-entropy of logits against a constant label.
pub fn bce_logits<T: Scalar>(logits: &Tensor<T>, label: f64) -> Term<T> {
    mean_map(logits, |x| {
        (
            label * softplus(-x) + (1.0 - label) * softplus(x),
            sigmoid(x) - label,
        )
    })
}

/// Discriminator term on real patches.
pub fn disc_real<T: Scalar>(patch_real: &Tensor<T>, form: AdversarialForm) -> Term<T> {
    match form {
        AdversarialForm::Standard => bce_logits(patch_real, 1.0),
        AdversarialForm::Literal => mean_map(patch_real, |x| (-softplus(-x), 1.0 - sigmoid(x))),
    }
}

/// Discriminator term on generated patches.
pub fn disc_fake<T: Scalar>(patch_fake: &Tensor<T>, form: AdversarialForm) -> Term<T> {
    match form {
        AdversarialForm::Standard => bce_logits(patch_fake, 0.0),
        AdversarialForm::Literal => mean_map(patch_fake, |x| (1.0 + softplus(-x), sigmoid(x) - 1.0)),
    }
}

/// Sum of the real and generated discriminator terms.
pub fn loss_disc<T: Scalar>(
    patch_real: &Tensor<T>,
    patch_fake: &Tensor<T>,
    form: AdversarialForm,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if patch_real.shape() != patch_fake.shape() {
        return Err(Error::Shape(format!(
            "patch maps {:?} and {:?} differ",
            patch_real.shape(),
            patch_fake.shape()
        )));
    }
    let r = disc_real(patch_real, form);
    let f = disc_fake(patch_fake, form);
    Ok((r.value + f.value, r.grad, f.grad))
}

/// Generator adversarial term on the discriminator's verdict of its output.
pub fn loss_gen_adv<T: Scalar>(patch_fake: &Tensor<T>, form: AdversarialForm) -> Term<T> {
    match form {
        AdversarialForm::Standard => bce_logits(patch_fake, 1.0),
        AdversarialForm::Literal => mean_map(patch_fake, |x| (-softplus(-x), 1.0 - sigmoid(x))),
    }
}

/// Pixel reconstruction loss, gradient with respect to `generated`.
pub fn loss_reconstruction<T: Scalar>(
    target: &Tensor<T>,
    generated: &Tensor<T>,
    norm: Reconstruction,
) -> Result<Term<T>> {
    if target.shape() != generated.shape() {
        return Err(Error::Shape(format!(
            "target {:?} and generated {:?} differ",
            target.shape(),
            generated.shape()
        )));
    }
    let n = target.len().max(1) as f64;
    let mut value = 0.0;
    let grad: Vec<T> = generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(&g, &t)| {
            let d = g.f64() - t.f64();
            match norm {
                Reconstruction::L2 => {
                    value += d * d;
                    T::of(2.0 * d / n)
                }
                Reconstruction::L1 => {
                    value += d.abs();
                    T::of(d.signum() * (d != 0.0) as u8 as f64 / n)
                }
            }
        })
        .collect();
    Ok(Term {
        value: value / n,
        grad: Tensor::from_vec(generated.shape(), grad)?,
    })
}

/// Mean squared pixel difference.
pub fn loss_l2<T: Scalar>(target: &Tensor<T>, generated: &Tensor<T>) -> Result<Term<T>> {
    loss_reconstruction(target, generated, Reconstruction::L2)
}

/// Squared m2n error averaged over the batch, in units of 300 minutes unless
/// `raw`. `pred` is `[N, 1]` minutes; `truth` must lie in `[0, 300]`.
pub fn loss_m2n<T: Scalar>(pred: &Tensor<T>, truth: &[f64], raw: bool) -> Result<Term<T>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} m2n predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(bad) = truth.iter().find(|&&t| !(0.0..=M2N_MAX).contains(&t)) {
        return Err(Error::InvalidInput(format!("m2n {bad} outside [0, {M2N_MAX}]")));
    }
    let scale = if raw { 1.0 } else { 1.0 / M2N_MAX };
    let n = truth.len().max(1) as f64;
    let mut value = 0.0;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = (p.f64() - t) * scale;
            value += d * d;
            T::of(2.0 * d * scale / n)
        })
        .collect();
    Ok(Term {
        value: value / n,
        grad: Tensor::from_vec(pred.shape(), grad)?,
    })
}

/// Mean squared intensity error in kt^2; `est` is `[N, 1]` knots.
pub fn loss_regr<T: Scalar>(truth: &[f64], est: &Tensor<T>) -> Result<Term<T>> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} estimates for {} targets",
            est.len(),
            truth.len()
        )));
    }
    let n = truth.len().max(1) as f64;
    let mut value = 0.0;
    let grad: Vec<T> = est
        .data()
        .iter()
        .zip(truth)
        .map(|(&e, &t)| {
            let d = e.f64() - t;
            value += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    Ok(Term {
        value: value / n,
        grad: Tensor::from_vec(est.shape(), grad)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction weight.
    pub alpha: f64,
    /// Regressor feedback weight.
    pub beta: f64,
    /// m2n weight, applied only to VIS.
    pub gamma: f64,
}

impl LossWeights {
    pub const VIS: LossWeights = LossWeights {
        alpha: 1000.0,
        beta: 1e-4,
        gamma: 0.002,
    };
    pub const PMW: LossWeights = LossWeights {
        alpha: 10.0,
        beta: 1e-3,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Vis,
    Pmw,
}

/// Raw loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_disc: f64,
    pub l_gen: f64,
    pub l_l2: f64,
    pub l_m2n_d: f64,
    pub l_m2n_g: f64,
    pub l_regr: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_disc: f64,
    pub l_gen: f64,
    pub l_l2: f64,
    pub l_m2n_d: f64,
    pub l_m2n_g: f64,
    pub l_regr: f64,
    pub composite_d: f64,
    pub composite_g: f64,
    pub composite_r: f64,
}

/// Weighted composites. The m2n terms enter only for VIS; for PMW they are
/// skipped rather than multiplied by zero.
pub fn composite_losses(parts: LossParts, w: LossWeights, kind: TargetKind) -> Result<LossReport> {
    w.validate()?;
    let mut d = parts.l_disc;
    let mut g = parts.l_gen + w.alpha * parts.l_l2 + w.beta * parts.l_regr;
    if kind == TargetKind::Vis {
        d += w.gamma * parts.l_m2n_d;
        g += w.gamma * parts.l_m2n_g;
    }
    Ok(LossReport {
        l_disc: parts.l_disc,
        l_gen: parts.l_gen,
        l_l2: parts.l_l2,
        l_m2n_d: parts.l_m2n_d,
        l_m2n_g: parts.l_m2n_g,
        l_regr: parts.l_regr,
        composite_d: d,
        composite_g: g,
        composite_r: parts.l_regr,
    })
}
