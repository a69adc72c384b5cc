use rand_chacha::ChaCha8Rng;

use crate::dataset::M2N_MAX;
use crate::error::{Error, Result};
use crate::layers::{Block, Ctx, Visitor};
use crate::nets::{block, out_size, with_mode, LayerOp, NetworkSpec, Topology};
use crate::tensor::{Scalar, Tensor};

pub struct DiscOutput<T> {
    /// `[N, 1, h, w]` patch logits.
    pub patch: Tensor<T>,
    /// `[N, 1]` predicted minutes to noon.
    pub m2n: Tensor<T>,
}

/// PatchGAN discriminator over `[ir1, wv, target]` with a second head that
/// regresses minutes to noon from the shared features.
pub struct Discriminator<T> {
    spec: NetworkSpec,
    image_size: usize,
    shared: Vec<Block<T>>,
    patch: Vec<Block<T>>,
    m2n: Vec<Block<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Discriminator<T> {
    pub(crate) fn build(spec: NetworkSpec, image_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let Topology::PatchGan { shared, patch } = spec.topology else {
            return Err(Error::Config("not a discriminator spec".into()));
        };
        let mut dim = spec.in_channels;
        let mut size = image_size;
        let mut trunk = Vec::new();
        for l in &spec.layers[..shared] {
            trunk.push(block(l, dim, rng));
            dim = l.out_dim;
            size = out_size(l, size);
        }
        let (trunk_dim, trunk_size) = (dim, size);
        let mut head = Vec::new();
        for l in &spec.layers[shared..shared + patch] {
            head.push(block(l, dim, rng));
            dim = l.out_dim;
        }
        let (mut dim, mut size) = (trunk_dim, trunk_size);
        let mut m2n = Vec::new();
        let mut flat = false;
        for l in &spec.layers[shared + patch..] {
            let in_dim = if l.op == LayerOp::Linear && !flat {
                flat = true;
                dim * size * size
            } else {
                dim
            };
            m2n.push(block(l, in_dim, rng));
            dim = l.out_dim;
            size = out_size(l, size);
        }
        Ok(Discriminator {
            spec,
            image_size,
            shared: trunk,
            patch: head,
            m2n,
            trainable: true,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Side length of the input window that influences one patch logit.
    pub fn patch_receptive_field(&self) -> usize {
        let Topology::PatchGan { shared, patch } = self.spec.topology else {
            unreachable!("built from a PatchGan spec")
        };
        self.spec.layers[..shared + patch]
            .iter()
            .rev()
            .fold(1, |rf, l| {
                let (k, s) = (l.kernel.map_or(1, |k| k.0), l.stride.map_or(1, |s| s.0));
                (rf - 1) * s + k
            })
    }

    pub fn input(ir1: &Tensor<T>, wv: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if ir1.shape() != target.shape() || wv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "discriminator inputs {:?}, {:?}, {:?} differ",
                ir1.shape(),
                wv.shape(),
                target.shape()
            )));
        }
        Tensor::concat_channels(&[ir1, wv, target])
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<DiscOutput<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "{} expects [N, {}, H, W], got {s:?}",
                self.spec.name, self.spec.in_channels
            )));
        }
        let frozen = !self.trainable;
        let mut h = x.clone();
        for b in &mut self.shared {
            h = with_mode(frozen, ctx, |c| b.forward(&h, c))?;
        }
        let mut p = h.clone();
        for b in &mut self.patch {
            p = with_mode(frozen, ctx, |c| b.forward(&p, c))?;
        }
        let mut m = h;
        for b in &mut self.m2n {
            m = with_mode(frozen, ctx, |c| b.forward(&m, c))?;
        }
        Ok(DiscOutput {
            patch: p,
            m2n: m.scale(T::of(M2N_MAX)),
        })
    }

    /// Backpropagates either or both head gradients from the last forward
    /// and returns the input gradient.
    pub fn backward(
        &mut self,
        d_patch: Option<&Tensor<T>>,
        d_m2n: Option<&Tensor<T>>,
        param_grads: bool,
    ) -> Result<Tensor<T>> {
        let pg = param_grads && self.trainable;
        let mut d_trunk: Option<Tensor<T>> = None;
        if let Some(d) = d_patch {
            let mut g = d.clone();
            for b in self.patch.iter_mut().rev() {
                g = b.backward(&g, pg)?;
            }
            d_trunk = Some(g);
        }
        if let Some(d) = d_m2n {
            let mut g = d.scale(T::of(M2N_MAX));
            for b in self.m2n.iter_mut().rev() {
                g = b.backward(&g, pg)?;
            }
            match &mut d_trunk {
                Some(t) => t.add_assign(&g),
                None => d_trunk = Some(g),
            }
        }
        let mut g = d_trunk.ok_or_else(|| Error::Shape("discriminator backward without gradients".into()))?;
        for b in self.shared.iter_mut().rev() {
            g = b.backward(&g, pg)?;
        }
        Ok(g)
    }

    pub fn visit(&mut self, f: &mut Visitor<'_, T>) {
        for (i, b) in self.shared.iter_mut().enumerate() {
            b.visit(&format!("shared{i}"), f);
        }
        for (i, b) in self.patch.iter_mut().enumerate() {
            b.visit(&format!("patch{i}"), f);
        }
        for (i, b) in self.m2n.iter_mut().enumerate() {
            b.visit(&format!("m2n{i}"), f);
        }
    }
}
