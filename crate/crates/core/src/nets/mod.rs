//! Network specifications and the three trainable networks: U-Net
//! generators, PatchGAN discriminators with an m2n head, and the intensity
//! regressor.

mod aux;
pub mod checkpoint;
mod discriminator;
mod generator;
mod regressor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Grid;
use crate::error::{Error, Result};
use crate::layers::{Activation, Block, Conv2d, ConvTranspose2d, Core, Ctx, Linear, TensorRole, Visitor};
use crate::tensor::{Scalar, Tensor};

pub use aux::{aux_batch, build_aux, AuxFeatures, AUX_LEN};
pub use discriminator::{DiscOutput, Discriminator};
pub use generator::Generator;
pub use regressor::Regressor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Conv,
    TransConv,
    Linear,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub kernel: Option<(usize, usize)>,
    pub stride: Option<(usize, usize)>,
    /// Output channels or units; 0 for a standalone batch norm.
    pub out_dim: usize,
    pub batch_norm: bool,
    pub dropout: f64,
    pub activation: Activation,
    /// Row whose input receives this row's output as extra channels.
    pub skip_to: Option<usize>,
}

impl LayerSpec {
    pub fn conv(k: usize, s: usize, out_dim: usize, bn: bool, act: Activation) -> Self {
        LayerSpec {
            op: LayerOp::Conv,
            kernel: Some((k, k)),
            stride: Some((s, s)),
            out_dim,
            batch_norm: bn,
            dropout: 0.0,
            activation: act,
            skip_to: None,
        }
    }

    pub fn trans_conv(k: usize, s: usize, out_dim: usize, dropout: f64) -> Self {
        LayerSpec {
            op: LayerOp::TransConv,
            kernel: Some((k, k)),
            stride: Some((s, s)),
            out_dim,
            batch_norm: true,
            dropout,
            activation: Activation::Relu,
            skip_to: None,
        }
    }

    pub fn linear(out_dim: usize, bn: bool, act: Activation) -> Self {
        LayerSpec {
            op: LayerOp::Linear,
            kernel: None,
            stride: None,
            out_dim,
            batch_norm: bn,
            dropout: 0.0,
            activation: act,
            skip_to: None,
        }
    }

    pub fn batch_norm() -> Self {
        LayerSpec {
            op: LayerOp::BatchNorm,
            kernel: None,
            stride: None,
            out_dim: 0,
            batch_norm: true,
            dropout: 0.0,
            activation: Activation::None,
            skip_to: None,
        }
    }

    fn stride2(&self) -> bool {
        matches!(self.stride, Some((2, 2)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkName {
    GenVis,
    GenPmw,
    DiscVis,
    DiscPmw,
    Regressor,
}

impl NetworkName {
    pub const ALL: [NetworkName; 5] = [
        NetworkName::GenVis,
        NetworkName::GenPmw,
        NetworkName::DiscVis,
        NetworkName::DiscPmw,
        NetworkName::Regressor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NetworkName::GenVis => "gen_vis",
            NetworkName::GenPmw => "gen_pmw",
            NetworkName::DiscVis => "disc_vis",
            NetworkName::DiscPmw => "disc_pmw",
            NetworkName::Regressor => "regressor",
        }
    }
}

impl std::fmt::Display for NetworkName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    /// One extra constant input channel holding `m2n / 300`.
    M2nChannel,
}

/// How the flat layer list is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Topology {
    /// Encoder rows, then decoder rows, then one output conv; skips per row.
    UNet,
    /// `shared` trunk rows, then `patch` head rows, then the m2n head.
    PatchGan { shared: usize, patch: usize },
    /// Input batch norm, convs, then linears fed `aux_features` extra inputs.
    Regressor { aux_features: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: NetworkName,
    pub layers: Vec<LayerSpec>,
    pub in_channels: usize,
    pub conditioning: Conditioning,
    pub topology: Topology,
}

/// Spec-level sizes for a U-Net with the given encoder widths.
fn unet(name: NetworkName, enc: &[usize], dropout_rows: usize) -> NetworkSpec {
    let d = enc.len();
    let mut layers = Vec::with_capacity(2 * d + 1);
    for (i, &w) in enc.iter().enumerate() {
        let mut l = LayerSpec::conv(4, 2, w, i > 0, Activation::LeakyRelu);
        if i + 1 < d {
            l.skip_to = Some(2 * d - 1 - i);
        }
        layers.push(l);
    }
    for r in d..2 * d {
        let dropout = if r < d + dropout_rows { 0.5 } else { 0.0 };
        layers.push(LayerSpec::trans_conv(4, 2, enc[2 * d - 1 - r], dropout));
    }
    layers.push(LayerSpec::conv(4, 1, 1, false, Activation::Relu));
    let (in_channels, conditioning) = match name {
        NetworkName::GenVis => (3, Conditioning::M2nChannel),
        _ => (2, Conditioning::None),
    };
    NetworkSpec {
        name,
        layers,
        in_channels,
        conditioning,
        topology: Topology::UNet,
    }
}

fn patchgan(name: NetworkName, shared: &[usize], patch: usize, m2n: (usize, usize, usize)) -> NetworkSpec {
    let mut layers: Vec<LayerSpec> = shared
        .iter()
        .enumerate()
        .map(|(i, &w)| LayerSpec::conv(4, 2, w, i > 0, Activation::LeakyRelu))
        .collect();
    layers.push(LayerSpec::conv(4, 1, patch, true, Activation::Relu));
    layers.push(LayerSpec::conv(4, 1, 1, false, Activation::None));
    layers.push(LayerSpec::conv(4, 2, m2n.0, true, Activation::LeakyRelu));
    layers.push(LayerSpec::conv(4, 2, m2n.1, true, Activation::LeakyRelu));
    layers.push(LayerSpec::linear(m2n.2, true, Activation::Relu));
    layers.push(LayerSpec::linear(1, false, Activation::None));
    NetworkSpec {
        name,
        layers,
        in_channels: 3,
        conditioning: Conditioning::None,
        topology: Topology::PatchGan {
            shared: shared.len(),
            patch: 2,
        },
    }
}

fn regressor(convs: &[(usize, usize)], linears: &[usize]) -> NetworkSpec {
    let mut layers = vec![LayerSpec::batch_norm()];
    for &(k, w) in convs {
        layers.push(LayerSpec::conv(k, 2, w, true, Activation::Relu));
    }
    for &w in linears {
        layers.push(LayerSpec::linear(w, true, Activation::Relu));
    }
    layers.push(LayerSpec::linear(1, false, Activation::None));
    NetworkSpec {
        name: NetworkName::Regressor,
        layers,
        in_channels: 4,
        conditioning: Conditioning::None,
        topology: Topology::Regressor {
            aux_features: AUX_LEN,
        },
    }
}

impl NetworkSpec {
    /// Full-size architecture for `name`.
    pub fn full(name: NetworkName) -> Self {
        match name {
            NetworkName::GenVis | NetworkName::GenPmw => {
                unet(name, &[32, 64, 128, 256, 256, 256], 2)
            }
            NetworkName::DiscVis | NetworkName::DiscPmw => {
                patchgan(name, &[32, 64, 128], 256, (128, 256, 128))
            }
            NetworkName::Regressor => regressor(&[(4, 16), (3, 32), (3, 64), (3, 128)], &[256, 64]),
        }
    }

    /// Small variants sized for 8x8 inputs, used for gradient checks. The
    /// generator has three encoder rows instead of six.
    pub fn toy(name: NetworkName) -> Self {
        match name {
            NetworkName::GenVis | NetworkName::GenPmw => unet(name, &[4, 8, 8], 1),
            NetworkName::DiscVis | NetworkName::DiscPmw => patchgan(name, &[4, 8], 6, (6, 8, 5)),
            NetworkName::Regressor => regressor(&[(4, 4), (3, 6)], &[8, 5]),
        }
    }

    /// Divides every hidden width by `divisor` (at least 1 unit remains);
    /// single-unit output layers are kept.
    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        let divisor = divisor.max(1);
        for l in &mut self.layers {
            if l.out_dim > 1 {
                l.out_dim = (l.out_dim / divisor).max(1);
            }
        }
        self
    }

    /// Number of stride-2 rows the image passes through before the output
    /// grid: encoder rows for a generator, trunk rows for a discriminator.
    pub fn downsampling_depth(&self) -> usize {
        let rows = match self.topology {
            Topology::UNet => &self.layers[..],
            Topology::PatchGan { shared, .. } => &self.layers[..shared.min(self.layers.len())],
            Topology::Regressor { .. } => &self.layers[..],
        };
        rows.iter().filter(|l| l.op == LayerOp::Conv && l.stride2()).count()
    }

    /// Required divisor of the image size. The regressor and the m2n head
    /// pad by ceiling and accept any size.
    pub fn size_divisor(&self) -> usize {
        match self.topology {
            Topology::Regressor { .. } => 1,
            _ => 1 << self.downsampling_depth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} spec: {msg}", self.name)));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            let spatial = matches!(l.op, LayerOp::Conv | LayerOp::TransConv);
            let geometry = (l.kernel.is_some(), l.stride.is_some());
            if geometry != (spatial, spatial) {
                return bad(format!("row {i}: kernel/stride must be set exactly for conv rows"));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return bad(format!("row {i}: dropout {} outside [0, 1)", l.dropout));
            }
            if l.op != LayerOp::BatchNorm && l.out_dim == 0 {
                return bad(format!("row {i}: zero width"));
            }
            if let Some(t) = l.skip_to {
                if self.topology != Topology::UNet || t <= i + 1 || t >= self.layers.len() {
                    return bad(format!("row {i}: invalid skip target {t}"));
                }
            }
            if l.op == LayerOp::BatchNorm && i != 0 {
                return bad(format!("row {i}: standalone batch norm only allowed first"));
            }
        }
        let expected_in = match self.conditioning {
            Conditioning::None => 2,
            Conditioning::M2nChannel => 3,
        };
        match self.topology {
            Topology::UNet => {
                if self.in_channels != expected_in {
                    return bad(format!("generator needs {expected_in} input channels"));
                }
                let enc = self.layers.iter().take_while(|l| l.op == LayerOp::Conv && l.stride2()).count();
                let dec = self.layers[enc..].iter().take_while(|l| l.op == LayerOp::TransConv).count();
                if enc == 0 || enc != dec || enc + dec + 1 != self.layers.len() {
                    return bad("U-Net needs matching encoder/decoder rows and one output row".into());
                }
            }
            Topology::PatchGan { shared, patch } => {
                if self.in_channels != 3 || self.conditioning != Conditioning::None {
                    return bad("discriminator takes [ir1, wv, target]".into());
                }
                let m2n = &self.layers[(shared + patch).min(self.layers.len())..];
                if shared == 0 || patch == 0 || m2n.is_empty() {
                    return bad("discriminator needs shared, patch and m2n rows".into());
                }
                if self.layers[shared + patch - 1].out_dim != 1 || m2n.last().map(|l| l.out_dim) != Some(1) {
                    return bad("discriminator heads must end in one unit".into());
                }
                if self.layers[..shared + patch].iter().any(|l| l.op != LayerOp::Conv) {
                    return bad("trunk and patch head must be convolutions".into());
                }
            }
            Topology::Regressor { .. } => {
                if self.in_channels != 4 || self.layers[0].op != LayerOp::BatchNorm {
                    return bad("regressor takes four channels through an input batch norm".into());
                }
                let convs = self.layers[1..].iter().take_while(|l| l.op == LayerOp::Conv).count();
                let rest = &self.layers[1 + convs..];
                if convs == 0 || rest.is_empty() || rest.iter().any(|l| l.op != LayerOp::Linear) {
                    return bad("regressor needs convs followed by linears".into());
                }
                if rest.last().map(|l| l.out_dim) != Some(1) {
                    return bad("regressor must end in one unit".into());
                }
            }
        }
        Ok(())
    }

    pub fn check_image_size(&self, image_size: usize) -> Result<()> {
        let divisor = self.size_divisor();
        if image_size == 0 || image_size % divisor != 0 {
            return Err(Error::ImageSize {
                size: image_size,
                divisor,
            });
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON spec together with the image size.
    pub fn spec_hash(&self, image_size: usize) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.update((image_size as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds one table row as a layer block. Bias is dropped when batch norm
/// follows.
pub(crate) fn block<T: Scalar>(l: &LayerSpec, in_dim: usize, rng: &mut ChaCha8Rng) -> Block<T> {
    let bias = !l.batch_norm;
    let core = match l.op {
        LayerOp::Conv => Core::Conv(Conv2d::new(
            in_dim,
            l.out_dim,
            l.kernel.expect("validated"),
            l.stride.expect("validated"),
            bias,
            rng,
        )),
        LayerOp::TransConv => Core::TransConv(ConvTranspose2d::new(
            in_dim,
            l.out_dim,
            l.kernel.expect("validated"),
            l.stride.expect("validated"),
            bias,
            rng,
        )),
        LayerOp::Linear => Core::Linear(Linear::new(in_dim, l.out_dim, bias, rng)),
        LayerOp::BatchNorm => unreachable!("standalone batch norm is not a block"),
    };
    Block::new(core, l.batch_norm, l.activation, l.dropout)
}

/// Spatial size after one "same"-padded layer.
pub(crate) fn out_size(l: &LayerSpec, size: usize) -> usize {
    match (l.op, l.stride) {
        (LayerOp::Conv, Some((s, _))) => size.div_ceil(s),
        (LayerOp::TransConv, Some((s, _))) => size * s,
        _ => size,
    }
}

/// Runs `f` with the context forced to inference mode when `frozen`.
pub(crate) fn with_mode<R>(
    frozen: bool,
    ctx: &mut Ctx<'_>,
    f: impl FnOnce(&mut Ctx<'_>) -> R,
) -> R {
    if frozen {
        let mut eval = Ctx {
            train: false,
            update_stats: false,
            rng: &mut *ctx.rng,
        };
        f(&mut eval)
    } else {
        f(ctx)
    }
}

pub enum Network<T> {
    Generator(Generator<T>),
    Discriminator(Discriminator<T>),
    Regressor(Regressor<T>),
}

/// Builds a network with weights drawn deterministically from `rng_seed`.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, image_size: usize, rng_seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    spec.check_image_size(image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(match spec.topology {
        Topology::UNet => Network::Generator(Generator::build(spec.clone(), image_size, &mut rng)?),
        Topology::PatchGan { .. } => {
            Network::Discriminator(Discriminator::build(spec.clone(), image_size, &mut rng)?)
        }
        Topology::Regressor { .. } => Network::Regressor(Regressor::build(spec.clone(), image_size, &mut rng)?),
    })
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &NetworkSpec {
        match self {
            Network::Generator(n) => n.spec(),
            Network::Discriminator(n) => n.spec(),
            Network::Regressor(n) => n.spec(),
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            Network::Generator(n) => n.image_size(),
            Network::Discriminator(n) => n.image_size(),
            Network::Regressor(n) => n.image_size(),
        }
    }

    pub fn visit(&mut self, f: &mut Visitor<'_, T>) {
        match self {
            Network::Generator(n) => n.visit(f),
            Network::Discriminator(n) => n.visit(f),
            Network::Regressor(n) => n.visit(f),
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        match self {
            Network::Generator(n) => n.trainable = trainable,
            Network::Discriminator(n) => n.trainable = trainable,
            Network::Regressor(n) => n.trainable = trainable,
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, role, p| {
            if role == TensorRole::Trainable {
                n += p.len();
            }
        });
        n
    }

    pub fn into_generator(self) -> Result<Generator<T>> {
        match self {
            Network::Generator(n) => Ok(n),
            other => Err(Error::Config(format!("{} is not a generator", other.spec().name))),
        }
    }

    pub fn into_discriminator(self) -> Result<Discriminator<T>> {
        match self {
            Network::Discriminator(n) => Ok(n),
            other => Err(Error::Config(format!("{} is not a discriminator", other.spec().name))),
        }
    }

    pub fn into_regressor(self) -> Result<Regressor<T>> {
        match self {
            Network::Regressor(n) => Ok(n),
            other => Err(Error::Config(format!("{} is not a regressor", other.spec().name))),
        }
    }
}

/// Stacks equally sized grids into a `[1, C, H, W]` tensor.
pub fn grids_to_tensor<T: Scalar>(grids: &[&Grid]) -> Result<Tensor<T>> {
    let (h, w) = grids
        .first()
        .ok_or_else(|| Error::Shape("no grids".into()))?
        .dim();
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.dim() != (h, w) {
            return Err(Error::Shape(format!("grid {:?} differs from {:?}", g.dim(), (h, w))));
        }
        data.extend(g.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[1, grids.len(), h, w], data)
}

/// First item, first channel of a `[N, C, H, W]` tensor as a grid.
pub fn tensor_to_grid<T: Scalar>(t: &Tensor<T>) -> Grid {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    Grid::from_shape_fn((h, w), |(i, j)| t.data()[i * w + j].f64() as f32)
}

#[cfg(test)]
mod tests;
