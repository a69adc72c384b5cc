use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Block, Ctx, Param, TensorRole, Visitor};
use crate::nets::{block, out_size, with_mode, LayerOp, NetworkSpec, Topology};
use crate::tensor::{Scalar, Tensor};

/// CNN intensity regressor. The last linear unit predicts a standardized
/// intensity which is mapped to knots through the `target` buffers.
pub struct Regressor<T> {
    spec: NetworkSpec,
    image_size: usize,
    input_bn: BatchNorm<T>,
    convs: Vec<Block<T>>,
    linears: Vec<Block<T>>,
    aux_features: usize,
    target_mean: Param<T>,
    target_std: Param<T>,
    conv_out_shape: Option<Vec<usize>>,
    pub trainable: bool,
}

impl<T: Scalar> Regressor<T> {
    pub(crate) fn build(spec: NetworkSpec, image_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let Topology::Regressor { aux_features } = spec.topology else {
            return Err(Error::Config("not a regressor spec".into()));
        };
        let mut dim = spec.in_channels;
        let mut size = image_size;
        let mut convs = Vec::new();
        let mut linears = Vec::new();
        let mut flat = false;
        for l in &spec.layers[1..] {
            match l.op {
                LayerOp::Conv => {
                    convs.push(block(l, dim, rng));
                    size = out_size(l, size);
                }
                _ => {
                    let in_dim = if flat {
                        dim
                    } else {
                        flat = true;
                        dim * size * size + aux_features
                    };
                    linears.push(block(l, in_dim, rng));
                }
            }
            dim = l.out_dim;
        }
        Ok(Regressor {
            input_bn: BatchNorm::new(spec.in_channels),
            spec,
            image_size,
            convs,
            linears,
            aux_features,
            target_mean: scalar_param(0.0),
            target_std: scalar_param(1.0),
            conv_out_shape: None,
            trainable: true,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Sets the knots scale of the output unit.
    pub fn set_target_scale(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(Error::InvalidInput(format!(
                "target scale needs finite mean and std > 0, got {mean}, {std}"
            )));
        }
        self.target_mean.value[0] = T::of(mean);
        self.target_std.value[0] = T::of(std);
        Ok(())
    }

    pub fn target_scale(&self) -> (f64, f64) {
        (self.target_mean.value[0].f64(), self.target_std.value[0].f64())
    }

    /// Shape of the last conv output for a batch, `[N, C, h, w]`.
    pub fn conv_output_shape(&self, n: usize, size: usize) -> Vec<usize> {
        let mut s = size;
        let mut c = self.spec.in_channels;
        for l in &self.spec.layers[1..] {
            if l.op == LayerOp::Conv {
                s = out_size(l, s);
                c = l.out_dim;
            }
        }
        vec![n, c, s, s]
    }

    /// `x` is `[N, 4, H, W]` holding `[ir1, wv, vis, pmw]`; `aux` is
    /// `[N, aux_features]`. Returns `[N, 1]` knots.
    pub fn forward(&mut self, x: &Tensor<T>, aux: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "regressor expects [N, {}, H, W], got {s:?}",
                self.spec.in_channels
            )));
        }
        let n = s[0];
        if aux.shape() != [n, self.aux_features] {
            return Err(Error::Shape(format!(
                "regressor expects aux [{n}, {}], got {:?}",
                self.aux_features,
                aux.shape()
            )));
        }
        let frozen = !self.trainable;
        let bn = &mut self.input_bn;
        let mut h = with_mode(frozen, ctx, |c| bn.forward(x, c))?;
        for b in &mut self.convs {
            h = with_mode(frozen, ctx, |c| b.forward(&h, c))?;
        }
        self.conv_out_shape = Some(h.shape().to_vec());
        let f = h.item_len();
        let mut joined = Vec::with_capacity(n * (f + self.aux_features));
        for i in 0..n {
            joined.extend_from_slice(h.item(i));
            joined.extend_from_slice(aux.item(i));
        }
        let mut z = Tensor::from_vec(&[n, f + self.aux_features], joined)?;
        for b in &mut self.linears {
            z = with_mode(frozen, ctx, |c| b.forward(&z, c))?;
        }
        let (m, sd) = (self.target_mean.value[0], self.target_std.value[0]);
        Ok(z.map(|v| v * sd + m))
    }

    /// Backpropagates a `[N, 1]` gradient on knots and returns the image
    /// input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let pg = param_grads && self.trainable;
        let conv_shape = self
            .conv_out_shape
            .take()
            .ok_or_else(|| Error::Shape("regressor backward without forward".into()))?;
        let mut g = dy.scale(self.target_std.value[0]);
        for b in self.linears.iter_mut().rev() {
            g = b.backward(&g, pg)?;
        }
        let n = conv_shape[0];
        let f: usize = conv_shape[1..].iter().product();
        let mut dh = Vec::with_capacity(n * f);
        for i in 0..n {
            dh.extend_from_slice(&g.item(i)[..f]);
        }
        let mut g = Tensor::from_vec(&conv_shape, dh)?;
        for b in self.convs.iter_mut().rev() {
            g = b.backward(&g, pg)?;
        }
        self.input_bn.backward(&g, pg)
    }

    pub fn visit(&mut self, f: &mut Visitor<'_, T>) {
        self.input_bn.visit("input_bn", f);
        for (i, b) in self.convs.iter_mut().enumerate() {
            b.visit(&format!("conv{i}"), f);
        }
        for (i, b) in self.linears.iter_mut().enumerate() {
            b.visit(&format!("linear{i}"), f);
        }
        f("target.mean", TensorRole::Buffer, &mut self.target_mean);
        f("target.std", TensorRole::Buffer, &mut self.target_std);
    }
}

fn scalar_param<T: Scalar>(v: f64) -> Param<T> {
    Param {
        shape: vec![1],
        value: vec![T::of(v)],
        grad: vec![T::zero()],
    }
}
