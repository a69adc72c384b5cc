//! Trainable building blocks with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so a
//! forward call must be followed by the matching `backward` before the next
//! forward on the same layer when gradients are wanted.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// Upper bound on im2col buffer elements per gemm call.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    None,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * T::of(LEAKY_SLOPE)
                }
            }
            Activation::None => v,
        }
    }

    /// Derivative expressed through the activation output; the sign of the
    /// output equals the sign of the input for all three variants.
    fn slope_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::None => T::one(),
        }
    }
}

/// Per-call execution context.
pub struct Ctx<'a> {
    /// Batch statistics and dropout active.
    pub train: bool,
    /// Batch-norm running statistics may be updated.
    pub update_stats: bool,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    fn truncated_normal(shape: &[usize], rng: &mut dyn RngCore) -> Self {
        let mut p = Self::zeros(shape);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for v in p.value.iter_mut() {
            let mut s: f64 = normal.sample(rng);
            while s.abs() > 2.0 * INIT_STD {
                s = normal.sample(rng);
            }
            *v = T::of(s);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Whether a visited tensor is optimized or only carried state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Trainable,
    Buffer,
}

pub type Visitor<'v, T> = dyn FnMut(&str, TensorRole, &mut Param<T>) + 'v;

/// "Same"-padded convolution geometry for one input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output is `ceil(in / stride)`; odd padding totals put the extra row at
    /// the bottom/right.
    pub fn same(c: usize, h: usize, w: usize, k: (usize, usize), s: (usize, usize)) -> Self {
        let (kh, kw) = k;
        let (sh, sw) = s;
        let oh = h.div_ceil(sh);
        let ow = w.div_ceil(sw);
        let pad_h = ((oh - 1) * sh + kh).saturating_sub(h);
        let pad_w = ((ow - 1) * sw + kw).saturating_sub(w);
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            oh,
            ow,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Writes the patch matrix of one image into columns
    /// `[col_off, col_off + oh*ow)` of a row-major buffer with leading dim `ld`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, col_off: usize) {
        let (h, w) = (self.h as isize, self.w as isize);
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[r * ld + col_off..r * ld + col_off + self.out_pixels()];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= h {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                            *d = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns into `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, col_off: usize, x: &mut [T]) {
        let (h, w) = (self.h as isize, self.w as isize);
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &cols[r * ld + col_off..r * ld + col_off + self.out_pixels()];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] = dst[ix as usize] + row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn group_size(n: usize, rows: usize, pixels: usize) -> usize {
    (COLS_BUDGET / (rows * pixels).max(1)).clamp(1, n.max(1))
}

/// Copies items `[s0, s1)` of a `[N, C, P]` buffer into a `[C, g*P]` matrix.
fn gather<T: Scalar>(src: &[T], c: usize, p: usize, s0: usize, s1: usize, out: &mut [T]) {
    let g = s1 - s0;
    for (gi, i) in (s0..s1).enumerate() {
        for ci in 0..c {
            let from = &src[(i * c + ci) * p..(i * c + ci + 1) * p];
            out[ci * g * p + gi * p..ci * g * p + (gi + 1) * p].copy_from_slice(from);
        }
    }
}

/// Inverse of [`gather`].
fn scatter<T: Scalar>(mat: &[T], c: usize, p: usize, s0: usize, s1: usize, dst: &mut [T]) {
    let g = s1 - s0;
    for (gi, i) in (s0..s1).enumerate() {
        for ci in 0..c {
            let to = &mut dst[(i * c + ci) * p..(i * c + ci + 1) * p];
            to.copy_from_slice(&mat[ci * g * p + gi * p..ci * g * p + (gi + 1) * p]);
        }
    }
}

fn check_4d<T: Scalar>(x: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != c {
        return Err(Error::Shape(format!(
            "{what} expects [N, {c}, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = Param::truncated_normal(&[out_c, in_c * kernel.0 * kernel.1], rng);
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            weight,
            bias: bias.then(|| Param::zeros(&[out_c])),
            input: None,
        }
    }

    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom::same(self.in_c, h, w, self.kernel, self.stride)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_4d(x, self.in_c, "conv2d")?;
        let n = x.n();
        let g = self.geom(x.shape()[2], x.shape()[3]);
        let (k, p) = (g.rows(), g.out_pixels());
        let mut y = Tensor::zeros(&[n, self.out_c, g.oh, g.ow]);
        let gs = group_size(n, k, p);
        let mut cols = vec![T::zero(); k * gs * p];
        let mut out = vec![T::zero(); self.out_c * gs * p];
        let mut s0 = 0;
        while s0 < n {
            let s1 = (s0 + gs).min(n);
            let ld = (s1 - s0) * p;
            for i in s0..s1 {
                g.im2col(x.item(i), &mut cols, ld, (i - s0) * p);
            }
            gemm(
                Mat::new(&self.weight.value, self.out_c, k),
                Mat::new(&cols[..k * ld], k, ld),
                T::zero(),
                &mut out[..self.out_c * ld],
            );
            scatter(&out[..self.out_c * ld], self.out_c, p, s0, s1, y.data_mut());
            s0 = s1;
        }
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, &b.value);
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("conv2d backward without forward".into()))?;
        let n = x.n();
        let g = self.geom(x.shape()[2], x.shape()[3]);
        let (k, p) = (g.rows(), g.out_pixels());
        if dy.shape() != [n, self.out_c, g.oh, g.ow] {
            return Err(Error::Shape(format!("conv2d backward got {:?}", dy.shape())));
        }
        if param_grads {
            if let Some(b) = &mut self.bias {
                accumulate_channel_bias(dy, &mut b.grad);
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        let gs = group_size(n, k, p);
        let mut cols = vec![T::zero(); k * gs * p];
        let mut dmat = vec![T::zero(); self.out_c * gs * p];
        let mut s0 = 0;
        while s0 < n {
            let s1 = (s0 + gs).min(n);
            let ld = (s1 - s0) * p;
            gather(dy.data(), self.out_c, p, s0, s1, &mut dmat);
            let dmat = &dmat[..self.out_c * ld];
            if param_grads {
                for i in s0..s1 {
                    g.im2col(x.item(i), &mut cols, ld, (i - s0) * p);
                }
                gemm(
                    Mat::new(dmat, self.out_c, ld),
                    Mat::t(&cols[..k * ld], k, ld),
                    T::one(),
                    &mut self.weight.grad,
                );
            }
            gemm(
                Mat::t(&self.weight.value, self.out_c, k),
                Mat::new(dmat, self.out_c, ld),
                T::zero(),
                &mut cols[..k * ld],
            );
            for i in s0..s1 {
                g.col2im(&cols, ld, (i - s0) * p, dx.item_mut(i));
            }
            s0 = s1;
        }
        Ok(dx)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}.weight"), TensorRole::Trainable, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), TensorRole::Trainable, b);
        }
    }
}

/// Fractionally-strided convolution; the exact adjoint of a "same"-padded
/// [`Conv2d`] mapping the output size back to the input size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// `[in_c, out_c * kh * kw]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let weight = Param::truncated_normal(&[in_c, out_c * kernel.0 * kernel.1], rng);
        ConvTranspose2d {
            in_c,
            out_c,
            kernel,
            stride,
            weight,
            bias: bias.then(|| Param::zeros(&[out_c])),
            input: None,
        }
    }

    /// Geometry of the forward convolution whose adjoint this layer computes.
    pub fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom::same(
            self.out_c,
            h * self.stride.0,
            w * self.stride.1,
            self.kernel,
            self.stride,
        )
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_4d(x, self.in_c, "trans_conv")?;
        let (n, h, w) = (x.n(), x.shape()[2], x.shape()[3]);
        let g = self.geom(h, w);
        debug_assert_eq!((g.oh, g.ow), (h, w));
        let (k, p) = (g.rows(), h * w);
        let mut y = Tensor::zeros(&[n, self.out_c, g.h, g.w]);
        let gs = group_size(n, k.max(self.in_c), p);
        let mut xmat = vec![T::zero(); self.in_c * gs * p];
        let mut cols = vec![T::zero(); k * gs * p];
        let mut s0 = 0;
        while s0 < n {
            let s1 = (s0 + gs).min(n);
            let ld = (s1 - s0) * p;
            gather(x.data(), self.in_c, p, s0, s1, &mut xmat);
            gemm(
                Mat::t(&self.weight.value, self.in_c, k),
                Mat::new(&xmat[..self.in_c * ld], self.in_c, ld),
                T::zero(),
                &mut cols[..k * ld],
            );
            for i in s0..s1 {
                g.col2im(&cols, ld, (i - s0) * p, y.item_mut(i));
            }
            s0 = s1;
        }
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, &b.value);
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("trans_conv backward without forward".into()))?;
        let (n, h, w) = (x.n(), x.shape()[2], x.shape()[3]);
        let g = self.geom(h, w);
        let (k, p) = (g.rows(), h * w);
        if dy.shape() != [n, self.out_c, g.h, g.w] {
            return Err(Error::Shape(format!(
                "trans_conv backward got {:?}",
                dy.shape()
            )));
        }
        if param_grads {
            if let Some(b) = &mut self.bias {
                accumulate_channel_bias(dy, &mut b.grad);
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        let gs = group_size(n, k.max(self.in_c), p);
        let mut cols = vec![T::zero(); k * gs * p];
        let mut xmat = vec![T::zero(); self.in_c * gs * p];
        let mut s0 = 0;
        while s0 < n {
            let s1 = (s0 + gs).min(n);
            let ld = (s1 - s0) * p;
            for i in s0..s1 {
                g.im2col(dy.item(i), &mut cols, ld, (i - s0) * p);
            }
            let cols = &cols[..k * ld];
            if param_grads {
                gather(x.data(), self.in_c, p, s0, s1, &mut xmat);
                gemm(
                    Mat::new(&xmat[..self.in_c * ld], self.in_c, ld),
                    Mat::t(cols, k, ld),
                    T::one(),
                    &mut self.weight.grad,
                );
            }
            gemm(
                Mat::new(&self.weight.value, self.in_c, k),
                Mat::new(cols, k, ld),
                T::zero(),
                &mut xmat[..self.in_c * ld],
            );
            scatter(&xmat[..self.in_c * ld], self.in_c, p, s0, s1, dx.data_mut());
            s0 = s1;
        }
        Ok(dx)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}.weight"), TensorRole::Trainable, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), TensorRole::Trainable, b);
        }
    }
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let c = y.shape()[1];
    let p: usize = y.shape()[2..].iter().product();
    for i in 0..y.n() {
        let item = y.item_mut(i);
        for (ci, &b) in bias.iter().enumerate().take(c) {
            item[ci * p..(ci + 1) * p].iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn accumulate_channel_bias<T: Scalar>(dy: &Tensor<T>, grad: &mut [T]) {
    let c = dy.shape()[1];
    let p: usize = dy.shape()[2..].iter().product();
    for i in 0..dy.n() {
        let item = dy.item(i);
        for ci in 0..c {
            let s = item[ci * p..(ci + 1) * p]
                .iter()
                .fold(T::zero(), |a, &b| a + b);
            grad[ci] = grad[ci] + s;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_f: usize,
    pub out_f: usize,
    /// `[out_f, in_f]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_f: usize, out_f: usize, bias: bool, rng: &mut dyn RngCore) -> Self {
        Linear {
            in_f,
            out_f,
            weight: Param::truncated_normal(&[out_f, in_f], rng),
            bias: bias.then(|| Param::zeros(&[out_f])),
            input: None,
        }
    }

    /// Accepts any `[N, ...]` input whose trailing size is `in_f`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.n();
        if x.item_len() != self.in_f {
            return Err(Error::Shape(format!(
                "linear expects {} features, got {:?}",
                self.in_f,
                x.shape()
            )));
        }
        let mut y = Tensor::zeros(&[n, self.out_f]);
        gemm(
            Mat::new(x.data(), n, self.in_f),
            Mat::t(&self.weight.value, self.out_f, self.in_f),
            T::zero(),
            y.data_mut(),
        );
        if let Some(b) = &self.bias {
            for i in 0..n {
                for (v, &bb) in y.item_mut(i).iter_mut().zip(&b.value) {
                    *v = *v + bb;
                }
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("linear backward without forward".into()))?;
        let n = x.n();
        if dy.shape() != [n, self.out_f] {
            return Err(Error::Shape(format!("linear backward got {:?}", dy.shape())));
        }
        if param_grads {
            gemm(
                Mat::t(dy.data(), n, self.out_f),
                Mat::new(x.data(), n, self.in_f),
                T::one(),
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                for i in 0..n {
                    for (g, &d) in b.grad.iter_mut().zip(dy.item(i)) {
                        *g = *g + d;
                    }
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            Mat::new(dy.data(), n, self.out_f),
            Mat::new(&self.weight.value, self.out_f, self.in_f),
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}.weight"), TensorRole::Trainable, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), TensorRole::Trainable, b);
        }
    }
}

/// Batch normalization over `[N, C, ...]`: statistics per channel across the
/// batch and all trailing positions.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::filled(&[channels], T::zero()),
            running_var: Param::filled(&[channels], T::one()),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        if x.shape().len() < 2 || x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "batch_norm expects {} channels, got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let n = x.n();
        let c = self.channels;
        let p: usize = x.shape()[2..].iter().product();
        let m = n * p;
        let eps = T::of(BN_EPS);
        let (mean, var) = if ctx.train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                let item = x.item(i);
                for ci in 0..c {
                    mean[ci] = item[ci * p..(ci + 1) * p]
                        .iter()
                        .fold(mean[ci], |a, &b| a + b);
                }
            }
            let mf = T::of(m as f64);
            mean.iter_mut().for_each(|v| *v = *v / mf);
            for i in 0..n {
                let item = x.item(i);
                for ci in 0..c {
                    var[ci] = item[ci * p..(ci + 1) * p].iter().fold(var[ci], |a, &b| {
                        let d = b - mean[ci];
                        a + d * d
                    });
                }
            }
            var.iter_mut().for_each(|v| *v = *v / mf);
            if ctx.update_stats {
                let mom = T::of(BN_MOMENTUM);
                let unbias = if m > 1 {
                    T::of(m as f64 / (m as f64 - 1.0))
                } else {
                    T::one()
                };
                for ci in 0..c {
                    let rm = &mut self.running_mean.value[ci];
                    *rm = (T::one() - mom) * *rm + mom * mean[ci];
                    let rv = &mut self.running_var.value[ci];
                    *rv = (T::one() - mom) * *rv + mom * var[ci] * unbias;
                }
            }
            (mean, var)
        } else {
            (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            let (xi, hi) = (x.item(i), xhat.item_mut(i));
            for ci in 0..c {
                for j in ci * p..(ci + 1) * p {
                    hi[j] = (xi[j] - mean[ci]) * inv_std[ci];
                }
            }
            let (hi, yi) = (xhat.item(i), y.item_mut(i));
            for ci in 0..c {
                let (g, b) = (self.gamma.value[ci], self.beta.value[ci]);
                for j in ci * p..(ci + 1) * p {
                    yi[j] = g * hi[j] + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train: ctx.train,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("batch_norm backward without forward".into()))?;
        let xhat = &cache.xhat;
        if dy.shape() != xhat.shape() {
            return Err(Error::Shape(format!("batch_norm backward got {:?}", dy.shape())));
        }
        let n = dy.n();
        let c = self.channels;
        let p: usize = dy.shape()[2..].iter().product();
        let mut dbeta = vec![T::zero(); c];
        let mut dgamma = vec![T::zero(); c];
        for i in 0..n {
            let (d, h) = (dy.item(i), xhat.item(i));
            for ci in 0..c {
                for j in ci * p..(ci + 1) * p {
                    dbeta[ci] = dbeta[ci] + d[j];
                    dgamma[ci] = dgamma[ci] + d[j] * h[j];
                }
            }
        }
        if param_grads {
            for ci in 0..c {
                self.beta.grad[ci] = self.beta.grad[ci] + dbeta[ci];
                self.gamma.grad[ci] = self.gamma.grad[ci] + dgamma[ci];
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        let mf = T::of((n * p) as f64);
        for i in 0..n {
            let (d, h, o) = (dy.item(i), xhat.item(i), dx.item_mut(i));
            for ci in 0..c {
                let scale = self.gamma.value[ci] * cache.inv_std[ci];
                for j in ci * p..(ci + 1) * p {
                    o[j] = if cache.train {
                        scale / mf * (mf * d[j] - dbeta[ci] - h[j] * dgamma[ci])
                    } else {
                        scale * d[j]
                    };
                }
            }
        }
        Ok(dx)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}.gamma"), TensorRole::Trainable, &mut self.gamma);
        f(&format!("{prefix}.beta"), TensorRole::Trainable, &mut self.beta);
        f(
            &format!("{prefix}.running_mean"),
            TensorRole::Buffer,
            &mut self.running_mean,
        );
        f(
            &format!("{prefix}.running_var"),
            TensorRole::Buffer,
            &mut self.running_var,
        );
    }
}

#[derive(Debug, Clone)]
pub enum Core<T> {
    Conv(Conv2d<T>),
    TransConv(ConvTranspose2d<T>),
    Linear(Linear<T>),
}

/// One table row: core op, optional batch norm, activation, optional dropout.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub core: Core<T>,
    pub bn: Option<BatchNorm<T>>,
    pub activation: Activation,
    pub dropout: f64,
    out: Option<Tensor<T>>,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn new(core: Core<T>, batch_norm: bool, activation: Activation, dropout: f64) -> Self {
        let channels = match &core {
            Core::Conv(c) => c.out_c,
            Core::TransConv(c) => c.out_c,
            Core::Linear(l) => l.out_f,
        };
        Block {
            core,
            bn: batch_norm.then(|| BatchNorm::new(channels)),
            activation,
            dropout,
            out: None,
            mask: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let z = match &mut self.core {
            Core::Conv(c) => c.forward(x)?,
            Core::TransConv(c) => c.forward(x)?,
            Core::Linear(l) => l.forward(x)?,
        };
        let z = match &mut self.bn {
            Some(bn) => bn.forward(&z, ctx)?,
            None => z,
        };
        let act = self.activation;
        let y = z.map(|v| act.apply(v));
        let out = if ctx.train && self.dropout > 0.0 {
            let keep = T::of(1.0 / (1.0 - self.dropout));
            let mask: Vec<T> = (0..y.len())
                .map(|_| {
                    if ctx.rng.gen::<f64>() < self.dropout {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            let mut d = y.clone();
            d.data_mut()
                .iter_mut()
                .zip(&mask)
                .for_each(|(v, &m)| *v = *v * m);
            self.mask = Some(mask);
            d
        } else {
            self.mask = None;
            y.clone()
        };
        self.out = Some(y);
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let y = self
            .out
            .take()
            .ok_or_else(|| Error::Shape("block backward without forward".into()))?;
        let mut dz = dy.clone();
        if let Some(mask) = self.mask.take() {
            dz.data_mut()
                .iter_mut()
                .zip(&mask)
                .for_each(|(v, &m)| *v = *v * m);
        }
        let act = self.activation;
        dz.data_mut()
            .iter_mut()
            .zip(y.data())
            .for_each(|(d, &o)| *d = *d * act.slope_from_output(o));
        let dz = match &mut self.bn {
            Some(bn) => bn.backward(&dz, param_grads)?,
            None => dz,
        };
        match &mut self.core {
            Core::Conv(c) => c.backward(&dz, param_grads),
            Core::TransConv(c) => c.backward(&dz, param_grads),
            Core::Linear(l) => l.backward(&dz, param_grads),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        match &mut self.core {
            Core::Conv(c) => c.visit(prefix, f),
            Core::TransConv(c) => c.visit(prefix, f),
            Core::Linear(l) => l.visit(prefix, f),
        }
        if let Some(bn) = &mut self.bn {
            bn.visit(&format!("{prefix}.bn"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct loop convolution used as an oracle for the im2col path.
    fn conv_loop(x: &Tensor<f64>, w: &[f64], out_c: usize, g: &ConvGeom) -> Tensor<f64> {
        let n = x.n();
        let mut y = Tensor::zeros(&[n, out_c, g.oh, g.ow]);
        for i in 0..n {
            for co in 0..out_c {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for ci in 0..g.c {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.sh + ky) as isize - g.pad_top as isize;
                                    let ix = (ox * g.sw + kx) as isize - g.pad_left as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.item(i)
                                        [(ci * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = w[co * g.c * g.kh * g.kw + (ci * g.kh + ky) * g.kw + kx];
                                    s += xv * wv;
                                }
                            }
                        }
                        y.item_mut(i)[(co * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn same_padding_halves_even_sizes() {
        let g = ConvGeom::same(3, 64, 64, (4, 4), (2, 2));
        assert_eq!((g.oh, g.ow, g.pad_top, g.pad_left), (32, 32, 1, 1));
        let g = ConvGeom::same(3, 8, 8, (4, 4), (1, 1));
        assert_eq!((g.oh, g.pad_top), (8, 1));
        let g = ConvGeom::same(3, 64, 64, (3, 3), (2, 2));
        assert_eq!((g.oh, g.pad_top), (32, 0));
        let g = ConvGeom::same(3, 1, 1, (4, 4), (2, 2));
        assert_eq!(g.oh, 1);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(3, 5, (4, 4), (2, 2), false, &mut rng);
        let x = rand_tensor(&[3, 3, 8, 6], 2);
        let y = conv.forward(&x).unwrap();
        let want = conv_loop(&x, &conv.weight.value, 5, &conv.geom(8, 6));
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trans_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv^T(y)> with shared weights.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = ConvTranspose2d::<f64>::new(4, 2, (4, 4), (2, 2), false, &mut rng);
        let y_small = rand_tensor(&[2, 4, 3, 3], 4);
        let x_big = rand_tensor(&[2, 2, 6, 6], 5);
        let up = t.forward(&y_small).unwrap();
        assert_eq!(up.shape(), &[2, 2, 6, 6]);
        let g = t.geom(3, 3);
        let down = conv_loop(&x_big, &t.weight.value, 4, &g);
        let lhs: f64 = up.data().iter().zip(x_big.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = down.data().iter().zip(y_small.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    fn fd_check_block(mut block: Block<f64>, x: Tensor<f64>, train: bool) {
        let probe = rand_tensor(&[x.n(), 1], 9);
        let loss = |b: &mut Block<f64>, x: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut ctx = Ctx {
                train,
                update_stats: false,
                rng: &mut rng,
            };
            let y = b.forward(x, &mut ctx).unwrap();
            let w: Vec<f64> = (0..y.len()).map(|i| ((i as f64) * 0.37).sin() + probe.data()[i % probe.len()]).collect();
            let l = y.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            (l, Tensor::from_vec(y.shape(), w).unwrap())
        };
        let (_, dy) = loss(&mut block, &x);
        let dx = block.backward(&dy, true).unwrap();
        let eps = 1e-6;
        for idx in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&mut block, &xp).0 - loss(&mut block, &xm).0) / (2.0 * eps);
            let a = dx.data()[idx];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "dx[{idx}] {a} vs {fd}");
        }
        let mut grads = Vec::new();
        block.visit("b", &mut |name, role, p| {
            if role == TensorRole::Trainable {
                grads.push((name.to_string(), p.grad.clone()));
            }
        });
        for (name, grad) in grads {
            for idx in (0..grad.len()).step_by(5) {
                let bump = |delta: f64, b: &mut Block<f64>| {
                    b.visit("b", &mut |n, _, p| {
                        if n == name {
                            p.value[idx] += delta;
                        }
                    });
                };
                bump(eps, &mut block);
                let lp = loss(&mut block, &x).0;
                bump(-2.0 * eps, &mut block);
                let lm = loss(&mut block, &x).0;
                bump(eps, &mut block);
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - grad[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{name}[{idx}] {} vs {fd}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn conv_bn_leaky_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let core = Core::Conv(Conv2d::new(2, 3, (4, 4), (2, 2), false, &mut rng));
        fd_check_block(Block::new(core, true, Activation::LeakyRelu, 0.0), rand_tensor(&[3, 2, 6, 6], 6), true);
    }

    #[test]
    fn trans_conv_dropout_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let core = Core::TransConv(ConvTranspose2d::new(3, 2, (4, 4), (2, 2), false, &mut rng));
        fd_check_block(Block::new(core, true, Activation::Relu, 0.5), rand_tensor(&[2, 3, 3, 3], 8), true);
    }

    #[test]
    fn linear_eval_bn_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let core = Core::Linear(Linear::new(7, 4, true, &mut rng));
        let mut block = Block::new(core, true, Activation::None, 0.0);
        if let Some(bn) = &mut block.bn {
            bn.running_mean.value = vec![0.1, -0.2, 0.3, 0.0];
            bn.running_var.value = vec![0.5, 2.0, 1.5, 1.0];
        }
        fd_check_block(block, rand_tensor(&[4, 7], 10), false);
    }

    #[test]
    fn conv_with_bias_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let core = Core::Conv(Conv2d::new(2, 2, (3, 3), (1, 1), true, &mut rng));
        fd_check_block(Block::new(core, false, Activation::None, 0.0), rand_tensor(&[2, 2, 5, 5], 12), true);
    }

    #[test]
    fn grouped_and_single_sample_conv_agree() {
        // A batch large enough to be split across several gemm groups.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut conv = Conv2d::<f64>::new(8, 4, (4, 4), (1, 1), false, &mut rng);
        let x = rand_tensor(&[40, 8, 64, 64], 14);
        let y = conv.forward(&x).unwrap();
        let single = Tensor::from_vec(&[1, 8, 64, 64], x.item(37).to_vec()).unwrap();
        let y1 = conv.forward(&single).unwrap();
        for (a, b) in y.item(37).iter().zip(y1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
