use rand_chacha::ChaCha8Rng;

use crate::dataset::{Grid, M2N_MAX};
use crate::error::{Error, Result};
use crate::layers::{Block, Ctx, Visitor};
use crate::nets::{block, grids_to_tensor, out_size, tensor_to_grid, with_mode, Conditioning, NetworkSpec};
use crate::tensor::{Scalar, Tensor};

/// U-Net generator. Row `r` receives the previous row's output, with the
/// output of any row whose `skip_to` is `r` appended as extra channels.
pub struct Generator<T> {
    spec: NetworkSpec,
    image_size: usize,
    rows: Vec<Block<T>>,
    /// For each row, the row whose output is concatenated onto its input.
    skip_src: Vec<Option<usize>>,
    /// Channel split `[prev, skip]` of each row input, recorded per forward.
    splits: Vec<Option<(usize, usize)>>,
    ablated: Option<usize>,
    pub trainable: bool,
}

impl<T: Scalar> Generator<T> {
    pub(crate) fn build(spec: NetworkSpec, image_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = spec.layers.len();
        let mut skip_src = vec![None; n];
        for (i, l) in spec.layers.iter().enumerate() {
            if let Some(t) = l.skip_to {
                skip_src[t] = Some(i);
            }
        }
        let mut widths = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        let mut prev = spec.in_channels;
        for (r, l) in spec.layers.iter().enumerate() {
            let in_dim = prev + skip_src[r].map_or(0, |s| widths[s]);
            rows.push(block(l, in_dim, rng));
            widths.push(l.out_dim);
            prev = l.out_dim;
        }
        Ok(Generator {
            spec,
            image_size,
            rows,
            skip_src,
            splits: vec![None; n],
            ablated: None,
            trainable: true,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Expected spatial size of each row's output for a square input of `size`.
    pub fn row_sizes(&self, size: usize) -> Vec<usize> {
        let mut s = size;
        self.spec
            .layers
            .iter()
            .map(|l| {
                s = out_size(l, s);
                s
            })
            .collect()
    }

    /// Assembles `[ir1, wv]` plus the conditioning channel when the spec
    /// calls for one. `m2n` holds one value in minutes per batch item.
    pub fn input(&self, ir1: &Tensor<T>, wv: &Tensor<T>, m2n: Option<&[f64]>) -> Result<Tensor<T>> {
        match (self.spec.conditioning, m2n) {
            (Conditioning::None, None) => Tensor::concat_channels(&[ir1, wv]),
            (Conditioning::M2nChannel, Some(m)) => {
                if m.len() != ir1.n() {
                    return Err(Error::InvalidInput(format!(
                        "{} m2n values for a batch of {}",
                        m.len(),
                        ir1.n()
                    )));
                }
                let mut cond = Tensor::zeros(ir1.shape());
                for (i, &v) in m.iter().enumerate() {
                    if !(0.0..=M2N_MAX).contains(&v) {
                        return Err(Error::InvalidInput(format!("m2n {v} outside [0, {M2N_MAX}]")));
                    }
                    cond.item_mut(i).fill(T::of(v / M2N_MAX));
                }
                Tensor::concat_channels(&[ir1, wv, &cond])
            }
            (Conditioning::None, Some(_)) => Err(Error::InvalidInput(format!(
                "{} takes no m2n conditioning",
                self.spec.name
            ))),
            (Conditioning::M2nChannel, None) => Err(Error::InvalidInput(format!(
                "{} requires m2n conditioning",
                self.spec.name
            ))),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        self.run(x, ctx, None, None)
    }

    /// Forward pass that also returns every row's output.
    pub fn forward_traced(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut trace = Vec::new();
        let y = self.run(x, ctx, None, Some(&mut trace))?;
        Ok((y, trace))
    }

    /// Forward pass in which the skip copy of row `row`'s output is replaced
    /// by zeros; the main path is untouched.
    pub fn forward_ablated(
        &mut self,
        x: &Tensor<T>,
        ctx: &mut Ctx<'_>,
        row: usize,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut trace = Vec::new();
        let y = self.run(x, ctx, Some(row), Some(&mut trace))?;
        Ok((y, trace))
    }

    fn run(
        &mut self,
        x: &Tensor<T>,
        ctx: &mut Ctx<'_>,
        ablate: Option<usize>,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "{} expects [N, {}, H, W], got {s:?}",
                self.spec.name, self.spec.in_channels
            )));
        }
        let divisor = self.spec.size_divisor();
        if s[2] % divisor != 0 || s[3] % divisor != 0 {
            return Err(Error::ImageSize { size: s[2], divisor });
        }
        let frozen = !self.trainable;
        let n = self.rows.len();
        // outputs kept only for rows that feed a skip
        let mut saved: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut h = x.clone();
        for r in 0..n {
            let input = match self.skip_src[r] {
                Some(src) => {
                    let skip = saved[src].take().expect("skip source ran earlier");
                    let skip = if ablate == Some(src) { Tensor::zeros(skip.shape()) } else { skip };
                    self.splits[r] = Some((h.shape()[1], skip.shape()[1]));
                    Tensor::concat_channels(&[&h, &skip])?
                }
                None => {
                    self.splits[r] = None;
                    h
                }
            };
            let row = &mut self.rows[r];
            h = with_mode(frozen, ctx, |c| row.forward(&input, c))?;
            if self.spec.layers[r].skip_to.is_some() {
                saved[r] = Some(h.clone());
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(h.clone());
            }
        }
        self.ablated = ablate;
        Ok(h)
    }

    /// Backpropagates `dy` from the last forward and returns the input
    /// gradient. Parameter gradients accumulate only when the network is
    /// trainable and `param_grads` is set.
    pub fn backward(&mut self, dy: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let pg = param_grads && self.trainable;
        let n = self.rows.len();
        let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut d = dy.clone();
        for r in (0..n).rev() {
            if let Some(g) = d_skip[r].take() {
                d.add_assign(&g);
            }
            let din = self.rows[r].backward(&d, pg)?;
            d = match (self.skip_src[r], self.splits[r]) {
                (Some(src), Some((a, b))) => {
                    let mut parts = din.split_channels(&[a, b]).into_iter();
                    let main = parts.next().expect("two parts");
                    if self.ablated != Some(src) {
                        d_skip[src] = parts.next();
                    }
                    main
                }
                _ => din,
            };
        }
        Ok(d)
    }

    pub fn visit(&mut self, f: &mut Visitor<'_, T>) {
        for (r, row) in self.rows.iter_mut().enumerate() {
            row.visit(&format!("row{r}"), f);
        }
    }

    /// Generates one grid in inference mode.
    pub fn generate(&mut self, ir1: &Grid, wv: &Grid, m2n: Option<f64>, ctx: &mut Ctx<'_>) -> Result<Grid> {
        if ir1.dim() != wv.dim() {
            return Err(Error::Shape(format!("ir1 {:?} vs wv {:?}", ir1.dim(), wv.dim())));
        }
        let a: Tensor<T> = grids_to_tensor(&[ir1])?;
        let b: Tensor<T> = grids_to_tensor(&[wv])?;
        let x = self.input(&a, &b, m2n.as_ref().map(std::slice::from_ref))?;
        let mut eval = Ctx {
            train: false,
            update_stats: false,
            rng: &mut *ctx.rng,
        };
        let y = self.forward(&x, &mut eval)?;
        Ok(tensor_to_grid(&y))
    }
}
