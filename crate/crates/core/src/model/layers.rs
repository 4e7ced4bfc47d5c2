//! Primitive differentiable layers.
//!
//! Every layer is a stateless descriptor: weights live in a [`ParameterSet`]
//! under names derived from the layer's `name` prefix, forward passes return
//! whatever cache the backward pass needs, and backward passes accumulate
//! gradients into a caller-owned gradient set. There is no tape — composite
//! models chain these calls by hand, which keeps gradient flow (and the
//! deliberate *absence* of gradient flow through detached branches) explicit
//! and auditable.
//!
//! Convolution is evaluated as a matrix product over an im2col expansion, and
//! batch normalization follows the usual train/eval split: batch statistics
//! during training with running-moment buffers updated as a side effect, the
//! frozen buffers at evaluation time.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis, Dimension, Ix1, Ix2, Ix4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::{cast, Scalar};

/// Substring that marks a tensor as a non-trainable statistics buffer.
/// Optimizers never see these (no gradient is ever accumulated for them) and
/// gradient checks skip them.
pub const BUFFER_MARKER: &str = "running_";

/// True for tensors that receive gradients, false for statistics buffers.
pub fn is_trainable(name: &str) -> bool {
    !name.contains(BUFFER_MARKER)
}

pub(crate) fn view1<'a, F: Scalar>(
    ps: &'a ParameterSet<F>,
    name: &str,
) -> Result<ArrayView1<'a, F>> {
    ps.get(name)?
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::InvalidArgument(format!("parameter `{name}` is not 1-d")))
}

pub(crate) fn view2<'a, F: Scalar>(
    ps: &'a ParameterSet<F>,
    name: &str,
) -> Result<ArrayView2<'a, F>> {
    ps.get(name)?
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::InvalidArgument(format!("parameter `{name}` is not 2-d")))
}

fn kaiming_uniform<F: Scalar>(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> ndarray::ArrayD<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    ndarray::ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        cast::<F>(rng.random_range(-bound..bound))
    })
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// `y = x Wᵀ (+ b)` with `W: (out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

/// Input activations saved for the weight gradient.
#[derive(Debug, Clone)]
pub struct LinearCache<F> {
    x: Array2<F>,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParameterSet<F>, rng: &mut impl Rng) -> Result<()> {
        ps.insert(
            self.weight_name(),
            kaiming_uniform(rng, self.in_dim, &[self.out_dim, self.in_dim]),
        )?;
        if self.bias {
            // Small uniform bias (not zero): a zero bias behind a ReLU
            // bottleneck can make entire output rows exactly zero at init,
            // which is degenerate for cosine-based objectives.
            let bound = 1.0 / (self.in_dim.max(1) as f64).sqrt();
            ps.insert(
                self.bias_name(),
                ndarray::ArrayD::from_shape_simple_fn(vec![self.out_dim], || {
                    cast::<F>(rng.random_range(-bound..bound))
                }),
            )?;
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        x: &Array2<F>,
    ) -> Result<(Array2<F>, LinearCache<F>)> {
        if x.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch {
                context: format!("linear `{}` input", self.name),
                expected: vec![x.nrows(), self.in_dim],
                got: vec![x.nrows(), x.ncols()],
            });
        }
        let w = view2(ps, &self.weight_name())?;
        let mut y = x.dot(&w.t());
        if self.bias {
            y += &view1(ps, &self.bias_name())?;
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &LinearCache<F>,
        dy: &Array2<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<Array2<F>> {
        let w = view2(ps, &self.weight_name())?;
        grads.accumulate(&self.weight_name(), dy.t().dot(&cache.x).into_dyn())?;
        if self.bias {
            grads.accumulate(&self.bias_name(), dy.sum_axis(Axis(0)).into_dyn())?;
        }
        Ok(dy.dot(&w))
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)`; the returned mask is the cache for the backward
/// pass.
pub fn relu<F: Scalar, D: Dimension>(
    x: &ndarray::Array<F, D>,
) -> (ndarray::Array<F, D>, ndarray::Array<F, D>) {
    let mask = x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
    (x * &mask, mask)
}

pub fn relu_backward<F: Scalar, D: Dimension>(
    mask: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    dy * mask
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-feature affine batch normalization over the rows of a matrix.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
    /// Fraction of the batch statistic mixed into the running buffers per
    /// training step.
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Array2<F>,
    invstd: Array1<F>,
}

impl BatchNorm1d {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn pname(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParameterSet<F>) -> Result<()> {
        ps.insert(self.pname("gamma"), ndarray::ArrayD::ones(vec![self.dim]))?;
        ps.insert(self.pname("beta"), ndarray::ArrayD::zeros(vec![self.dim]))?;
        ps.insert(
            self.pname("running_mean"),
            ndarray::ArrayD::zeros(vec![self.dim]),
        )?;
        ps.insert(
            self.pname("running_var"),
            ndarray::ArrayD::ones(vec![self.dim]),
        )?;
        Ok(())
    }

    /// Normalize with batch statistics and fold them into the running
    /// buffers. The buffer update is the one place a forward pass writes to
    /// the parameter set.
    pub fn forward_train<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        x: &Array2<F>,
    ) -> Result<(Array2<F>, BnCache<F>)> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty(format!("batch into `{}`", self.name)));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(Axis(0))
            .expect("non-empty batch");
        let eps = cast::<F>(self.eps);
        let invstd = var.mapv(|v| (v + eps).sqrt().recip());
        let xhat = &centered * &invstd;

        let gamma = view1(ps, &self.pname("gamma"))?;
        let beta = view1(ps, &self.pname("beta"))?;
        let y = &xhat * &gamma + &beta;

        // PyTorch convention: normalize with the biased variance, track the
        // unbiased one.
        let track_var = if n > 1 {
            var.mapv(|v| v * cast::<F>(n as f64 / (n as f64 - 1.0)))
        } else {
            var
        };
        let m = cast::<F>(self.momentum);
        let one_m = F::one() - m;
        ps.get_mut(&self.pname("running_mean"))?
            .zip_mut_with(&mean.into_dyn(), |r, &b| *r = one_m * *r + m * b);
        ps.get_mut(&self.pname("running_var"))?
            .zip_mut_with(&track_var.into_dyn(), |r, &b| *r = one_m * *r + m * b);

        Ok((y, BnCache { xhat, invstd }))
    }

    /// Normalize with the frozen running buffers; no cache, no side effects.
    pub fn forward_eval<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        x: &Array2<F>,
    ) -> Result<Array2<F>> {
        let mean = view1(ps, &self.pname("running_mean"))?;
        let var = view1(ps, &self.pname("running_var"))?;
        let gamma = view1(ps, &self.pname("gamma"))?;
        let beta = view1(ps, &self.pname("beta"))?;
        let eps = cast::<F>(self.eps);
        let invstd = var.mapv(|v| (v + eps).sqrt().recip());
        Ok((x - &mean) * &invstd * &gamma + &beta)
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &BnCache<F>,
        dy: &Array2<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<Array2<F>> {
        let gamma = view1(ps, &self.pname("gamma"))?;
        let n = cast::<F>(dy.nrows() as f64);

        grads.accumulate(
            &self.pname("gamma"),
            (dy * &cache.xhat).sum_axis(Axis(0)).into_dyn(),
        )?;
        grads.accumulate(&self.pname("beta"), dy.sum_axis(Axis(0)).into_dyn())?;

        let dxhat = dy * &gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let dx = (dxhat.mapv(|v| v * n) - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat)
            * &cache.invstd.mapv(|v| v / n);
        Ok(dx)
    }
}

/// Channelwise batch normalization over `(N, C, H, W)` maps, implemented by
/// flattening the spatial axes onto the batch axis and reusing the 1-d math.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    inner: BatchNorm1d,
}

#[derive(Debug, Clone)]
pub struct Bn2dCache<F> {
    cache: BnCache<F>,
    dims: (usize, usize, usize, usize),
}

fn nchw_to_rows<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .expect("contiguous reshape")
}

fn rows_to_nchw<F: Scalar>(rows: Array2<F>, dims: (usize, usize, usize, usize)) -> Array4<F> {
    let (n, c, h, w) = dims;
    let nhwc = rows
        .into_shape_with_order((n, h, w, c))
        .expect("contiguous reshape");
    nhwc.permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            inner: BatchNorm1d::new(name, channels),
        }
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParameterSet<F>) -> Result<()> {
        self.inner.register(ps)
    }

    pub fn forward_train<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        x: &Array4<F>,
    ) -> Result<(Array4<F>, Bn2dCache<F>)> {
        let dims = x.dim();
        let (y2, cache) = self.inner.forward_train(ps, &nchw_to_rows(x))?;
        Ok((rows_to_nchw(y2, dims), Bn2dCache { cache, dims }))
    }

    pub fn forward_eval<F: Scalar>(&self, ps: &ParameterSet<F>, x: &Array4<F>) -> Result<Array4<F>> {
        let dims = x.dim();
        Ok(rows_to_nchw(self.inner.forward_eval(ps, &nchw_to_rows(x))?, dims))
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &Bn2dCache<F>,
        dy: &Array4<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<Array4<F>> {
        let dx2 = self.inner.backward(ps, &cache.cache, &nchw_to_rows(dy), grads)?;
        Ok(rows_to_nchw(dx2, cache.dims))
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Square-kernel 2-d convolution evaluated as `im2col · Wᵀ`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

/// Unfold padded `k×k` patches into rows: one row per output position, one
/// column per `(channel, ky, kx)` tap. Out-of-image taps stay zero.
fn im2col<F: Scalar>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<F>, (usize, usize)) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, (ci * k + ky) * k + kx]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (cols, (oh, ow))
}

/// Adjoint of [`im2col`]: scatter-add patch-gradient rows back onto the input.
fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, h, w) = dims;
    let (oh, ow) = out_hw;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] +=
                                dcols[[row, (ci * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParameterSet<F>, rng: &mut impl Rng) -> Result<()> {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        ps.insert(
            self.weight_name(),
            kaiming_uniform(
                rng,
                fan_in,
                &[self.out_channels, self.in_channels, self.kernel, self.kernel],
            ),
        )?;
        if self.bias {
            let bound = 1.0 / (fan_in as f64).sqrt();
            ps.insert(
                self.bias_name(),
                ndarray::ArrayD::from_shape_simple_fn(vec![self.out_channels], || {
                    cast::<F>(rng.random_range(-bound..bound))
                }),
            )?;
        }
        Ok(())
    }

    /// Weight viewed as `(out, in·k·k)` for the matrix product.
    fn weight2<'a, F: Scalar>(&self, ps: &'a ParameterSet<F>) -> Result<ArrayView2<'a, F>> {
        let w = ps.get(&self.weight_name())?;
        let taps = self.in_channels * self.kernel * self.kernel;
        w.view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::InvalidArgument(format!("`{}` is not 4-d", self.weight_name())))?
            .into_shape_with_order((self.out_channels, taps))
            .map_err(|_| Error::InvalidArgument(format!("`{}` not contiguous", self.weight_name())))
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        x: &Array4<F>,
    ) -> Result<(Array4<F>, ConvCache<F>)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: format!("conv `{}` input channels", self.name),
                expected: vec![self.in_channels],
                got: vec![c],
            });
        }
        let (cols, (oh, ow)) = im2col(x, self.kernel, self.stride, self.pad);
        let w2 = self.weight2(ps)?;
        let mut y_mat = cols.dot(&w2.t());
        if self.bias {
            y_mat += &view1(ps, &self.bias_name())?;
        }
        let y = rows_to_nchw(y_mat, (n, self.out_channels, oh, ow));
        Ok((
            y,
            ConvCache {
                cols,
                in_dims: (n, c, h, w),
                out_hw: (oh, ow),
            },
        ))
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &ConvCache<F>,
        dy: &Array4<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<Array4<F>> {
        let dy_mat = nchw_to_rows(dy);
        let dw2 = dy_mat.t().dot(&cache.cols);
        grads.accumulate(
            &self.weight_name(),
            dw2.into_shape_with_order((
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ))
            .expect("contiguous reshape")
            .into_dyn(),
        )?;
        if self.bias {
            grads.accumulate(&self.bias_name(), dy_mat.sum_axis(Axis(0)).into_dyn())?;
        }
        let w2 = self.weight2(ps)?;
        let dcols = dy_mat.dot(&w2);
        Ok(col2im(
            &dcols,
            cache.in_dims,
            self.kernel,
            self.stride,
            self.pad,
            cache.out_hw,
        ))
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Non-overlapping mean pooling with a square window.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub window: usize,
}

impl AvgPool2d {
    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (n, c, h, w) = x.dim();
        let k = self.window;
        if h % k != 0 || w % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "pool window {k} does not divide {h}x{w} feature map"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = cast::<F>(1.0 / (k * k) as f64);
        let mut y = Array4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = F::zero();
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += x[[ni, ci, oy * k + ky, ox * k + kx]];
                            }
                        }
                        y[[ni, ci, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward<F: Scalar>(&self, dy: &Array4<F>, in_hw: (usize, usize)) -> Array4<F> {
        let (n, c, oh, ow) = dy.dim();
        let k = self.window;
        let inv = cast::<F>(1.0 / (k * k) as f64);
        let mut dx = Array4::zeros((n, c, in_hw.0, in_hw.1));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[[ni, ci, oy, ox]] * inv;
                        for ky in 0..k {
                            for kx in 0..k {
                                dx[[ni, ci, oy * k + ky, ox * k + kx]] = g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Mean over the spatial axes: `(N, C, H, W) → (N, C)`.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let inv = cast::<F>(1.0 / (h * w) as f64);
    let mut y = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = F::zero();
            for iy in 0..h {
                for ix in 0..w {
                    acc += x[[ni, ci, iy, ix]];
                }
            }
            y[[ni, ci]] = acc * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &Array2<F>, hw: (usize, usize)) -> Array4<F> {
    let (n, c) = dy.dim();
    let (h, w) = hw;
    let inv = cast::<F>(1.0 / (h * w) as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy[[ni, ci]] * inv;
            dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g);
        }
    }
    dx
}
