//! Single-sample layers with explicit backward passes.
//!
//! Feature maps are channel-first `[C, H, W]` arrays. Every `backward`
//! accumulates parameter gradients into a gradient struct of the same type
//! and returns the gradient with respect to the layer input.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use super::params::{ParamSink, ParamSinkMut, Params};
use super::scalar::Scalar;

fn uniform_init<F: Scalar, R: Rng + ?Sized>(rng: &mut R, bound: f64, n: usize) -> Vec<F> {
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| F::of(dist.sample(rng))).collect()
}

/// Unfolds `k×k` patches of `x` into columns: `[C·k·k, out_h·out_w]`.
pub fn im2col<F: Scalar>(
    x: ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<F>::zeros((c * k * k, out_h * out_w));
    let cs = cols.as_slice_mut().expect("fresh array");
    let ncols = out_h * out_w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cs[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[oy * out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into a `[C, h, w]` map,
/// summing overlapping contributions.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<F> {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let ncols = out_h * out_w;
    let mut x = Array3::<F>::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cs[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            xs[base + ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn flat2<F: Scalar>(a: &Array3<F>) -> ArrayView2<'_, F> {
    let (c, h, w) = a.dim();
    a.view().into_shape_with_order((c, h * w)).expect("contiguous map")
}

fn contiguous<F: Scalar>(a: &Array3<F>) -> Array3<F> {
    a.as_standard_layout().into_owned()
}

/// Strided 2-D convolution, weight `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    /// Drops the bias, for layers followed by a normalization that would
    /// cancel it. An empty bias vector means no bias.
    pub fn without_bias(mut self) -> Self {
        self.bias = Array1::zeros(0);
        self
    }

    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array4::from_shape_vec(
            (out_ch, in_ch, kernel, kernel),
            uniform_init(rng, bound, out_ch * fan_in),
        )
        .expect("shape");
        let bias = Array1::from(uniform_init(rng, bound, out_ch));
        Self { weight, bias, stride, padding }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (_, h, w) = x.dim();
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let cols = im2col(x.view(), self.kernel(), self.stride, self.padding, oh, ow);
        let mut y = self.weight_matrix().dot(&cols);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        y.into_shape_with_order((self.out_channels(), oh, ow))
            .expect("output shape")
    }

    pub fn backward(&self, x: &Array3<F>, dy: &Array3<F>, grad: &mut Self) -> Array3<F> {
        let (c, h, w) = x.dim();
        let (_, oh, ow) = dy.dim();
        let k = self.kernel();
        let cols = im2col(x.view(), k, self.stride, self.padding, oh, ow);
        let dy = contiguous(dy);
        let dy_mat = flat2(&dy);
        {
            let (o, i, _, _) = grad.weight.dim();
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((o, i * k * k))
                .expect("contiguous weight");
            ndarray::linalg::general_mat_mul(F::one(), &dy_mat, &cols.t(), F::one(), &mut gw);
        }
        if !grad.bias.is_empty() {
            grad.bias += &dy_mat.sum_axis(Axis(1));
        }
        let dcols = self.weight_matrix().t().dot(&dy_mat);
        col2im(dcols.view(), c, h, w, k, self.stride, self.padding, oh, ow)
    }
}

impl<F: Scalar> Params<F> for Conv2d<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        out.push(self.weight.view_mut().into_dyn());
        out.push(self.bias.view_mut().into_dyn());
    }
}

/// Transposed convolution, weight `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> ConvTranspose2d<F> {
    /// Drops the bias, for layers followed by a normalization that would
    /// cancel it. An empty bias vector means no bias.
    pub fn without_bias(mut self) -> Self {
        self.bias = Array1::zeros(0);
        self
    }

    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = out_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array4::from_shape_vec(
            (in_ch, out_ch, kernel, kernel),
            uniform_init(rng, bound, in_ch * fan_in),
        )
        .expect("shape");
        let bias = Array1::from(uniform_init(rng, bound, out_ch));
        Self { weight, bias, stride, padding }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel() - 2 * self.padding
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        let (i, o, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((i, o * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (_, h, w) = x.dim();
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let x = contiguous(x);
        let cols = self.weight_matrix().t().dot(&flat2(&x));
        let mut y = col2im(
            cols.view(),
            self.out_channels(),
            oh,
            ow,
            self.kernel(),
            self.stride,
            self.padding,
            h,
            w,
        );
        for (mut plane, &b) in y.outer_iter_mut().zip(self.bias.iter()) {
            plane.mapv_inplace(|v| v + b);
        }
        y
    }

    pub fn backward(&self, x: &Array3<F>, dy: &Array3<F>, grad: &mut Self) -> Array3<F> {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let dcols = im2col(dy.view(), k, self.stride, self.padding, h, w);
        let x = contiguous(x);
        let x_mat = flat2(&x);
        {
            let (i, o, _, _) = grad.weight.dim();
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((i, o * k * k))
                .expect("contiguous weight");
            ndarray::linalg::general_mat_mul(F::one(), &x_mat, &dcols.t(), F::one(), &mut gw);
        }
        for (g, plane) in grad.bias.iter_mut().zip(dy.outer_iter()) {
            *g += plane.sum();
        }
        self.weight_matrix()
            .dot(&dcols)
            .into_shape_with_order((c, h, w))
            .expect("input shape")
    }
}

impl<F: Scalar> Params<F> for ConvTranspose2d<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        out.push(self.weight.view_mut().into_dyn());
        out.push(self.bias.view_mut().into_dyn());
    }
}

/// Per-sample, per-channel normalization over spatial positions with a
/// learned affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct NormCache<F> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
}

const NORM_EPS: f64 = 1e-5;

impl<F: Scalar> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, NormCache<F>) {
        let (c, h, w) = x.dim();
        let n = F::of((h * w) as f64);
        let mut xhat = Array3::zeros((c, h, w));
        let mut inv_std = Array1::zeros(c);
        let mut y = Array3::zeros((c, h, w));
        for ch in 0..c {
            let plane = x.slice(s![ch, .., ..]);
            let mean = plane.sum() / n;
            let var = plane.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = F::one() / (var + F::of(NORM_EPS)).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            Zip::from(xhat.slice_mut(s![ch, .., ..]))
                .and(y.slice_mut(s![ch, .., ..]))
                .and(&plane)
                .for_each(|xh, yv, &xv| {
                    *xh = (xv - mean) * is;
                    *yv = g * *xh + b;
                });
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &NormCache<F>, dy: &Array3<F>, grad: &mut Self) -> Array3<F> {
        let (c, h, w) = dy.dim();
        let n = F::of((h * w) as f64);
        let mut dx = Array3::zeros((c, h, w));
        for ch in 0..c {
            let dyp = dy.slice(s![ch, .., ..]);
            let xh = cache.xhat.slice(s![ch, .., ..]);
            let sum_dy = dyp.sum();
            let sum_dy_xh = Zip::from(&dyp)
                .and(&xh)
                .fold(F::zero(), |acc, &a, &b| acc + a * b);
            grad.gamma[ch] += sum_dy_xh;
            grad.beta[ch] += sum_dy;
            // dxhat = gamma * dy
            let g = self.gamma[ch];
            let scale = g * cache.inv_std[ch] / n;
            Zip::from(dx.slice_mut(s![ch, .., ..]))
                .and(&dyp)
                .and(&xh)
                .for_each(|d, &dyv, &xhv| {
                    *d = scale * (n * dyv - sum_dy - xhv * sum_dy_xh);
                });
        }
        dx
    }
}

impl<F: Scalar> Params<F> for InstanceNorm<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        out.push(self.gamma.view_mut().into_dyn());
        out.push(self.beta.view_mut().into_dyn());
    }
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_vec((outputs, inputs), uniform_init(rng, bound, outputs * inputs))
                .expect("shape"),
            bias: Array1::from(uniform_init(rng, bound, outputs)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<F>) -> Array1<F> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn backward(&self, x: ArrayView1<F>, dy: ArrayView1<F>, grad: &mut Self) -> Array1<F> {
        outer_acc(&mut grad.weight, dy, x);
        grad.bias += &dy;
        self.weight.t().dot(&dy)
    }
}

impl<F: Scalar> Params<F> for Dense<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        out.push(self.weight.view_mut().into_dyn());
        out.push(self.bias.view_mut().into_dyn());
    }
}

/// `acc += a bᵀ`
pub fn outer_acc<F: Scalar>(acc: &mut Array2<F>, a: ArrayView1<F>, b: ArrayView1<F>) {
    for (mut row, &ai) in acc.outer_iter_mut().zip(a.iter()) {
        if ai == F::zero() {
            continue;
        }
        row.scaled_add(ai, &b);
    }
}

pub fn leaky_relu<F: Scalar, D: ndarray::Dimension>(x: &mut ndarray::Array<F, D>, slope: F) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
}

/// Backward through leaky ReLU given its output (sign is preserved).
pub fn leaky_relu_backward<F: Scalar, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &mut ndarray::Array<F, D>,
    slope: F,
) {
    Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= F::zero() {
            *d *= slope;
        }
    });
}

pub fn relu_backward<F: Scalar, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &mut ndarray::Array<F, D>,
) {
    Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Concatenates two maps along the channel axis.
pub fn concat_channels<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient into its two parts.
pub fn split_channels<F: Scalar>(x: &Array3<F>, first: usize) -> (Array3<F>, Array3<F>) {
    (
        x.slice(s![..first, .., ..]).to_owned(),
        x.slice(s![first.., .., ..]).to_owned(),
    )
}
