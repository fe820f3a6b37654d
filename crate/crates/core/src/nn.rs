//! Small f64 layer library with hand-written backward passes.
//!
//! Activations of convolutional layers are stored channel-last as a
//! `[batch * height * width, channels]` matrix so pointwise convolutions and
//! linear layers share the same GEMM path.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, QuantScheme};

pub const LN_EPS: f64 = 1e-5;

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
    /// Whether decoupled weight decay applies (weights yes, biases no).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Array2<f64>, decay: bool) -> Self {
        let z = Array2::zeros(value.raw_dim());
        Self {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub trait HasParams {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    /// Advances the step counter; call once per optimizer step before [`Self::update`].
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&self, p: &mut Param) {
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let wd = if p.decay { self.weight_decay } else { 0.0 };
        Zip::from(&mut p.value)
            .and(&p.grad)
            .and(&mut p.m)
            .and(&mut p.v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * (mh / (vh.sqrt() + eps) + wd * *w);
            });
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.tick();
        for p in params {
            self.update(p);
        }
    }
}

fn he_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        Self::from_weights(he_init(rng, d_out, d_in, d_in), Array1::zeros(d_out))
    }

    pub fn from_weights(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        let n = bias.len();
        Self {
            weight: Param::new(weight, true),
            bias: Param::new(bias.into_shape_with_order((1, n)).unwrap(), false),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        linear_forward(x, self.weight.value.view(), &self.bias.value)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        self.weight.grad += &dy.t().dot(&x);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.value)
    }

    /// Input gradient only, for adjoint products with frozen parameters.
    pub fn backward_input(&self, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        dy.dot(&self.weight.value)
    }
}

impl HasParams for Linear {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn linear_forward(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    b: &Array2<f64>,
) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += &b.row(0);
    y
}

/// Linear layer whose weights are fake-quantized per output channel in the
/// forward pass; the backward pass uses the straight-through estimator.
#[derive(Debug, Clone)]
pub struct QuantLinear {
    pub inner: Linear,
    pub bits: u8,
    scheme: Option<QuantScheme>,
}

impl QuantLinear {
    pub fn new(inner: Linear, bits: u8) -> Result<Self> {
        if !quant::bits_supported(bits) {
            return Err(Error::InvalidArgument(format!(
                "unsupported precision {bits}"
            )));
        }
        Ok(Self {
            inner,
            bits,
            scheme: None,
        })
    }

    /// Recomputes per-channel weight scales from the current weights.
    pub fn calibrate(&mut self) -> Result<()> {
        self.scheme = if self.bits == quant::PASSTHROUGH_BITS {
            None
        } else {
            Some(quant::calibrate_scales(
                self.inner.weight.value.view(),
                self.bits,
            )?)
        };
        Ok(())
    }

    pub fn scheme(&self) -> Option<&QuantScheme> {
        self.scheme.as_ref()
    }

    pub fn set_scheme(&mut self, scheme: Option<QuantScheme>) -> Result<()> {
        if let Some(s) = &scheme {
            if s.bits() != self.bits {
                return Err(Error::InvalidArgument(format!(
                    "{}-bit scheme on {}-bit layer",
                    s.bits(),
                    self.bits
                )));
            }
            s.check_rows(self.inner.d_out())?;
        }
        self.scheme = scheme;
        Ok(())
    }

    /// Effective (dequantized) weight matrix used in the forward pass.
    pub fn effective_weight(&self) -> Result<Array2<f64>> {
        match &self.scheme {
            None => Ok(self.inner.weight.value.clone()),
            Some(s) => Ok(quant::quantize_ste(self.inner.weight.value.view(), s)?.1),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(linear_forward(
            x,
            self.effective_weight()?.view(),
            &self.inner.bias.value,
        ))
    }

    pub fn backward(
        &mut self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let w_eff = self.effective_weight()?;
        let dw = dy.t().dot(&x);
        let dw = match &self.scheme {
            None => dw,
            Some(s) => quant::ste_backward(dw.view(), self.inner.weight.value.view(), s)?,
        };
        self.inner.weight.grad += &dw;
        self.inner.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok(dy.dot(&w_eff))
    }
}

impl HasParams for QuantLinear {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.inner.params_mut()
    }
}

/// Row-wise LayerNorm without affine parameters. Returns the output and the
/// per-row inverse standard deviations needed by [`layer_norm_backward`].
pub fn layer_norm(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut y = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, is) in y.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mu = row.sum() / n;
        row -= mu;
        let var = row.dot(&row) / n;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    (y, inv)
}

pub fn layer_norm_backward(
    y: ArrayView2<'_, f64>,
    inv_std: &Array1<f64>,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = y.ncols() as f64;
    let mut dx = dy.to_owned();
    for ((mut dxr, yr), is) in dx.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
        let mdy = dxr.sum() / n;
        let mdyy = dxr.dot(&yr) / n;
        Zip::from(&mut dxr)
            .and(&yr)
            .for_each(|d, &yv| *d = is * (*d - mdy - yv * mdyy));
    }
    dx
}

/// Fixed-point scale of the INT8 LayerNorm output (values in ±8).
pub const QLN_OUT_SCALE: f64 = 1.0 / 16.0;

/// LayerNorm computed on per-row INT8 codes with integer mean and variance,
/// requantized to INT8 at [`QLN_OUT_SCALE`]. Returns the dequantized output.
pub fn qlayer_norm_int8(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.ncols() as i64;
    let (_, hi) = quant::clip_range(8);
    let mut out = Array2::zeros(x.raw_dim());
    for (row, mut orow) in x.rows().into_iter().zip(out.rows_mut()) {
        let amax = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if amax == 0.0 {
            continue;
        }
        let s = amax / hi as f64;
        let codes: Vec<i64> = row
            .iter()
            .map(|&v| quant::quantize_value(v, s, 8) as i64)
            .collect();
        let sum: i64 = codes.iter().sum();
        let sumsq: i64 = codes.iter().map(|c| c * c).sum();
        // n^2 * var and n * mean stay integral
        let var_n2 = (n * sumsq - sum * sum) as f64;
        let denom = (var_n2 / (n * n) as f64 + LN_EPS / (s * s)).sqrt();
        for (o, &c) in orow.iter_mut().zip(&codes) {
            let centered = (c * n - sum) as f64 / n as f64;
            let y = centered / denom;
            *o = quant::quantize_value(y, QLN_OUT_SCALE, 8) as f64 * QLN_OUT_SCALE;
        }
    }
    out
}

pub fn silu(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_backward(x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(&x).for_each(|d, &v| {
        let sg = 1.0 / (1.0 + (-v).exp());
        *d *= sg * (1.0 + v * (1.0 - sg));
    });
    dx
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask(rng: &mut (impl Rng + ?Sized), shape: (usize, usize), p: f64) -> Array2<f64> {
    if p <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Spatial metadata for channel-last activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spatial {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Spatial {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Non-overlapping `p×p` patch extraction: `[B, H, W]` to `[B*(H/p)*(W/p), p*p]`.
pub fn patchify(x: ArrayView3<'_, f64>, p: usize) -> Result<(Array2<f64>, Spatial)> {
    let (b, h, w) = x.dim();
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch {p}")));
    }
    let sp = Spatial {
        batch: b,
        height: h / p,
        width: w / p,
    };
    let mut out = Array2::zeros((sp.rows(), p * p));
    for bi in 0..b {
        for i in 0..sp.height {
            for j in 0..sp.width {
                let r = (bi * sp.height + i) * sp.width + j;
                let patch = x.slice(s![bi, i * p..(i + 1) * p, j * p..(j + 1) * p]);
                for (o, v) in out.row_mut(r).iter_mut().zip(patch.iter()) {
                    *o = *v;
                }
            }
        }
    }
    Ok((out, sp))
}

/// Adjoint of [`patchify`].
pub fn unpatchify(cols: ArrayView2<'_, f64>, sp: Spatial, p: usize) -> Array3<f64> {
    let mut x = Array3::zeros((sp.batch, sp.height * p, sp.width * p));
    for bi in 0..sp.batch {
        for i in 0..sp.height {
            for j in 0..sp.width {
                let r = (bi * sp.height + i) * sp.width + j;
                let mut patch = x.slice_mut(s![bi, i * p..(i + 1) * p, j * p..(j + 1) * p]);
                for (o, v) in patch.iter_mut().zip(cols.row(r).iter()) {
                    *o = *v;
                }
            }
        }
    }
    x
}

/// 3×3 depthwise convolution with zero padding 1 on channel-last input.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    /// `[channels, 9]`, row-major over the 3×3 taps.
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl DepthwiseConv {
    pub fn new(rng: &mut impl Rng, channels: usize, stride: usize) -> Self {
        Self {
            weight: Param::new(he_init(rng, channels, 9, 9), true),
            bias: Param::new(Array2::zeros((1, channels)), false),
            stride,
        }
    }

    pub fn out_spatial(&self, sp: Spatial) -> Spatial {
        Spatial {
            batch: sp.batch,
            height: (sp.height - 1) / self.stride + 1,
            width: (sp.width - 1) / self.stride + 1,
        }
    }

    /// Calls `f(out_row, in_row, tap)` for every valid (output, input, tap) triple.
    fn for_each_tap(&self, sp: Spatial, mut f: impl FnMut(usize, usize, usize)) {
        let osp = self.out_spatial(sp);
        for b in 0..sp.batch {
            for oi in 0..osp.height {
                for oj in 0..osp.width {
                    let orow = (b * osp.height + oi) * osp.width + oj;
                    for di in 0..3 {
                        let ii = (oi * self.stride + di) as isize - 1;
                        if ii < 0 || ii >= sp.height as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = (oj * self.stride + dj) as isize - 1;
                            if jj < 0 || jj >= sp.width as isize {
                                continue;
                            }
                            let irow = (b * sp.height + ii as usize) * sp.width + jj as usize;
                            f(orow, irow, di * 3 + dj);
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, sp: Spatial) -> (Array2<f64>, Spatial) {
        let osp = self.out_spatial(sp);
        let c = x.ncols();
        let mut y = Array2::zeros((osp.rows(), c));
        y += &self.bias.value.row(0);
        let w = &self.weight.value;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");
        let wt: Vec<f64> = w.t().iter().copied().collect(); // [9, C]
        self.for_each_tap(sp, |o, i, t| {
            let (yo, xi, wk) = (
                &mut ys[o * c..(o + 1) * c],
                &xs[i * c..(i + 1) * c],
                &wt[t * c..(t + 1) * c],
            );
            for ch in 0..c {
                yo[ch] += xi[ch] * wk[ch];
            }
        });
        (y, osp)
    }

    pub fn backward(
        &mut self,
        x: ArrayView2<'_, f64>,
        sp: Spatial,
        dy: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let dx = self.backward_input(sp, dy, x.ncols());
        let c = x.ncols();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("contiguous");
        let mut dwt = vec![0.0; 9 * c];
        self.for_each_tap(sp, |o, i, t| {
            for ch in 0..c {
                dwt[t * c + ch] += dys[o * c + ch] * xs[i * c + ch];
            }
        });
        let dwt = Array2::from_shape_vec((9, c), dwt).unwrap();
        self.weight.grad += &dwt.t();
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dx
    }

    pub fn backward_input(&self, sp: Spatial, dy: ArrayView2<'_, f64>, c: usize) -> Array2<f64> {
        let mut dx = Array2::zeros((sp.rows(), c));
        let wt: Vec<f64> = self.weight.value.t().iter().copied().collect();
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("contiguous");
        let dxs = dx.as_slice_mut().expect("contiguous");
        self.for_each_tap(sp, |o, i, t| {
            for ch in 0..c {
                dxs[i * c + ch] += dys[o * c + ch] * wt[t * c + ch];
            }
        });
        dx
    }
}

impl HasParams for DepthwiseConv {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Global average pool over the spatial positions of each sample.
pub fn global_avg_pool(x: ArrayView2<'_, f64>, sp: Spatial) -> Array2<f64> {
    let hw = sp.height * sp.width;
    let mut out = Array2::zeros((sp.batch, x.ncols()));
    for b in 0..sp.batch {
        let block = x.slice(s![b * hw..(b + 1) * hw, ..]);
        out.row_mut(b).assign(&block.mean_axis(Axis(0)).unwrap());
    }
    out
}

pub fn global_avg_pool_backward(dy: ArrayView2<'_, f64>, sp: Spatial) -> Array2<f64> {
    let hw = sp.height * sp.width;
    let mut dx = Array2::zeros((sp.rows(), dy.ncols()));
    for b in 0..sp.batch {
        let g = &dy.row(b) / hw as f64;
        for r in 0..hw {
            dx.row_mut(b * hw + r).assign(&g);
        }
    }
    dx
}

/// Average over the time (width) axis only, keeping frequency rows:
/// `[B*H*W, C]` to `[B, H*C]`, column `h*C + c`.
pub fn time_avg_pool(x: ArrayView2<'_, f64>, sp: Spatial) -> Array2<f64> {
    let c = x.ncols();
    let mut out = Array2::zeros((sp.batch, sp.height * c));
    for b in 0..sp.batch {
        for h in 0..sp.height {
            let r0 = (b * sp.height + h) * sp.width;
            let m = x
                .slice(s![r0..r0 + sp.width, ..])
                .mean_axis(Axis(0))
                .unwrap();
            out.slice_mut(s![b, h * c..(h + 1) * c]).assign(&m);
        }
    }
    out
}

pub fn time_avg_pool_backward(dy: ArrayView2<'_, f64>, sp: Spatial) -> Array2<f64> {
    let c = dy.ncols() / sp.height;
    let mut dx = Array2::zeros((sp.rows(), c));
    for b in 0..sp.batch {
        for h in 0..sp.height {
            let g = &dy.slice(s![b, h * c..(h + 1) * c]) / sp.width as f64;
            for w in 0..sp.width {
                dx.row_mut((b * sp.height + h) * sp.width + w).assign(&g);
            }
        }
    }
    dx
}

/// Keeps the pooled standard deviation differentiable at zero variance.
pub const STATS_POOL_EPS: f64 = 1e-6;

/// Mean and standard deviation over time per frequency row: `[B*H*W, C]`
/// to `[B, 2*H*C]`, means first, then `sqrt(var + eps)`.
pub fn time_stats_pool(x: ArrayView2<'_, f64>, sp: Spatial) -> Array2<f64> {
    let hc = sp.height * x.ncols();
    let mean = time_avg_pool(x, sp);
    let sq = time_avg_pool(x.mapv(|v| v * v).view(), sp);
    let mut out = Array2::zeros((sp.batch, 2 * hc));
    out.slice_mut(s![.., ..hc]).assign(&mean);
    let sd = (&sq - &mean.mapv(|m| m * m)).mapv(|v| (v.max(0.0) + STATS_POOL_EPS).sqrt());
    out.slice_mut(s![.., hc..]).assign(&sd);
    out
}

/// `y` is the output of [`time_stats_pool`] on `x`.
pub fn time_stats_pool_backward(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    sp: Spatial,
    dy: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let c = x.ncols();
    let hc = sp.height * c;
    let mut dx = time_avg_pool_backward(dy.slice(s![.., ..hc]), sp);
    let w = sp.width as f64;
    for b in 0..sp.batch {
        for h in 0..sp.height {
            for t in 0..sp.width {
                let r = (b * sp.height + h) * sp.width + t;
                for ch in 0..c {
                    let k = h * c + ch;
                    dx[[r, ch]] +=
                        dy[[b, hc + k]] * (x[[r, ch]] - y[[b, k]]) / (w * y[[b, hc + k]]);
                }
            }
        }
    }
    dx
}

/// Spectral norm by power iteration on `W^T W`.
pub fn spectral_norm(w: ArrayView2<'_, f64>, iterations: usize) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let mut v = Array1::from_elem(w.ncols(), 1.0 / (w.ncols() as f64).sqrt());
    // deterministic start that is unlikely to be orthogonal to the top vector
    for (i, x) in v.iter_mut().enumerate() {
        *x *= 1.0 + 0.01 * (i as f64).sin();
    }
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let u = w.dot(&v);
        let z = w.t().dot(&u);
        let nz = z.dot(&z).sqrt();
        if nz == 0.0 {
            return 0.0;
        }
        sigma = nz.sqrt();
        v = z / nz;
    }
    sigma
}
