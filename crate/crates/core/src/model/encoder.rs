//! Depthwise-separable CNN encoder mapping a 96×64 window to a 128-dim vector.
//!
//! Layout: 4×4 patchify stem, `conv_blocks` blocks of (3×3 depthwise, SiLU,
//! pointwise, SiLU) with widths doubling from `base_width`, then statistics
//! pooling: the mean and standard deviation over time of every frequency row
//! and channel, taken from the stem and from each block output. The pooled
//! vector is projected to `embedding_dim` with dropout.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{self, DepthwiseConv, HasParams, Linear, Param, QuantLinear, Spatial};
use crate::quant;

/// Values beyond this many standard deviations suggest unnormalized input.
pub const UNNORMALIZED_SENTINEL: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Fp16,
    Int8Ptq,
    Int8Qat,
}

impl EncoderMode {
    /// Weight precision used while training.
    pub fn train_bits(self) -> u8 {
        match self {
            EncoderMode::Int8Qat => 8,
            _ => quant::PASSTHROUGH_BITS,
        }
    }

    pub fn is_int8(self) -> bool {
        !matches!(self, EncoderMode::Fp16)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_mels: usize,
    pub input_frames: usize,
    pub stem_patch: usize,
    pub base_width: usize,
    pub conv_blocks: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub mode: EncoderMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_mels: 96,
            input_frames: 64,
            stem_patch: 4,
            base_width: 8,
            conv_blocks: 4,
            embedding_dim: 128,
            dropout: 0.1,
            mode: EncoderMode::Fp16,
        }
    }
}

impl EncoderConfig {
    pub fn block_widths(&self) -> Vec<usize> {
        (0..self.conv_blocks)
            .map(|i| self.base_width << (i + 1))
            .collect()
    }

    pub fn block_strides(&self) -> Vec<usize> {
        (0..self.conv_blocks)
            .map(|i| if i + 1 < self.conv_blocks { 2 } else { 1 })
            .collect()
    }

    /// Pooled width of each stage (stem, then blocks): mean and std per
    /// frequency row and channel.
    pub fn stage_pool_dims(&self) -> Vec<usize> {
        let mut h = self.input_mels / self.stem_patch;
        let mut dims = vec![2 * h * self.base_width];
        for (w, s) in self.block_widths().into_iter().zip(self.block_strides()) {
            h = (h - 1) / s + 1;
            dims.push(2 * h * w);
        }
        dims
    }

    /// Width of the pooled vector fed to the projection.
    pub fn pooled_dim(&self) -> usize {
        self.stage_pool_dims().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_patch == 0
            || self.input_mels % self.stem_patch != 0
            || self.input_frames % self.stem_patch != 0
        {
            return Err(Error::InvalidArgument(
                "input dims must be divisible by the stem patch".into(),
            ));
        }
        if self.base_width == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidArgument(
                "encoder widths must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SepBlock {
    pub dw: DepthwiseConv,
    pub pw: QuantLinear,
}

/// One integer GEMM stage of the deployed encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Int8Gemm {
    pub codes: Vec<i8>,
    pub rows: usize,
    pub cols: usize,
    pub weight_scales: Vec<f32>,
    pub act_scale: f32,
    pub bias: Vec<f64>,
}

impl Int8Gemm {
    fn build(lin: &Linear, act_max: f64) -> Result<Self> {
        let scheme = quant::calibrate_scales(lin.weight.value.view(), 8)?;
        let (q, _) = quant::quantize_ste(lin.weight.value.view(), &scheme)?;
        let q = q.expect("8-bit scheme yields codes");
        let act_scale = if act_max > 0.0 {
            act_max / 127.0
        } else {
            quant::FALLBACK_SCALE
        };
        Ok(Self {
            rows: q.codes.nrows(),
            cols: q.codes.ncols(),
            codes: q.codes.iter().copied().collect(),
            weight_scales: scheme.scales().iter().map(|&s| s as f32).collect(),
            act_scale: act_scale as f32,
            bias: lin.bias.value.iter().copied().collect(),
        })
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let s = self.act_scale as f64;
        let a = x.mapv(|v| quant::quantize_value(v, s, 8) as i8);
        let w = ArrayView2::from_shape((self.rows, self.cols), &self.codes)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let y = kernels::gemm_int8(a.view(), w, self.act_scale, &self.weight_scales)?;
        let mut out = y.mapv(|v| v as f64);
        for mut row in out.rows_mut() {
            row.iter_mut().zip(&self.bias).for_each(|(o, b)| *o += b);
        }
        Ok(out)
    }
}

/// Integer inference parameters: stem, one per pointwise conv, projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Int8Encoder {
    pub gemms: Vec<Int8Gemm>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input_dims: (usize, usize, usize),
    sp_stem: Spatial,
    patches: Array2<f64>,
    stem_pre: Array2<f64>,
    blocks: Vec<BlockTrace>,
    /// Output of every stage with its spatial layout.
    stages: Vec<(Array2<f64>, Spatial)>,
    pooled: Array2<f64>,
    mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    sp_in: Spatial,
    dw_pre: Array2<f64>,
    dw_act: Array2<f64>,
    pw_pre: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: QuantLinear,
    pub blocks: Vec<SepBlock>,
    pub fc: QuantLinear,
    pub int8: Option<Int8Encoder>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let bits = config.mode.train_bits();
        let p = config.stem_patch;
        let stem = QuantLinear::new(Linear::new(rng, p * p, config.base_width), bits)?;
        let mut blocks = Vec::new();
        let mut c_in = config.base_width;
        for (w, s) in config
            .block_widths()
            .into_iter()
            .zip(config.block_strides())
        {
            blocks.push(SepBlock {
                dw: DepthwiseConv::new(rng, c_in, s),
                pw: QuantLinear::new(Linear::new(rng, c_in, w), bits)?,
            });
            c_in = w;
        }
        let fc = QuantLinear::new(
            Linear::new(rng, config.pooled_dim(), config.embedding_dim),
            bits,
        )?;
        let mut enc = Self {
            config,
            stem,
            blocks,
            fc,
            int8: None,
        };
        enc.recalibrate_weights()?;
        Ok(enc)
    }

    /// Refreshes the fake-quantization scales of the GEMM weights (QAT only).
    pub fn recalibrate_weights(&mut self) -> Result<()> {
        self.stem.calibrate()?;
        for b in &mut self.blocks {
            b.pw.calibrate()?;
        }
        self.fc.calibrate()
    }

    pub fn output_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn check_input(&self, x: ArrayView3<'_, f64>) -> Result<()> {
        let (_, h, w) = x.dim();
        if (h, w) != (self.config.input_mels, self.config.input_frames) {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} windows, got {h}x{w}",
                self.config.input_mels, self.config.input_frames
            )));
        }
        if x.iter().any(|v| v.abs() > UNNORMALIZED_SENTINEL) {
            log::warn!("encoder input exceeds ±{UNNORMALIZED_SENTINEL} sigma; was it normalized?");
        }
        Ok(())
    }

    /// Float forward pass. `rng` enables dropout on the output.
    pub fn forward_train(
        &self,
        x: ArrayView3<'_, f64>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Array2<f64>, EncoderTrace)> {
        self.check_input(x)?;
        let (patches, sp_stem) = nn::patchify(x, self.config.stem_patch)?;
        let stem_pre = self.stem.forward(patches.view())?;
        let mut a = nn::silu(stem_pre.view());
        let mut sp = sp_stem;
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut stages = Vec::with_capacity(self.blocks.len() + 1);
        for b in &self.blocks {
            let (dw_pre, sp_out) = b.dw.forward(a.view(), sp);
            let dw_act = nn::silu(dw_pre.view());
            let pw_pre = b.pw.forward(dw_act.view())?;
            let next = nn::silu(pw_pre.view());
            traces.push(BlockTrace {
                sp_in: sp,
                dw_pre,
                dw_act,
                pw_pre,
            });
            stages.push((std::mem::replace(&mut a, next), sp));
            sp = sp_out;
        }
        stages.push((a, sp));
        let pooled = stats_pool(&stages);
        let mut h = self.fc.forward(pooled.view())?;
        let mask = match rng {
            Some(r) if self.config.dropout > 0.0 => {
                let m = nn::dropout_mask(r, h.dim(), self.config.dropout);
                h *= &m;
                Some(m)
            }
            _ => None,
        };
        Ok((
            h,
            EncoderTrace {
                input_dims: x.dim(),
                sp_stem,
                patches,
                stem_pre,
                blocks: traces,
                stages,
                pooled,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &mut self,
        trace: &EncoderTrace,
        dh: ArrayView2<'_, f64>,
    ) -> Result<Array3<f64>> {
        let d = match &trace.mask {
            Some(m) => &dh * m,
            None => dh.to_owned(),
        };
        let dpooled = self.fc.backward(trace.pooled.view(), d.view())?;
        let mut dstages = Vec::with_capacity(trace.stages.len());
        let mut off = 0;
        for (x, sp) in &trace.stages {
            let y = nn::time_stats_pool(x.view(), *sp);
            let n = y.ncols();
            dstages.push(nn::time_stats_pool_backward(
                x.view(),
                y.view(),
                *sp,
                dpooled.slice(s![.., off..off + n]),
            ));
            off += n;
        }
        let mut da = dstages.pop().expect("at least the stem stage");
        for (k, (b, t)) in self.blocks.iter_mut().zip(&trace.blocks).enumerate().rev() {
            let dpw = nn::silu_backward(t.pw_pre.view(), da.view());
            let ddw_act = b.pw.backward(t.dw_act.view(), dpw.view())?;
            let ddw = nn::silu_backward(t.dw_pre.view(), ddw_act.view());
            da = b.dw.backward(trace.stages[k].0.view(), t.sp_in, ddw.view()) + &dstages[k];
        }
        let dstem = nn::silu_backward(trace.stem_pre.view(), da.view());
        let dpatches = self.stem.backward(trace.patches.view(), dstem.view())?;
        let x = nn::unpatchify(dpatches.view(), trace.sp_stem, self.config.stem_patch);
        debug_assert_eq!(x.dim(), trace.input_dims);
        Ok(x)
    }

    /// Inference forward pass. Int8 modes route every GEMM through the
    /// integer kernel once [`Self::calibrate_int8`] has run.
    pub fn forward(
        &self,
        x: ArrayView3<'_, f64>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Array2<f64>> {
        match (&self.int8, self.config.mode.is_int8()) {
            (Some(q), true) => self.forward_int8(q, x, rng),
            _ => Ok(self.forward_train(x, rng)?.0),
        }
    }

    fn forward_int8(
        &self,
        q: &Int8Encoder,
        x: ArrayView3<'_, f64>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let (patches, mut sp) = nn::patchify(x, self.config.stem_patch)?;
        let mut a = nn::silu(q.gemms[0].apply(patches.view())?.view());
        let mut stages = Vec::with_capacity(self.blocks.len() + 1);
        for (b, g) in self.blocks.iter().zip(&q.gemms[1..]) {
            let (dw_pre, sp_out) = b.dw.forward(a.view(), sp);
            let next = nn::silu(g.apply(nn::silu(dw_pre.view()).view())?.view());
            stages.push((std::mem::replace(&mut a, next), sp));
            sp = sp_out;
        }
        stages.push((a, sp));
        let pooled = stats_pool(&stages);
        let mut h = q.gemms[self.blocks.len() + 1].apply(pooled.view())?;
        if let Some(r) = rng {
            if self.config.dropout > 0.0 {
                h *= &nn::dropout_mask(r, h.dim(), self.config.dropout);
            }
        }
        Ok(h)
    }

    /// Post-training calibration: per-channel INT8 weights and per-tensor
    /// activation scales from the max magnitude seen on `calib`.
    pub fn calibrate_int8(&mut self, calib: ArrayView3<'_, f64>) -> Result<()> {
        let (_, t) = self.forward_train(calib, None)?;
        let amax = |m: &Array2<f64>| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut gemms = vec![Int8Gemm::build(&self.stem.inner, amax(&t.patches))?];
        for (b, bt) in self.blocks.iter().zip(&t.blocks) {
            gemms.push(Int8Gemm::build(&b.pw.inner, amax(&bt.dw_act))?);
        }
        gemms.push(Int8Gemm::build(&self.fc.inner, amax(&t.pooled))?);
        self.int8 = Some(Int8Encoder { gemms });
        Ok(())
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> usize {
        let c = &self.config;
        let p = c.stem_patch;
        let mut sp = Spatial {
            batch: 1,
            height: c.input_mels / p,
            width: c.input_frames / p,
        };
        let mut total = sp.rows() * p * p * c.base_width;
        let mut c_in = c.base_width;
        for b in &self.blocks {
            let out = b.dw.out_spatial(sp);
            total += out.rows() * c_in * 9 + out.rows() * c_in * b.pw.inner.d_out();
            c_in = b.pw.inner.d_out();
            sp = out;
        }
        total + c.pooled_dim() * c.embedding_dim
    }
}

fn stats_pool(stages: &[(Array2<f64>, Spatial)]) -> Array2<f64> {
    let parts: Vec<Array2<f64>> = stages
        .iter()
        .map(|(x, sp)| nn::time_stats_pool(x.view(), *sp))
        .collect();
    ndarray::concatenate(Axis(1), &parts.iter().map(|p| p.view()).collect::<Vec<_>>())
        .expect("equal batch sizes")
}

impl HasParams for Encoder {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.dw.params_mut());
            v.extend(b.pw.params_mut());
        }
        v.extend(self.fc.params_mut());
        v
    }
}
