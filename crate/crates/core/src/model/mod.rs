//! Dual-head network: shared encoder, float trait head, low-bit state head
//! feeding an agitation regressor, plus onboarding and drift checks.

pub mod checkpoint;
pub mod encoder;
pub mod tmae;

use half::f16;
use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossComponents, LossWeights};
use crate::nn::{self, AdamW, HasParams, Linear, Param, QuantLinear};
use crate::quant::{self, PackedInt4Matrix, QuantScheme, ScaleCalibrator};

pub use encoder::{Encoder, EncoderConfig, EncoderMode};

pub const AGITATION_MIN: f64 = 0.0;
pub const AGITATION_MAX: f64 = 4.0;
/// Output bias of the agitation MLP at initialization (scale midpoint).
pub const AGITATION_INIT_BIAS: f64 = 2.0;
pub const RECON_PATCH: usize = 16;
pub const DRIFT_THRESHOLD: f64 = 0.3;
pub const ONBOARDING_RECORDINGS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub trait_dim: usize,
    pub state_dim: usize,
    pub state_bits: u8,
    pub trait_dropout: f64,
    pub state_dropout: f64,
    /// Integer LayerNorm in the state head when it runs below 16 bits.
    pub qlayer_norm: bool,
    pub agit_hidden: usize,
    pub recon_hidden: usize,
    pub calibration_interval: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            trait_dim: 64,
            state_dim: 32,
            state_bits: 4,
            trait_dropout: 0.1,
            state_dropout: 0.3,
            qlayer_norm: true,
            agit_hidden: 192,
            recon_hidden: 64,
            calibration_interval: quant::DEFAULT_CALIBRATION_INTERVAL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !quant::bits_supported(self.state_bits) {
            return Err(Error::InvalidArgument(format!(
                "unsupported state precision {}",
                self.state_bits
            )));
        }
        if self.trait_dim < 2
            || self.state_dim < 2
            || self.agit_hidden == 0
            || self.recon_hidden == 0
        {
            return Err(Error::InvalidArgument("head dimensions too small".into()));
        }
        for p in [self.trait_dropout, self.state_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("dropout {p} outside [0,1)")));
            }
        }
        if self.calibration_interval == 0 {
            return Err(Error::InvalidArgument(
                "calibration interval must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn recon_targets(&self) -> usize {
        (self.encoder.input_mels / RECON_PATCH) * (self.encoder.input_frames / RECON_PATCH)
    }
}

/// Optimizer and loss-weight presets: `impl` follows the training protocol
/// (lr 1e-3, wd 1e-3, 60 epochs), `exp` the experiment section (lr 3e-4,
/// wd 1e-4, 100 epochs) with the grid-searched loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Impl,
    Exp,
}

impl Preset {
    pub fn weights(self) -> LossWeights {
        match self {
            Preset::Impl => LossWeights::PROTOCOL,
            Preset::Exp => LossWeights::METHOD,
        }
    }

    pub fn lr(self) -> f64 {
        match self {
            Preset::Impl => 1e-3,
            Preset::Exp => 3e-4,
        }
    }

    pub fn weight_decay(self) -> f64 {
        match self {
            Preset::Impl => 1e-3,
            Preset::Exp => 1e-4,
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Preset::Impl => 60,
            Preset::Exp => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub weights: Option<LossWeights>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    /// Participants per batch; each contributes 2 sessions × 2 consecutive windows.
    pub batch_participants: usize,
    pub temperature: f64,
    /// Whether the orthogonality penalty also back-propagates into the state branch.
    pub opl_to_state: bool,
    /// Spectral-norm bound for the trait projection, applied after each step.
    pub trait_spectral_bound: Option<f64>,
    pub finetune_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Impl,
            weights: None,
            lr: None,
            weight_decay: None,
            epochs: None,
            batch_participants: 16,
            temperature: losses::DEFAULT_TEMPERATURE,
            opl_to_state: true,
            trait_spectral_bound: Some(1.0),
            finetune_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        self.weights.unwrap_or(self.preset.weights())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(
            self.lr.unwrap_or(self.preset.lr()),
            self.weight_decay.unwrap_or(self.preset.weight_decay()),
        )
    }

    pub fn n_epochs(&self) -> usize {
        self.epochs.unwrap_or(self.preset.epochs())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        let opt = self.optimizer();
        if !(opt.lr > 0.0) || !(opt.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        if self.batch_participants < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 participants per batch".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        if matches!(self.trait_spectral_bound, Some(b) if !(b > 0.0)) {
            return Err(Error::InvalidArgument(
                "spectral bound must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Model input: normalized windows, or pre-dropout encoder outputs when the
/// encoder is frozen and its outputs are cached.
#[derive(Debug, Clone)]
pub enum BatchInput {
    Windows(Array3<f64>),
    Encoded(Array2<f64>),
}

impl BatchInput {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Windows(x) => x.dim().0,
            BatchInput::Encoded(h) => h.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub input: BatchInput,
    pub participants: Vec<u32>,
    pub sessions: Vec<u8>,
    pub window_index: Vec<usize>,
    pub agitation: Vec<f64>,
    /// Reconstruction targets: mean of every 16×16 patch of the window.
    pub recon_target: Array2<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(prev, next)` pairs of consecutive windows from the same session.
    pub fn smoothness_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.participants[i] == self.participants[j]
                    && self.sessions[i] == self.sessions[j]
                    && self.window_index[j] == self.window_index[i] + 1
                {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

/// Per-window means of non-overlapping 16×16 patches, `[B, n_patches]`.
pub fn patch_means(x: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
    let b = x.dim().0;
    let (cols, sp) = nn::patchify(x, RECON_PATCH)?;
    let means = cols.mean_axis(Axis(1)).expect("non-empty patches");
    Ok(means
        .into_shape_with_order((b, sp.height * sp.width))
        .expect("row-major patches"))
}

fn round_f16(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| f16::from_f64(v).to_f64());
}

#[derive(Debug, Clone)]
pub struct TraitHead {
    pub linear: Linear,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct TraitTrace {
    h: Array2<f64>,
    y: Array2<f64>,
    inv_std: Array1<f64>,
    mask: Option<Array2<f64>>,
}

impl TraitHead {
    pub fn forward(
        &self,
        h: ArrayView2<'_, f64>,
        rng: Option<&mut dyn RngCore>,
    ) -> (Array2<f64>, TraitTrace) {
        let pre = self.linear.forward(h);
        let (y, inv_std) = nn::layer_norm(pre.view());
        let mask = rng
            .filter(|_| self.dropout > 0.0)
            .map(|r| nn::dropout_mask(r, y.dim(), self.dropout));
        let z = match &mask {
            Some(m) => &y * m,
            None => y.clone(),
        };
        (
            z,
            TraitTrace {
                h: h.to_owned(),
                y,
                inv_std,
                mask,
            },
        )
    }

    pub fn backward(&mut self, t: &TraitTrace, dz: ArrayView2<'_, f64>) -> Array2<f64> {
        let dy = match &t.mask {
            Some(m) => &dz * m,
            None => dz.to_owned(),
        };
        let dpre = nn::layer_norm_backward(t.y.view(), &t.inv_std, dy.view());
        self.linear.backward(t.h.view(), dpre.view())
    }

    /// Projects the weight matrix onto the spectral-norm ball of radius `bound`.
    pub fn project_spectral(&mut self, bound: f64) {
        let w = &mut self.linear.weight.value;
        let sigma = nn::spectral_norm(w.view(), 30);
        if sigma > bound {
            *w *= bound / sigma;
        }
    }
}

/// Quantized state embedding of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StateOutput {
    /// Signed codes; `None` at 16 bits.
    pub codes: Option<Array2<i8>>,
    pub scale: f64,
    /// Dequantized values (codes × scale, or rounded floats at 16 bits).
    pub values: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct StateHead {
    pub linear: QuantLinear,
    pub dropout: f64,
    pub qlayer_norm: bool,
    act_calibrator: ScaleCalibrator,
    act_scheme: Option<QuantScheme>,
    weight_interval: usize,
    weight_steps: usize,
}

#[derive(Debug, Clone)]
pub struct StateTrace {
    h: Array2<f64>,
    y: Array2<f64>,
    inv_std: Array1<f64>,
    mask: Option<Array2<f64>>,
    ste: Option<Array2<f64>>,
    clean_ste: Option<Array2<f64>>,
}

/// Training outputs of the state head: the dropped-out state used by the
/// main loss terms and the same state without dropout.
#[derive(Debug, Clone)]
pub struct StateTrainOutput {
    pub zs: Array2<f64>,
    pub clean: Array2<f64>,
}

impl StateHead {
    pub fn new(
        linear: Linear,
        bits: u8,
        dropout: f64,
        qlayer_norm: bool,
        interval: usize,
    ) -> Result<Self> {
        let mut linear = QuantLinear::new(linear, bits)?;
        linear.calibrate()?;
        Ok(Self {
            linear,
            dropout,
            qlayer_norm,
            act_calibrator: ScaleCalibrator::per_tensor(
                if bits == quant::PASSTHROUGH_BITS {
                    8
                } else {
                    bits
                },
                interval,
            ),
            act_scheme: None,
            weight_interval: interval,
            weight_steps: 0,
        })
    }

    pub fn bits(&self) -> u8 {
        self.linear.bits
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits() == quant::PASSTHROUGH_BITS
    }

    pub fn act_scheme(&self) -> Option<&QuantScheme> {
        self.act_scheme.as_ref()
    }

    pub fn set_act_scheme(&mut self, s: Option<QuantScheme>) {
        self.act_scheme = s;
    }

    /// Counts an optimizer step; weight scales refresh every interval.
    pub fn after_step(&mut self) -> Result<()> {
        self.weight_steps += 1;
        if self.weight_steps % self.weight_interval == 0 {
            self.linear.calibrate()?;
        }
        Ok(())
    }

    fn normalize(&self, pre: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let (y, inv) = nn::layer_norm(pre);
        let n = if self.qlayer_norm && !self.is_passthrough() {
            nn::qlayer_norm_int8(pre)
        } else {
            y.clone()
        };
        (n, y, inv)
    }

    /// Post-dropout, pre-quantization activations.
    pub fn pre_quant(
        &self,
        h: ArrayView2<'_, f64>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Array2<f64>> {
        let pre = self.linear.forward(h)?;
        let (mut n, _, _) = self.normalize(pre.view());
        if let Some(r) = rng {
            if self.dropout > 0.0 {
                n *= &nn::dropout_mask(r, n.dim(), self.dropout);
            }
        }
        Ok(n)
    }

    pub fn forward_train(
        &mut self,
        h: ArrayView2<'_, f64>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(StateTrainOutput, StateTrace)> {
        let pre = self.linear.forward(h)?;
        let (n, y, inv_std) = self.normalize(pre.view());
        // the activation range is tracked before dropout, matching inference
        if !self.is_passthrough() {
            if let Some(s) = self.act_calibrator.observe(n.view()) {
                self.act_scheme = Some(s);
            }
        }
        let mask = rng
            .filter(|_| self.dropout > 0.0)
            .map(|r| nn::dropout_mask(r, n.dim(), self.dropout));
        let d = match &mask {
            Some(m) => &n * m,
            None => n.clone(),
        };
        let fake_quant = |x: &Array2<f64>| -> (Array2<f64>, Option<Array2<f64>>) {
            match self.act_scheme.as_ref().filter(|_| !self.is_passthrough()) {
                None => (x.clone(), None),
                Some(scheme) => {
                    let sc = scheme.scale(0);
                    let (lo, hi) = (scheme.clip_lo() as f64, scheme.clip_hi() as f64);
                    let ste = x.mapv(|v| {
                        if (lo..=hi).contains(&(v / sc)) {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    (
                        x.mapv(|v| quant::quantize_value(v, sc, scheme.bits()) as f64 * sc),
                        Some(ste),
                    )
                }
            }
        };
        let (zs, ste) = fake_quant(&d);
        let (clean, clean_ste) = fake_quant(&n);
        Ok((
            StateTrainOutput { zs, clean },
            StateTrace {
                h: h.to_owned(),
                y,
                inv_std,
                mask,
                ste,
                clean_ste,
            },
        ))
    }

    /// `dclean` is the gradient with respect to the dropout-free state.
    pub fn backward(
        &mut self,
        t: &StateTrace,
        dzs: ArrayView2<'_, f64>,
        dclean: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let mut d = dzs.to_owned();
        if let Some(ste) = &t.ste {
            d *= ste;
        }
        if let Some(m) = &t.mask {
            d *= m;
        }
        if let Some(dc) = dclean {
            match &t.clean_ste {
                Some(ste) => d += &(&dc * ste),
                None => d += &dc,
            }
        }
        // straight-through the integer LayerNorm: float LayerNorm gradient
        let dpre = nn::layer_norm_backward(t.y.view(), &t.inv_std, d.view());
        self.linear.backward(t.h.view(), dpre.view())
    }

    /// Inference. Below 16 bits an activation scale must exist; if the head
    /// was never trained it is calibrated from this batch.
    pub fn forward(
        &self,
        h: ArrayView2<'_, f64>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<StateOutput> {
        let d = self.pre_quant(h, rng)?;
        if self.is_passthrough() {
            let mut values = d;
            round_f16(&mut values);
            return Ok(StateOutput {
                codes: None,
                scale: 1.0,
                values,
            });
        }
        let scheme = match &self.act_scheme {
            Some(s) => s.clone(),
            None => {
                let amax = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let s = if amax > 0.0 {
                    amax / quant::clip_range(self.bits()).1 as f64
                } else {
                    quant::FALLBACK_SCALE
                };
                QuantScheme::per_tensor(self.bits(), s)?
            }
        };
        let sc = scheme.scale(0);
        let codes = d.mapv(|v| quant::quantize_value(v, sc, scheme.bits()) as i8);
        let values = codes.mapv(|c| c as f64 * sc);
        Ok(StateOutput {
            codes: Some(codes),
            scale: sc,
            values,
        })
    }

    /// Packed 4-bit weights for deployment (only at 4 bits).
    pub fn packed(&self) -> Result<Option<PackedInt4Matrix>> {
        if self.bits() != 4 {
            return Ok(None);
        }
        let scheme = quant::calibrate_scales(self.linear.inner.weight.value.view(), 4)?;
        let scheme = self.linear.scheme().cloned().unwrap_or(scheme);
        let (q, _) = quant::quantize_ste(self.linear.inner.weight.value.view(), &scheme)?;
        Ok(Some(PackedInt4Matrix::from_quantized(
            &q.expect("4-bit codes"),
        )?))
    }
}

#[derive(Debug, Clone)]
pub struct AgitationMlp {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    x: Array2<f64>,
    p1: Array2<f64>,
    a1: Array2<f64>,
    p2: Array2<f64>,
    a2: Array2<f64>,
}

impl AgitationMlp {
    pub fn new(rng: &mut impl Rng, d_in: usize, hidden: usize) -> Self {
        let out = Linear::from_weights(
            Array2::zeros((1, hidden)),
            Array1::from_elem(1, AGITATION_INIT_BIAS),
        );
        Self {
            l1: Linear::new(rng, d_in, hidden),
            l2: Linear::new(rng, hidden, hidden),
            out,
        }
    }

    pub fn forward(&self, z: ArrayView2<'_, f64>) -> (Array2<f64>, MlpTrace) {
        let p1 = self.l1.forward(z);
        let a1 = nn::silu(p1.view());
        let p2 = self.l2.forward(a1.view());
        let a2 = nn::silu(p2.view());
        let y = self.out.forward(a2.view());
        (
            y,
            MlpTrace {
                x: z.to_owned(),
                p1,
                a1,
                p2,
                a2,
            },
        )
    }

    pub fn backward(&mut self, t: &MlpTrace, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let da2 = self.out.backward(t.a2.view(), dy);
        let dp2 = nn::silu_backward(t.p2.view(), da2.view());
        let da1 = self.l2.backward(t.a1.view(), dp2.view());
        let dp1 = nn::silu_backward(t.p1.view(), da1.view());
        self.l1.backward(t.x.view(), dp1.view())
    }

    /// Scores clipped to the label range.
    pub fn predict(&self, z: ArrayView2<'_, f64>) -> Vec<f64> {
        self.forward(z)
            .0
            .column(0)
            .iter()
            .map(|v| v.clamp(AGITATION_MIN, AGITATION_MAX))
            .collect()
    }
}

impl HasParams for AgitationMlp {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.extend(self.l2.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// Light decoder reconstructing patch means from `[z_t, z_s]`.
#[derive(Debug, Clone)]
pub struct ReconDecoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl ReconDecoder {
    fn forward(&self, zt: ArrayView2<'_, f64>, zs: ArrayView2<'_, f64>) -> (Array2<f64>, MlpTrace) {
        let x = concatenate(Axis(1), &[zt, zs]).expect("equal batch sizes");
        let p1 = self.l1.forward(x.view());
        let a1 = nn::silu(p1.view());
        let y = self.l2.forward(a1.view());
        (
            y,
            MlpTrace {
                x,
                p1,
                a1,
                p2: Array2::zeros((0, 0)),
                a2: Array2::zeros((0, 0)),
            },
        )
    }

    fn backward(
        &mut self,
        t: &MlpTrace,
        dy: ArrayView2<'_, f64>,
        dt: usize,
    ) -> (Array2<f64>, Array2<f64>) {
        let da1 = self.l2.backward(t.a1.view(), dy);
        let dp1 = nn::silu_backward(t.p1.view(), da1.view());
        let dx = self.l1.backward(t.x.view(), dp1.view());
        (
            dx.slice(s![.., ..dt]).to_owned(),
            dx.slice(s![.., dt..]).to_owned(),
        )
    }
}

/// Inference outputs for a batch.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub hidden: Array2<f64>,
    /// Trait embeddings rounded to half precision.
    pub trait_emb: Array2<f64>,
    pub state: StateOutput,
    pub agitation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub trait_head: TraitHead,
    pub state_head: StateHead,
    pub agitation: AgitationMlp,
    pub recon: ReconDecoder,
    pub steps: u64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder.clone(), &mut rng)?;
        Self::with_encoder(config, encoder, &mut rng)
    }

    /// Fresh heads on top of an existing (typically pretrained) encoder.
    pub fn with_encoder(config: ModelConfig, encoder: Encoder, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if encoder.config != config.encoder {
            return Err(Error::InvalidArgument(
                "encoder does not match model config".into(),
            ));
        }
        let e = config.encoder.embedding_dim;
        let trait_head = TraitHead {
            linear: Linear::new(rng, e, config.trait_dim),
            dropout: config.trait_dropout,
        };
        let state_head = StateHead::new(
            Linear::new(rng, e, config.state_dim),
            config.state_bits,
            config.state_dropout,
            config.qlayer_norm,
            config.calibration_interval,
        )?;
        let agitation = AgitationMlp::new(rng, config.state_dim, config.agit_hidden);
        let recon = ReconDecoder {
            l1: Linear::new(
                rng,
                config.trait_dim + config.state_dim,
                config.recon_hidden,
            ),
            l2: Linear::new(rng, config.recon_hidden, config.recon_targets()),
        };
        Ok(Self {
            config,
            encoder,
            trait_head,
            state_head,
            agitation,
            recon,
            steps: 0,
        })
    }

    pub fn trait_head_params(&self) -> usize {
        self.trait_head.linear.weight.len() + self.trait_head.linear.bias.len()
    }

    pub fn state_head_params(&self) -> usize {
        self.state_head.linear.inner.weight.len() + self.state_head.linear.inner.bias.len()
    }

    pub fn encoder_params(&self) -> usize {
        self.encoder.clone().param_count()
    }

    pub fn agitation_params(&self) -> usize {
        self.agitation.clone().param_count()
    }

    fn hidden(&self, input: &BatchInput, rng: Option<&mut dyn RngCore>) -> Result<Array2<f64>> {
        match input {
            BatchInput::Windows(x) => self.encoder.forward(x.view(), rng),
            BatchInput::Encoded(h) => {
                let mut h = h.clone();
                if let Some(r) = rng {
                    if self.encoder.config.dropout > 0.0 {
                        h *= &nn::dropout_mask(r, h.dim(), self.encoder.config.dropout);
                    }
                }
                Ok(h)
            }
        }
    }

    /// Deterministic inference (dropout off).
    pub fn embed(&self, input: &BatchInput) -> Result<Embeddings> {
        let h = self.hidden(input, None)?;
        self.embed_hidden(h)
    }

    fn embed_hidden(&self, h: Array2<f64>) -> Result<Embeddings> {
        let (mut trait_emb, _) = self.trait_head.forward(h.view(), None);
        round_f16(&mut trait_emb);
        let state = self.state_head.forward(h.view(), None)?;
        let agitation = self.agitation.predict(state.values.view());
        Ok(Embeddings {
            hidden: h,
            trait_emb,
            state,
            agitation,
        })
    }

    /// Encoder output with its dropout active.
    pub fn hidden_mc(&self, input: &BatchInput, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        self.hidden(input, Some(rng))
    }

    /// State-head activations before quantization with encoder dropout
    /// active. The head's own dropout follows a LayerNorm, so its variance
    /// is the same for every input and is left out.
    pub fn state_activation_mc(
        &self,
        input: &BatchInput,
        rng: &mut dyn RngCore,
    ) -> Result<Array2<f64>> {
        let h = self.hidden(input, Some(rng))?;
        self.state_head.pre_quant(h.view(), None)
    }

    /// Agitation scores with every dropout layer active.
    pub fn agitation_mc(&self, input: &BatchInput, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let h = self.hidden(input, Some(&mut *rng))?;
        let s = self.state_head.forward(h.view(), Some(rng))?;
        Ok(self.agitation.predict(s.values.view()))
    }

    /// Computes the composite loss and accumulates every parameter gradient.
    /// Gradients are not zeroed first.
    pub fn forward_backward(
        &mut self,
        batch: &TrainBatch,
        tcfg: &TrainConfig,
        rng: &mut dyn RngCore,
    ) -> Result<LossBreakdown> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let w = tcfg.loss_weights();
        let (h, enc_trace) = match &batch.input {
            BatchInput::Windows(x) => {
                let (h, t) = self.encoder.forward_train(x.view(), Some(&mut *rng))?;
                (h, Some(t))
            }
            BatchInput::Encoded(_) => (self.hidden(&batch.input, Some(&mut *rng))?, None),
        };
        let (zt, t_trace) = self.trait_head.forward(h.view(), Some(&mut *rng));
        let (s_out, s_trace) = self.state_head.forward_train(h.view(), Some(&mut *rng))?;
        let zs = s_out.zs;

        let y =
            Array2::from_shape_vec((b, 1), batch.agitation.clone()).expect("one label per sample");
        let (pred, a_trace) = self.agitation.forward(zs.view());
        let (agit, d_pred) = losses::mse_grad(pred.view(), y.view())?;

        let (rec_out, r_trace) = self.recon.forward(zt.view(), zs.view());
        let (recon, d_rec) = losses::mse_grad(rec_out.view(), batch.recon_target.view())?;

        let (stab, d_stab) = match losses::stability_loss_grad(
            zt.view(),
            &batch.participants,
            &batch.sessions,
            tcfg.temperature,
        ) {
            Ok(v) => v,
            Err(Error::NoPositives) => {
                log::warn!("batch has no positive pairs; stability term skipped");
                (0.0, Array2::zeros(zt.raw_dim()))
            }
            Err(e) => return Err(e),
        };
        // consecutive windows are compared without dropout noise, per state dimension
        let (smooth, d_smooth) =
            losses::smoothness_pairs_grad(s_out.clean.view(), &batch.smoothness_pairs());
        let per_dim = 1.0 / zs.ncols() as f64;
        let (smooth, d_smooth) = (smooth * per_dim, d_smooth * per_dim);
        let (orth, d_orth_t, d_orth_s) = losses::opl_grad(zt.view(), zs.view())?;

        let breakdown = losses::composite_loss(
            LossComponents {
                recon,
                stab,
                smooth,
                orth,
                agit,
            },
            &w,
        )?;

        let (d_rec_t, d_rec_s) = self.recon.backward(&r_trace, d_rec.view(), zt.ncols());
        let d_agit_s = self.agitation.backward(&a_trace, (d_pred * w.agit).view());
        let dzt = d_rec_t + d_stab * w.stab + d_orth_t * w.orth;
        let mut dzs = d_rec_s + d_agit_s;
        if tcfg.opl_to_state {
            dzs = dzs + d_orth_s * w.orth;
        }
        let dh = self.trait_head.backward(&t_trace, dzt.view())
            + self
                .state_head
                .backward(&s_trace, dzs.view(), Some((d_smooth * w.smooth).view()))?;
        if let (Some(t), true) = (enc_trace, tcfg.finetune_encoder) {
            self.encoder.backward(&t, dh.view())?;
        }
        Ok(breakdown)
    }

    fn trainable(&mut self, with_encoder: bool) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if with_encoder {
            v.extend(self.encoder.params_mut());
        }
        v.extend(self.trait_head.linear.params_mut());
        v.extend(self.state_head.linear.params_mut());
        v.extend(self.agitation.params_mut());
        v.extend(self.recon.l1.params_mut());
        v.extend(self.recon.l2.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.trainable(true) {
            p.zero_grad();
        }
    }

    /// One optimizer step on `batch`.
    pub fn train_step(
        &mut self,
        batch: &TrainBatch,
        tcfg: &TrainConfig,
        opt: &mut AdamW,
        rng: &mut dyn RngCore,
    ) -> Result<LossBreakdown> {
        self.zero_grad();
        let out = self.forward_backward(batch, tcfg, rng)?;
        let with_encoder = tcfg.finetune_encoder && matches!(batch.input, BatchInput::Windows(_));
        opt.step(self.trainable(with_encoder));
        if let Some(bound) = tcfg.trait_spectral_bound {
            self.trait_head.project_spectral(bound);
        }
        self.steps += 1;
        self.state_head.after_step()?;
        if with_encoder
            && self.config.encoder.mode == EncoderMode::Int8Qat
            && self.steps % self.config.calibration_interval as u64 == 0
        {
            self.encoder.recalibrate_weights()?;
        }
        Ok(out)
    }
}

/// Onboarded identity reference: coordinate-wise median of three recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitProfile {
    pub centroid: Vec<f64>,
    pub created_at: u64,
    pub source_count: usize,
}

impl TraitProfile {
    /// Half-precision centroid followed by a little-endian u64 timestamp.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.vector_bytes();
        out.extend_from_slice(&self.created_at.to_le_bytes());
        out
    }

    /// The stored vector alone (2 bytes per dimension).
    pub fn vector_bytes(&self) -> Vec<u8> {
        self.centroid
            .iter()
            .flat_map(|&v| f16::from_f64(v).to_le_bytes())
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], dim: usize) -> Result<Self> {
        if bytes.len() != dim * 2 + 8 {
            return Err(Error::Format(format!(
                "profile of {} bytes, expected {}",
                bytes.len(),
                dim * 2 + 8
            )));
        }
        let centroid = bytes[..dim * 2]
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect();
        let created_at = u64::from_le_bytes(bytes[dim * 2..].try_into().expect("8 bytes"));
        Ok(Self {
            centroid,
            created_at,
            source_count: ONBOARDING_RECORDINGS,
        })
    }
}

/// Agitation score mapped to [0, 1]; recordings above the onboarding
/// threshold are treated as too state-laden to define identity.
pub fn state_confidence(agitation: f64) -> f64 {
    (agitation / AGITATION_MAX).clamp(0.0, 1.0)
}

pub fn onboard(
    recordings: &[ArrayView1<'_, f64>],
    confidences: &[f64],
    delta: f64,
    created_at: u64,
) -> Result<TraitProfile> {
    if recordings.len() != ONBOARDING_RECORDINGS || confidences.len() != ONBOARDING_RECORDINGS {
        return Err(Error::InvalidArgument(format!(
            "onboarding needs exactly {ONBOARDING_RECORDINGS} recordings"
        )));
    }
    let flagged: Vec<usize> = confidences
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > delta)
        .map(|(i, _)| i)
        .collect();
    if !flagged.is_empty() {
        return Err(Error::RecordingFlagged(flagged));
    }
    let dim = recordings[0].len();
    if recordings.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape(
            "onboarding embeddings differ in length".into(),
        ));
    }
    let centroid = (0..dim)
        .map(|j| {
            let mut v = [recordings[0][j], recordings[1][j], recordings[2][j]];
            v.sort_by(f64::total_cmp);
            v[1]
        })
        .collect();
    Ok(TraitProfile {
        centroid,
        created_at,
        source_count: ONBOARDING_RECORDINGS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftDecision {
    Ok,
    Reonboard,
}

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(a.dot(&b) / (na * nb))
}

pub fn check_drift(profile: &TraitProfile, recent: ArrayView1<'_, f64>) -> Result<DriftDecision> {
    let c = Array1::from(profile.centroid.clone());
    let dist = 1.0 - cosine_similarity(c.view(), recent)?;
    Ok(if dist > DRIFT_THRESHOLD {
        DriftDecision::Reonboard
    } else {
        DriftDecision::Ok
    })
}
