//! Dynamic precision scheduling and multi-scale temporal fusion.
//!
//! Uncertainty is the mean across-pass variance of Monte Carlo dropout
//! activations, by default the encoder output. It is computed once per 5 s window, cached for the 100 ms
//! sub-windows inside it, and mapped to 4 or 6 bits by a sigmoid gate on
//! the value normalized against the last 500 windows.

mod mstf;

pub use mstf::{Mstf, MstfOutput, MSTF_HEADS, MSTF_MODEL_DIM};

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::{BatchInput, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UcStatistic {
    /// Encoder output (128-dim) with its dropout active.
    EncoderOutput,
    /// State-head activations before quantization, encoder dropout active.
    StateActivation,
    /// Agitation predictions with every dropout layer active.
    AgitationScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpsConfig {
    pub b_base: u8,
    pub delta_b: u8,
    pub passes: usize,
    pub gate_threshold: f64,
    pub window_s: f64,
    pub subwindow_ms: f64,
    pub statistic: UcStatistic,
    /// Windows kept for the running mean and standard deviation.
    pub calibration_windows: usize,
}

impl Default for DpsConfig {
    fn default() -> Self {
        Self {
            b_base: 4,
            delta_b: 2,
            passes: 10,
            gate_threshold: 0.5,
            window_s: 5.0,
            subwindow_ms: 100.0,
            statistic: UcStatistic::EncoderOutput,
            calibration_windows: 500,
        }
    }
}

impl DpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 {
            return Err(Error::InsufficientPasses(self.passes));
        }
        if self.b_base < 2 || self.b_base + self.delta_b > 8 {
            return Err(Error::InvalidArgument(format!(
                "bit-widths {}+{} outside [2, 8]",
                self.b_base, self.delta_b
            )));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) || self.calibration_windows == 0 {
            return Err(Error::InvalidArgument(
                "gate threshold outside [0,1] or empty calibration window".into(),
            ));
        }
        let n = self.window_s * 1000.0 / self.subwindow_ms;
        if !(n >= 1.0 && (n - n.round()).abs() < 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "{} s is not a whole number of {} ms sub-windows",
                self.window_s, self.subwindow_ms
            )));
        }
        Ok(())
    }

    pub fn subwindows(&self) -> usize {
        (self.window_s * 1000.0 / self.subwindow_ms).round() as usize
    }

    pub fn boosted_bits(&self) -> u8 {
        self.b_base + self.delta_b
    }
}

/// Mean over coordinates of the across-pass (population) variance, one
/// value per row. Every pass must have the same shape.
pub fn uncertainty_from_passes(passes: &[Array2<f64>]) -> Result<Vec<f64>> {
    if passes.len() < 2 {
        return Err(Error::InsufficientPasses(passes.len()));
    }
    let dim = passes[0].dim();
    if passes.iter().any(|p| p.dim() != dim) {
        return Err(Error::Shape("passes differ in shape".into()));
    }
    let n = passes.len() as f64;
    // shifted by the first pass so identical passes give exactly zero
    let d: Vec<Array2<f64>> = passes.iter().map(|p| p - &passes[0]).collect();
    let mean = d.iter().fold(Array2::<f64>::zeros(dim), |acc, x| acc + x) / n;
    let var = d.iter().fold(Array2::<f64>::zeros(dim), |acc, x| {
        acc + (x - &mean).mapv(|v| v * v)
    }) / n;
    Ok(var
        .rows()
        .into_iter()
        .map(|r| r.mean().unwrap_or(0.0))
        .collect())
}

/// Monte Carlo dropout uncertainty for every window in `input`.
pub fn estimate_uncertainty(
    model: &Model,
    input: &BatchInput,
    cfg: &DpsConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if cfg.passes < 2 {
        return Err(Error::InsufficientPasses(cfg.passes));
    }
    let passes = (0..cfg.passes)
        .map(|_| match cfg.statistic {
            UcStatistic::EncoderOutput => model.hidden_mc(input, &mut *rng),
            UcStatistic::StateActivation => model.state_activation_mc(input, &mut *rng),
            UcStatistic::AgitationScore => {
                let a = model.agitation_mc(input, &mut *rng)?;
                Ok(Array2::from_shape_vec((a.len(), 1), a).expect("one score per row"))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    uncertainty_from_passes(&passes)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gate on `uc` normalized by the calibration mean and standard deviation.
/// A zero deviation maps values above the mean to `+inf`, below to `-inf`.
pub fn effective_bitwidth(uc: f64, mean: f64, std: f64, cfg: &DpsConfig) -> u8 {
    let z = if std > 0.0 {
        (uc - mean) / std
    } else if uc > mean {
        f64::INFINITY
    } else if uc < mean {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    if sigmoid(z) >= cfg.gate_threshold {
        cfg.boosted_bits()
    } else {
        cfg.b_base
    }
}

/// Running mean and standard deviation over the most recent windows.
#[derive(Debug, Clone)]
pub struct UcCalibration {
    capacity: usize,
    values: VecDeque<f64>,
}

impl UcCalibration {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            values: VecDeque::new(),
        }
    }

    pub fn push(&mut self, uc: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(uc);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Population mean and standard deviation; `(0, 0)` when empty.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        if n == 0.0 {
            return (0.0, 0.0);
        }
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyCache {
    pub window_id: u64,
    pub uc_value: f64,
    pub computed_at: u64,
    pub bits: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerReason {
    UncertaintyAboveGate,
    BelowGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpsDecision {
    pub window_id: u64,
    pub uc: f64,
    pub bits: u8,
    pub trigger_reason: TriggerReason,
}

/// Per-stream scheduler: one uncertainty estimate per window, reused by its
/// sub-windows.
#[derive(Debug, Clone)]
pub struct DpsScheduler {
    pub cfg: DpsConfig,
    calibration: UcCalibration,
    cache: Option<UncertaintyCache>,
    decisions: Vec<DpsDecision>,
    hits: u64,
    misses: u64,
}

impl DpsScheduler {
    pub fn new(cfg: DpsConfig) -> Result<Self> {
        cfg.validate()?;
        let calibration = UcCalibration::new(cfg.calibration_windows);
        Ok(Self {
            cfg,
            calibration,
            cache: None,
            decisions: Vec::new(),
            hits: 0,
            misses: 0,
        })
    }

    /// Bit-width for a sub-window of `window_id`. `compute` runs only on the
    /// first sub-window of each window. The calibration includes the new
    /// value before it is normalized.
    pub fn subwindow(
        &mut self,
        window_id: u64,
        now: u64,
        compute: impl FnOnce() -> Result<f64>,
    ) -> Result<u8> {
        if let Some(c) = self.cache.filter(|c| c.window_id == window_id) {
            self.hits += 1;
            return Ok(c.bits);
        }
        self.misses += 1;
        let uc = compute()?;
        if !(uc >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "uncertainty must be non-negative, got {uc}"
            )));
        }
        self.calibration.push(uc);
        let (mean, std) = self.calibration.mean_std();
        let bits = effective_bitwidth(uc, mean, std, &self.cfg);
        let trigger_reason = if bits > self.cfg.b_base {
            TriggerReason::UncertaintyAboveGate
        } else {
            TriggerReason::BelowGate
        };
        self.cache = Some(UncertaintyCache {
            window_id,
            uc_value: uc,
            computed_at: now,
            bits,
        });
        self.decisions.push(DpsDecision {
            window_id,
            uc,
            bits,
            trigger_reason,
        });
        Ok(bits)
    }

    pub fn cache(&self) -> Option<&UncertaintyCache> {
        self.cache.as_ref()
    }

    pub fn decisions(&self) -> &[DpsDecision] {
        &self.decisions
    }

    /// Cache hits over all sub-window requests.
    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }

    /// Share of windows that ran at the boosted bit-width.
    pub fn trigger_rate(&self) -> f64 {
        if self.decisions.is_empty() {
            return 0.0;
        }
        self.decisions
            .iter()
            .filter(|d| d.bits > self.cfg.b_base)
            .count() as f64
            / self.decisions.len() as f64
    }
}

pub const DPS_CSV_HEADER: [&str; 4] = ["window_id", "uc", "bits", "trigger_reason"];

pub fn write_dps_log<W: Write>(decisions: &[DpsDecision], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    out.write_record(DPS_CSV_HEADER).map_err(fmt)?;
    for d in decisions {
        let reason = match d.trigger_reason {
            TriggerReason::UncertaintyAboveGate => "uncertainty_above_gate",
            TriggerReason::BelowGate => "below_gate",
        };
        out.write_record([
            d.window_id.to_string(),
            format!("{:e}", d.uc),
            d.bits.to_string(),
            reason.to_string(),
        ])
        .map_err(fmt)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-stage costs (ms) fed to [`dps_timing_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpsStageCosts {
    pub base_ms: f64,
    pub pass_ms: f64,
    pub var_ms: f64,
    pub select_ms: f64,
    /// Extra cost of one sub-window inference at the boosted bit-width.
    pub int6_ms: f64,
    pub trigger_rate: f64,
}

impl DpsStageCosts {
    /// Stage timings from the published breakdown. The 0.4 ms INT6 entry is
    /// the window-level share at a 12.3% trigger rate.
    pub fn published() -> Self {
        let trigger_rate = 0.123;
        Self {
            base_ms: 4.1,
            pass_ms: 0.7,
            var_ms: 0.3,
            select_ms: 0.1,
            int6_ms: 0.4 / (trigger_rate * 50.0),
            trigger_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpsTiming {
    pub subwindows: usize,
    /// All DPS work in one window.
    pub window_overhead_ms: f64,
    /// The Monte Carlo passes alone, spread over the sub-windows.
    pub pass_share_ms: f64,
    /// Effective DPS overhead per sub-window inference.
    pub overhead_ms: f64,
    /// Base latency plus effective overhead.
    pub total_ms: f64,
}

pub fn dps_timing_model(cfg: &DpsConfig, c: &DpsStageCosts) -> Result<DpsTiming> {
    cfg.validate()?;
    let ok = [c.base_ms, c.pass_ms, c.var_ms, c.select_ms, c.int6_ms]
        .iter()
        .all(|v| *v >= 0.0 && v.is_finite());
    if !ok || !(0.0..=1.0).contains(&c.trigger_rate) {
        return Err(Error::InvalidArgument(
            "stage costs must be non-negative and the trigger rate in [0,1]".into(),
        ));
    }
    let n = cfg.subwindows() as f64;
    let passes = cfg.passes as f64 * c.pass_ms;
    let window = passes + c.var_ms + c.select_ms + c.trigger_rate * c.int6_ms * n;
    let overhead = window / n;
    Ok(DpsTiming {
        subwindows: cfg.subwindows(),
        window_overhead_ms: window,
        pass_share_ms: passes / n,
        overhead_ms: overhead,
        total_ms: c.base_ms + overhead,
    })
}

/// Frame ranges of windows `scale_s` long with fractional `overlap`, given
/// the frame hop. Tails shorter than a full window are dropped.
pub fn segment_windows(
    features: &FeatureMatrix,
    frame_hop_ms: f64,
    scale_s: f64,
    overlap: f64,
) -> Result<Vec<Range<usize>>> {
    if !(0.0..1.0).contains(&overlap) || !(scale_s > 0.0) || !(frame_hop_ms > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale {scale_s} s, overlap {overlap}, hop {frame_hop_ms} ms"
        )));
    }
    let width = (scale_s * 1000.0 / frame_hop_ms).round() as usize;
    let hop = ((scale_s * (1.0 - overlap) * 1000.0 / frame_hop_ms).round() as usize).max(1);
    let n = features.n_frames();
    if width == 0 || n < width {
        return Ok(Vec::new());
    }
    Ok((0..=(n - width) / hop)
        .map(|i| i * hop..i * hop + width)
        .collect())
}

/// The three temporal resolutions with their overlaps.
pub const SCALE_WINDOWS: [(f64, f64); 3] = [(0.5, 0.5), (2.0, 0.25), (10.0, 0.1)];
