//! Capacity, storage and energy arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
/// Decimal kilobytes: 2,064 bytes reads as 2.1 KB.
pub const BYTES_PER_KB: f64 = 1000.0;

/// Information capacity of a `d`-dimensional embedding at `b` bits per value.
pub fn capacity_bits(d: usize, b: u32) -> Result<u64> {
    if d == 0 || b == 0 {
        return Err(Error::InvalidArgument(
            "dimension and bit-width must be positive".into(),
        ));
    }
    Ok(d as u64 * b as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeComponent {
    pub name: String,
    pub params: usize,
    pub bits: u32,
    /// Published size in KB, if any; mismatches above rounding are flagged.
    pub reference_kb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub name: String,
    pub params: usize,
    pub bits: u32,
    pub bytes: u64,
    pub kb: f64,
    pub reference_kb: Option<f64>,
    pub mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    pub total_bytes: u64,
    pub total_kb: f64,
}

pub fn model_size_report(components: &[SizeComponent]) -> SizeReport {
    let rows: Vec<SizeRow> = components
        .iter()
        .map(|c| {
            let bytes = (c.params as u64 * c.bits as u64).div_ceil(8);
            let kb = bytes as f64 / BYTES_PER_KB;
            // the reference is quoted to 0.1 KB
            let mismatch = c.reference_kb.is_some_and(|r| (r - kb).abs() > 0.05 + 1e-9);
            SizeRow {
                name: c.name.clone(),
                params: c.params,
                bits: c.bits,
                bytes,
                kb,
                reference_kb: c.reference_kb,
                mismatch,
            }
        })
        .collect();
    let total_bytes = rows.iter().map(|r| r.bytes).sum();
    SizeReport {
        rows,
        total_bytes,
        total_kb: total_bytes as f64 / BYTES_PER_KB,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    pub p_active_mw: f64,
    pub p_idle_mw: f64,
    pub inference_s: f64,
    pub cadence_s: f64,
    pub window_s: f64,
    /// Externally quoted daily active energy (mWh) to audit against.
    pub quoted_daily_active_mwh: Option<f64>,
    /// Externally quoted daily idle energy (mWh) to audit against.
    pub quoted_daily_idle_mwh: Option<f64>,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            p_active_mw: 110.0,
            p_idle_mw: 15.0,
            inference_s: 0.0234,
            cadence_s: 5.0,
            window_s: 0.640,
            quoted_daily_active_mwh: Some(44.4),
            quoted_daily_idle_mwh: Some(828.0),
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p_active_mw >= 0.0
            && self.p_idle_mw >= 0.0
            && self.inference_s > 0.0
            && self.cadence_s > 0.0
            && self.window_s > 0.0;
        if !ok || self.inference_s > self.cadence_s || self.window_s > self.cadence_s {
            return Err(Error::InvalidArgument(
                "energy parameters must be positive with inference and window within the cadence"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Daily energy totals (J and mWh) under one accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyEnergy {
    pub active_j: f64,
    pub idle_j: f64,
    pub total_j: f64,
    pub active_mwh: f64,
    pub idle_mwh: f64,
    pub total_mwh: f64,
    pub annual_wh: f64,
}

impl DailyEnergy {
    fn new(active_j: f64, idle_j: f64) -> Self {
        let mwh = |j: f64| j / 3.6;
        let total_j = active_j + idle_j;
        Self {
            active_j,
            idle_j,
            total_j,
            active_mwh: mwh(active_j),
            idle_mwh: mwh(idle_j),
            total_mwh: mwh(total_j),
            annual_wh: mwh(total_j) * 365.0 / 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub params: EnergyParams,
    #[serde(rename = "e_per_inference_mJ")]
    pub e_per_inference_mj: f64,
    pub inferences_per_day: f64,
    pub duty_cycle: f64,
    /// Active energy counts only the inference time; idle fills the rest of the day.
    pub per_inference: DailyEnergy,
    /// Active power held for the whole processing window (duty cycle).
    pub duty_cycle_based: DailyEnergy,
    /// Unit-consistency findings; empty when the quoted figures agree.
    pub audit: Vec<String>,
}

pub fn energy_report(p: EnergyParams) -> Result<EnergyReport> {
    p.validate()?;
    let e_mj = p.p_active_mw * p.inference_s;
    let n = SECONDS_PER_DAY / p.cadence_s;
    let duty = p.window_s / p.cadence_s;
    let per_inference = DailyEnergy::new(
        n * e_mj / 1000.0,
        p.p_idle_mw * (SECONDS_PER_DAY - n * p.inference_s) / 1000.0,
    );
    let duty_cycle_based = DailyEnergy::new(
        p.p_active_mw * duty * SECONDS_PER_DAY / 1000.0,
        p.p_idle_mw * (1.0 - duty) * SECONDS_PER_DAY / 1000.0,
    );
    let mut audit = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= 0.01 * b.abs().max(1e-12);
    if let Some(q) = p.quoted_daily_active_mwh {
        let a = per_inference.active_mwh;
        if !close(a, q) {
            audit.push(format!(
                "daily active energy {:.1} J is {:.1} mWh, not the quoted {q} mWh ({:.1} J would need {:.0} mW for the same time)",
                per_inference.active_j,
                a,
                q * 3.6,
                q * 3.6 * 1000.0 / (n * p.inference_s)
            ));
        }
    }
    if let Some(q) = p.quoted_daily_idle_mwh {
        let a = per_inference.idle_mwh;
        if !close(a, q) {
            audit.push(format!(
                "daily idle energy at {} mW is {a:.1} mWh (at most {:.1} mWh over 24 h), not the quoted {q} mWh",
                p.p_idle_mw,
                p.p_idle_mw * 24.0
            ));
        }
    }
    Ok(EnergyReport {
        params: p,
        e_per_inference_mj: e_mj,
        inferences_per_day: n,
        duty_cycle: duty,
        per_inference,
        duty_cycle_based,
        audit,
    })
}
