//! Loss terms of the composite objective
//! `recon + l1*stab + l2*smooth + l3*orth + l4*agit`.
//!
//! Every term comes in a value-only form and a `*_grad` form returning the
//! gradient with respect to its embedding inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub stab: f64,
    pub smooth: f64,
    pub orth: f64,
    pub agit: f64,
}

impl LossWeights {
    /// Grid-searched weights reported with the method description.
    pub const METHOD: Self = Self {
        stab: 0.5,
        smooth: 0.3,
        orth: 1.0,
        agit: 1.0,
    };
    /// Weights from the training protocol (smoothness weight is not listed
    /// there and is shared with [`Self::METHOD`]).
    pub const PROTOCOL: Self = Self {
        stab: 2.0,
        smooth: 0.3,
        orth: 1.0,
        agit: 3.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stab", self.stab),
            ("smooth", self.smooth),
            ("orth", self.orth),
            ("agit", self.agit),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Trait embeddings, state codes and the per-tensor state scale for a batch.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub trait_emb: Array2<f64>,
    pub state_codes: Array2<i8>,
    pub scale: f64,
    pub participant_ids: Vec<u32>,
    pub timestamps: Vec<f64>,
}

impl BatchEmbeddings {
    pub fn dequantized_state(&self) -> Array2<f64> {
        self.state_codes.mapv(|c| c as f64 * self.scale)
    }
}

fn centered(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    &x - &mean
}

/// Orthogonality penalty on dequantized codes: `(1/B^2) ||Zt_c^T Zs_c||_F^2`.
pub fn opl_loss(batch: &BatchEmbeddings) -> Result<f64> {
    Ok(opl_grad(batch.trait_emb.view(), batch.dequantized_state().view())?.0)
}

/// Value and gradients `(dL/dZt, dL/dZs)` of the centered cross-covariance penalty.
pub fn opl_grad(
    zt: ArrayView2<'_, f64>,
    zs: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let b = zt.nrows();
    if zs.nrows() != b {
        return Err(Error::Shape(format!(
            "trait batch {b} vs state batch {}",
            zs.nrows()
        )));
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let (ct, cs) = (centered(zt), centered(zs));
    let cross = ct.t().dot(&cs);
    let b2 = (b * b) as f64;
    let value = cross.iter().map(|v| v * v).sum::<f64>() / b2;
    // centered inputs are already in the range of the centering projector
    let d_zt = cs.dot(&cross.t()) * (2.0 / b2);
    let d_zs = ct.dot(&cross) * (2.0 / b2);
    Ok((value, d_zt, d_zs))
}

/// Mean absolute entry of the centered cross-covariance `Zt_c^T Zs_c / B`.
pub fn mean_abs_cross_covariance(zt: ArrayView2<'_, f64>, zs: ArrayView2<'_, f64>) -> f64 {
    let b = zt.nrows() as f64;
    let cross = centered(zt).t().dot(&centered(zs)) / b;
    cross.iter().map(|v| v.abs()).sum::<f64>() / cross.len() as f64
}

/// Supervised InfoNCE over cosine similarities. Positives share a
/// participant but come from a different session; every other row is a
/// candidate in the denominator.
pub fn stability_loss(
    zt: ArrayView2<'_, f64>,
    participants: &[u32],
    sessions: &[u8],
    tau: f64,
) -> Result<f64> {
    Ok(stability_loss_grad(zt, participants, sessions, tau)?.0)
}

pub fn stability_loss_grad(
    zt: ArrayView2<'_, f64>,
    participants: &[u32],
    sessions: &[u8],
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = zt.nrows();
    if participants.len() != b || sessions.len() != b {
        return Err(Error::Shape("labels do not match batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let norms: Vec<f64> = zt
        .rows()
        .into_iter()
        .map(|r| (r.dot(&r) + NORM_EPS).sqrt())
        .collect();
    let mut u = zt.to_owned();
    for (mut r, n) in u.rows_mut().into_iter().zip(&norms) {
        r /= *n;
    }
    let sim = u.dot(&u.t()) / tau;
    let is_pos = |i: usize, j: usize| {
        i != j && participants[i] == participants[j] && sessions[i] != sessions[j]
    };
    let anchors: Vec<usize> = (0..b).filter(|&i| (0..b).any(|j| is_pos(i, j))).collect();
    if anchors.is_empty() {
        return Err(Error::NoPositives);
    }
    let na = anchors.len() as f64;
    let mut coef = Array2::<f64>::zeros((b, b));
    let mut total = 0.0;
    for &i in &anchors {
        let row = sim.row(i);
        let m = (0..b)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).filter(|&j| j != i).map(|j| (row[j] - m).exp()).sum();
        let lse = m + z.ln();
        let pos: Vec<usize> = (0..b).filter(|&j| is_pos(i, j)).collect();
        let np = pos.len() as f64;
        total += pos.iter().map(|&p| lse - row[p]).sum::<f64>() / np;
        for j in (0..b).filter(|&j| j != i) {
            coef[[i, j]] += ((row[j] - lse).exp()) / na;
        }
        for &p in &pos {
            coef[[i, p]] -= 1.0 / (np * na);
        }
    }
    let sym = &coef + &coef.t();
    let du = sym.dot(&u) / tau;
    let mut grad = Array2::<f64>::zeros((b, zt.ncols()));
    for i in 0..b {
        let (ui, gi) = (u.row(i), du.row(i));
        let proj = ui.dot(&gi);
        let mut out = grad.row_mut(i);
        out.assign(&((&gi - &(&ui * proj)) / norms[i]));
    }
    Ok((total / na, grad))
}

/// Squared L2 distance between consecutive state vectors.
pub fn smoothness_loss(z_prev: ArrayView1<'_, f64>, z_curr: ArrayView1<'_, f64>) -> f64 {
    z_prev
        .iter()
        .zip(z_curr)
        .map(|(a, b)| (b - a) * (b - a))
        .sum()
}

/// Mean of [`smoothness_loss`] over `(prev, curr)` row pairs, with gradient.
pub fn smoothness_pairs_grad(
    zs: ArrayView2<'_, f64>,
    pairs: &[(usize, usize)],
) -> (f64, Array2<f64>) {
    let mut grad = Array2::<f64>::zeros(zs.raw_dim());
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for &(p, c) in pairs {
        let diff: Array1<f64> = &zs.row(c) - &zs.row(p);
        total += diff.dot(&diff);
        let g = &diff * (2.0 / n);
        let mut gc = grad.row_mut(c);
        gc += &g;
        let mut gp = grad.row_mut(p);
        gp -= &g;
    }
    (total / n, grad)
}

pub fn mse_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(mse_grad(pred, target)?.0)
}

pub fn mse_grad(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub stab: f64,
    pub smooth: f64,
    pub orth: f64,
    pub agit: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: LossComponents,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,recon,stab,smooth,orth,agit,total";

    pub fn csv_row(&self, epoch: usize) -> String {
        let c = &self.components;
        format!(
            "{epoch},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            c.recon, c.stab, c.smooth, c.orth, c.agit, self.total
        )
    }
}

pub fn composite_loss(components: LossComponents, weights: &LossWeights) -> Result<LossBreakdown> {
    let c = &components;
    if [c.recon, c.stab, c.smooth, c.orth, c.agit]
        .iter()
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidArgument("non-finite loss component".into()));
    }
    let total = c.recon
        + weights.stab * c.stab
        + weights.smooth * c.smooth
        + weights.orth * c.orth
        + weights.agit * c.agit;
    Ok(LossBreakdown { components, total })
}
