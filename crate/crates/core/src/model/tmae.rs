//! Masked-patch pretraining of the encoder: hide a fraction of the 16×16
//! patches of each window and reconstruct them from the pooled embedding.

use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::index::sample;
use rand::{Rng, RngCore};

use super::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{self, AdamW, HasParams, Linear, Param};

pub const PATCH: usize = 16;
pub const DEFAULT_MASK_RATIO: f64 = 0.75;

/// Indices of the masked patches, sorted.
pub fn sample_mask(
    rng: &mut (impl Rng + ?Sized),
    n_patches: usize,
    ratio: f64,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    let n_mask = (ratio * n_patches as f64).round() as usize;
    if n_mask == 0 || n_mask >= n_patches {
        return Err(Error::InvalidRatio(ratio));
    }
    let mut idx = sample(rng, n_patches, n_mask).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Zeroes the listed patches (zero is the normalized mean level).
pub fn apply_mask(x: ArrayView3<'_, f64>, masks: &[Vec<usize>]) -> Array3<f64> {
    let (_, _, w) = x.dim();
    let per_row = w / PATCH;
    let mut out = x.to_owned();
    for (b, m) in masks.iter().enumerate() {
        for &p in m {
            let (i, j) = (p / per_row, p % per_row);
            out.slice_mut(ndarray::s![
                b,
                i * PATCH..(i + 1) * PATCH,
                j * PATCH..(j + 1) * PATCH
            ])
            .fill(0.0);
        }
    }
    out
}

/// Per-patch decoder: shared MLP conditioned on a learned position bias.
#[derive(Debug, Clone)]
pub struct TmaeDecoder {
    pub l1: Linear,
    pub pos: Param,
    pub l2: Linear,
}

impl TmaeDecoder {
    pub fn new(rng: &mut impl Rng, d_in: usize, hidden: usize, n_patches: usize) -> Self {
        Self {
            l1: Linear::new(rng, d_in, hidden),
            pos: Param::new(
                Array2::from_shape_fn((n_patches, hidden), |_| rng.random_range(-0.1..0.1)),
                false,
            ),
            l2: Linear::new(rng, hidden, PATCH * PATCH),
        }
    }
}

impl HasParams for TmaeDecoder {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.l1.params_mut();
        v.push(&mut self.pos);
        v.extend(self.l2.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Tmae {
    pub encoder: Encoder,
    pub decoder: TmaeDecoder,
    pub mask_ratio: f64,
}

impl Tmae {
    pub fn new(
        encoder: Encoder,
        hidden: usize,
        mask_ratio: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
            return Err(Error::InvalidRatio(mask_ratio));
        }
        let c = &encoder.config;
        let n_patches = (c.input_mels / PATCH) * (c.input_frames / PATCH);
        let decoder = TmaeDecoder::new(rng, c.embedding_dim, hidden, n_patches);
        Ok(Self {
            encoder,
            decoder,
            mask_ratio,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.decoder.pos.value.nrows()
    }

    /// Masked-patch MSE with gradients accumulated into every parameter.
    pub fn forward_backward(
        &mut self,
        x: ArrayView3<'_, f64>,
        masks: &[Vec<usize>],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<f64> {
        let b = x.dim().0;
        if masks.len() != b
            || masks
                .iter()
                .any(|m| m.is_empty() || m.iter().any(|&p| p >= self.n_patches()))
        {
            return Err(Error::Shape(
                "one non-empty in-range mask per window required".into(),
            ));
        }
        let (targets, _) = nn::patchify(x, PATCH)?;
        let masked = apply_mask(x, masks);
        let (h, trace) = self.encoder.forward_train(masked.view(), rng)?;
        let a = self.decoder.l1.forward(h.view());

        let rows: Vec<(usize, usize)> = masks
            .iter()
            .enumerate()
            .flat_map(|(bi, m)| m.iter().map(move |&p| (bi, p)))
            .collect();
        let hid = a.ncols();
        let pre = Array2::from_shape_fn((rows.len(), hid), |(r, k)| {
            let (bi, p) = rows[r];
            a[[bi, k]] + self.decoder.pos.value[[p, k]]
        });
        let act = nn::silu(pre.view());
        let out = self.decoder.l2.forward(act.view());
        let tgt = Array2::from_shape_fn(out.dim(), |(r, k)| {
            let (bi, p) = rows[r];
            targets[[bi * self.n_patches() + p, k]]
        });
        let diff = &out - &tgt;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;

        let dout = diff * (2.0 / n);
        let dact = self.decoder.l2.backward(act.view(), dout.view());
        let dpre = nn::silu_backward(pre.view(), dact.view());
        let mut da = Array2::zeros(a.raw_dim());
        for (r, &(bi, p)) in rows.iter().enumerate() {
            for k in 0..hid {
                da[[bi, k]] += dpre[[r, k]];
                self.decoder.pos.grad[[p, k]] += dpre[[r, k]];
            }
        }
        let dh = self.decoder.l1.backward(h.view(), da.view());
        self.encoder.backward(&trace, dh.view())?;
        Ok(loss)
    }

    /// Samples fresh masks and takes one optimizer step; returns the loss.
    pub fn step(
        &mut self,
        x: ArrayView3<'_, f64>,
        opt: &mut AdamW,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let n = self.n_patches();
        let masks = (0..x.dim().0)
            .map(|_| sample_mask(&mut *rng, n, self.mask_ratio))
            .collect::<Result<Vec<_>>>()?;
        for p in self.params_mut() {
            p.zero_grad();
        }
        let loss = self.forward_backward(x, &masks, Some(rng))?;
        opt.step(self.params_mut());
        Ok(loss)
    }
}

impl HasParams for Tmae {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }
}
