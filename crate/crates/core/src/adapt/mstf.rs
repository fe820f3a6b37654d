//! Fusion of embeddings from the 0.5 s, 2 s and 10 s windows.
//!
//! Trait vectors are averaged. State vectors are three tokens for one
//! multi-head self-attention block (32 -> 64, 4 heads, back to 32); the
//! fused state is the mean of the attended tokens.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{HasParams, Linear, Param};

pub const MSTF_SCALES: usize = 3;
pub const MSTF_MODEL_DIM: usize = 64;
pub const MSTF_HEADS: usize = 4;

#[derive(Debug, Clone)]
pub struct Mstf {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MstfOutput {
    pub state: Array1<f64>,
    pub trait_emb: Array1<f64>,
    /// Per head, `[3 x 3]` attention weights (rows sum to 1).
    pub attention: Vec<Array2<f64>>,
}

impl Mstf {
    pub fn new(rng: &mut impl Rng, state_dim: usize) -> Self {
        Self {
            q: Linear::new(rng, state_dim, MSTF_MODEL_DIM),
            k: Linear::new(rng, state_dim, MSTF_MODEL_DIM),
            v: Linear::new(rng, state_dim, MSTF_MODEL_DIM),
            out: Linear::new(rng, MSTF_MODEL_DIM, state_dim),
        }
    }

    pub fn fuse(
        &self,
        states: &[ArrayView1<'_, f64>],
        traits: &[ArrayView1<'_, f64>],
    ) -> Result<MstfOutput> {
        if states.len() != MSTF_SCALES {
            return Err(Error::IncompleteScales(states.len()));
        }
        if traits.len() != MSTF_SCALES {
            return Err(Error::IncompleteScales(traits.len()));
        }
        let d = self.q.d_in();
        if states.iter().any(|s| s.len() != d) || traits.iter().any(|t| t.len() != traits[0].len())
        {
            return Err(Error::Shape("scale embeddings differ in length".into()));
        }
        let trait_emb = traits
            .iter()
            .fold(Array1::zeros(traits[0].len()), |acc, t| acc + t)
            / MSTF_SCALES as f64;

        let x = ndarray::stack(Axis(0), states).map_err(|e| Error::Shape(e.to_string()))?;
        let (q, k, v) = (
            self.q.forward(x.view()),
            self.k.forward(x.view()),
            self.v.forward(x.view()),
        );
        let dh = MSTF_MODEL_DIM / MSTF_HEADS;
        let mut heads = Array2::zeros((MSTF_SCALES, MSTF_MODEL_DIM));
        let mut attention = Vec::with_capacity(MSTF_HEADS);
        for h in 0..MSTF_HEADS {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt();
            for mut row in a.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            heads.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attention.push(a);
        }
        let tokens = self.out.forward(heads.view());
        let state = tokens.mean_axis(Axis(0)).expect("three tokens");
        Ok(MstfOutput {
            state,
            trait_emb,
            attention,
        })
    }
}

impl HasParams for Mstf {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.q.params_mut();
        v.extend(self.k.params_mut());
        v.extend(self.v.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}
