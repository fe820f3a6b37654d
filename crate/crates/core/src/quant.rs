//! Symmetric b-bit quantization, straight-through gradients and 4-bit packing.
//!
//! Codes are `clip(round(w / s), -2^(b-1), 2^(b-1) - 1)` with rounding half
//! away from zero. Weight scales are per output channel (row); activation
//! scales are per tensor (a scheme with a single scale broadcast to all rows).
//! `bits == 16` is a float passthrough.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PASSTHROUGH_BITS: u8 = 16;
pub const DEFAULT_CALIBRATION_INTERVAL: usize = 100;
/// Scale used for all-zero channels: the smallest positive normal `f32`, so
/// it survives serialization unchanged.
pub const FALLBACK_SCALE: f64 = f32::MIN_POSITIVE as f64;

const PACKED_MAGIC: &[u8; 4] = b"MPQ4";

pub fn bits_supported(bits: u8) -> bool {
    (2..=8).contains(&bits) || bits == PASSTHROUGH_BITS
}

/// `(clip_lo, clip_hi)` for a signed b-bit code.
pub fn clip_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

#[inline]
pub fn quantize_value(w: f64, scale: f64, bits: u8) -> i32 {
    let (lo, hi) = clip_range(bits);
    let q = (w / scale).round();
    (q.max(lo as f64).min(hi as f64)) as i32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    bits: u8,
    scales: Vec<f64>,
    pub calibration_interval: usize,
}

impl QuantScheme {
    pub fn new(bits: u8, scales: Vec<f64>) -> Result<Self> {
        if !bits_supported(bits) {
            return Err(Error::InvalidArgument(format!(
                "unsupported precision: {bits} bits"
            )));
        }
        if scales.is_empty() && bits != PASSTHROUGH_BITS {
            return Err(Error::InvalidArgument(
                "quant scheme needs at least one scale".into(),
            ));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive and finite, got {s}"
            )));
        }
        Ok(Self {
            bits,
            scales,
            calibration_interval: DEFAULT_CALIBRATION_INTERVAL,
        })
    }

    pub fn per_tensor(bits: u8, scale: f64) -> Result<Self> {
        Self::new(bits, vec![scale])
    }

    pub fn passthrough() -> Self {
        Self {
            bits: PASSTHROUGH_BITS,
            scales: Vec::new(),
            calibration_interval: DEFAULT_CALIBRATION_INTERVAL,
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    pub fn clip_lo(&self) -> i32 {
        clip_range(self.bits).0
    }

    pub fn clip_hi(&self) -> i32 {
        clip_range(self.bits).1
    }

    /// Scale for row `channel`; a single scale is broadcast.
    #[inline]
    pub fn scale(&self, channel: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[channel]
        }
    }

    pub fn check_rows(&self, rows: usize) -> Result<()> {
        if self.is_passthrough() || self.scales.len() == 1 || self.scales.len() == rows {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{} scales for {} channels",
                self.scales.len(),
                rows
            )))
        }
    }
}

/// Integer codes plus the scheme that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Array2<i8>,
    pub scheme: QuantScheme,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Array2<f64> {
        let mut out = self.codes.mapv(|c| c as f64);
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let s = self.scheme.scale(r);
            row.mapv_inplace(|c| c * s);
        }
        out
    }
}

/// Per-channel scales `max|w[c, :]| / clip_hi`.
pub fn calibrate_scales(weights: ArrayView2<'_, f64>, bits: u8) -> Result<QuantScheme> {
    if weights.is_empty() {
        return Err(Error::EmptyWeights);
    }
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "calibration needs 2..=8 bits, got {bits}"
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidArgument("non-finite weight".into()));
    }
    let hi = clip_range(bits).1 as f64;
    let scales = weights
        .rows()
        .into_iter()
        .map(|r| {
            let m = r.iter().fold(0.0f64, |a, &w| a.max(w.abs()));
            if m > 0.0 {
                m / hi
            } else {
                FALLBACK_SCALE
            }
        })
        .collect();
    QuantScheme::new(bits, scales)
}

/// Fake-quantizes `w` row-wise. Returns codes (`None` for passthrough) and
/// the dequantized values used in the forward pass.
pub fn quantize_ste(
    w: ArrayView2<'_, f64>,
    scheme: &QuantScheme,
) -> Result<(Option<QuantizedTensor>, Array2<f64>)> {
    scheme.check_rows(w.nrows())?;
    if scheme.is_passthrough() {
        return Ok((None, w.to_owned()));
    }
    let mut codes = Array2::<i8>::zeros(w.raw_dim());
    let mut deq = Array2::<f64>::zeros(w.raw_dim());
    for (r, (wr, (mut cr, mut dr))) in w
        .rows()
        .into_iter()
        .zip(codes.rows_mut().into_iter().zip(deq.rows_mut()))
        .enumerate()
    {
        let s = scheme.scale(r);
        for ((c, d), &x) in cr.iter_mut().zip(dr.iter_mut()).zip(wr.iter()) {
            let q = quantize_value(x, s, scheme.bits);
            *c = q as i8;
            *d = q as f64 * s;
        }
    }
    Ok((
        Some(QuantizedTensor {
            codes,
            scheme: scheme.clone(),
        }),
        deq,
    ))
}

/// Saturated straight-through estimator: the upstream gradient passes where
/// `clip_lo <= w/s <= clip_hi` and is zeroed elsewhere.
pub fn ste_backward(
    upstream: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    scheme: &QuantScheme,
) -> Result<Array2<f64>> {
    if upstream.dim() != w.dim() {
        return Err(Error::Shape(format!(
            "grad {:?} vs weights {:?}",
            upstream.dim(),
            w.dim()
        )));
    }
    scheme.check_rows(w.nrows())?;
    if scheme.is_passthrough() {
        return Ok(upstream.to_owned());
    }
    let (lo, hi) = (scheme.clip_lo() as f64, scheme.clip_hi() as f64);
    let mut out = upstream.to_owned();
    for (r, (mut g, wr)) in out.rows_mut().into_iter().zip(w.rows()).enumerate() {
        let s = scheme.scale(r);
        Zip::from(&mut g).and(&wr).for_each(|g, &x| {
            let t = x / s;
            if !(t >= lo && t <= hi) {
                *g = 0.0;
            }
        });
    }
    Ok(out)
}

/// Tracks the running max `|w|` per channel and refreshes the scheme every
/// `interval` observed batches (and on the first one).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleCalibrator {
    bits: u8,
    interval: usize,
    per_tensor: bool,
    seen: usize,
    running_max: Vec<f64>,
}

impl ScaleCalibrator {
    pub fn per_channel(bits: u8, interval: usize) -> Self {
        Self {
            bits,
            interval: interval.max(1),
            per_tensor: false,
            seen: 0,
            running_max: Vec::new(),
        }
    }

    pub fn per_tensor(bits: u8, interval: usize) -> Self {
        Self {
            bits,
            interval: interval.max(1),
            per_tensor: true,
            seen: 0,
            running_max: Vec::new(),
        }
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    /// Records one batch; returns a fresh scheme when a refresh is due.
    pub fn observe(&mut self, x: ArrayView2<'_, f64>) -> Option<QuantScheme> {
        if self.bits == PASSTHROUGH_BITS || x.is_empty() {
            return None;
        }
        let maxes: Vec<f64> = if self.per_tensor {
            vec![x.iter().fold(0.0f64, |a, &v| a.max(v.abs()))]
        } else {
            x.rows()
                .into_iter()
                .map(|r| r.iter().fold(0.0f64, |a, &v| a.max(v.abs())))
                .collect()
        };
        if self.running_max.len() != maxes.len() {
            self.running_max = maxes;
        } else {
            for (m, v) in self.running_max.iter_mut().zip(maxes) {
                *m = m.max(v);
            }
        }
        let due = self.seen % self.interval == 0;
        self.seen += 1;
        if !due {
            return None;
        }
        let hi = clip_range(self.bits).1 as f64;
        let scales: Vec<f64> = self
            .running_max
            .iter()
            .map(|&m| if m > 0.0 { m / hi } else { FALLBACK_SCALE })
            .collect();
        self.running_max.clear();
        QuantScheme::new(self.bits, scales).ok().map(|mut s| {
            s.calibration_interval = self.interval;
            s
        })
    }
}

/// Clips INT8 codes to the 6-bit range `[-32, 31]` so they can run on the
/// 8-bit kernels unchanged.
pub fn emulate_int6(codes8: &[i8]) -> Vec<i8> {
    codes8.iter().map(|&c| c.clamp(-32, 31)).collect()
}

pub const BLOCK_ROWS: usize = 4;
pub const BLOCK_COLS: usize = 8;
pub const BLOCK_BYTES: usize = 16;

/// 4 rows x 8 columns of signed 4-bit codes; byte `r*4 + c/2` holds columns
/// `c` (low nibble, even) and `c+1` (high nibble).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PackedWeightBlock {
    pub payload: [u8; BLOCK_BYTES],
}

impl PackedWeightBlock {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        let byte = self.payload[r * 4 + c / 2];
        let nib = if c % 2 == 0 { byte & 0x0F } else { byte >> 4 };
        ((nib << 4) as i8) >> 4
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize, code: i8) {
        let nib = (code as u8) & 0x0F;
        let b = &mut self.payload[r * 4 + c / 2];
        if c % 2 == 0 {
            *b = (*b & 0xF0) | nib;
        } else {
            *b = (*b & 0x0F) | (nib << 4);
        }
    }
}

pub fn packed_len_bytes(rows: usize, cols: usize) -> usize {
    rows.div_ceil(BLOCK_ROWS) * cols.div_ceil(BLOCK_COLS) * BLOCK_BYTES
}

/// Packs a code matrix into 4x8 blocks, row-blocks outer and column-blocks
/// inner, zero-padding ragged edges.
pub fn pack_int4(codes: ArrayView2<'_, i8>) -> Result<Vec<PackedWeightBlock>> {
    if let Some(&c) = codes.iter().find(|&&c| !(-8..=7).contains(&c)) {
        return Err(Error::CodeOverflow {
            code: c as i32,
            lo: -8,
            hi: 7,
        });
    }
    let (rows, cols) = codes.dim();
    let (rb, cb) = (rows.div_ceil(BLOCK_ROWS), cols.div_ceil(BLOCK_COLS));
    let mut blocks = vec![PackedWeightBlock::default(); rb * cb];
    for (bi, blk) in blocks.iter_mut().enumerate() {
        let (r0, c0) = ((bi / cb) * BLOCK_ROWS, (bi % cb) * BLOCK_COLS);
        for r in 0..BLOCK_ROWS {
            for c in 0..BLOCK_COLS {
                let (gr, gc) = (r0 + r, c0 + c);
                if gr < rows && gc < cols {
                    blk.set(r, c, codes[[gr, gc]]);
                }
            }
        }
    }
    Ok(blocks)
}

/// Inverse of [`pack_int4`] for a `rows x cols` matrix (padding dropped).
pub fn unpack_int4(blocks: &[PackedWeightBlock], rows: usize, cols: usize) -> Result<Array2<i8>> {
    let (rb, cb) = (rows.div_ceil(BLOCK_ROWS), cols.div_ceil(BLOCK_COLS));
    if blocks.len() != rb * cb {
        return Err(Error::Shape(format!(
            "{} blocks for {rows}x{cols}",
            blocks.len()
        )));
    }
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        blocks[(r / BLOCK_ROWS) * cb + c / BLOCK_COLS].get(r % BLOCK_ROWS, c % BLOCK_COLS)
    }))
}

/// A packed 4-bit weight matrix with its per-channel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInt4Matrix {
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<PackedWeightBlock>,
    pub scales: Vec<f32>,
}

impl PackedInt4Matrix {
    pub fn from_quantized(q: &QuantizedTensor) -> Result<Self> {
        if q.scheme.bits() != 4 {
            return Err(Error::InvalidArgument(format!(
                "packing needs 4-bit codes, got {}",
                q.scheme.bits()
            )));
        }
        let (rows, cols) = q.codes.dim();
        let scales = (0..rows).map(|r| q.scheme.scale(r) as f32).collect();
        Ok(Self {
            rows,
            cols,
            blocks: pack_int4(q.codes.view())?,
            scales,
        })
    }

    pub fn payload_bytes(&self) -> usize {
        self.blocks.len() * BLOCK_BYTES
    }

    pub fn codes(&self) -> Array2<i8> {
        unpack_int4(&self.blocks, self.rows, self.cols).expect("block count fixed at construction")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PACKED_MAGIC)?;
        w.write_u32::<LittleEndian>(self.rows as u32)?;
        w.write_u32::<LittleEndian>(self.cols as u32)?;
        for b in &self.blocks {
            w.write_all(&b.payload)?;
        }
        for &s in &self.scales {
            w.write_f32::<LittleEndian>(s)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PACKED_MAGIC {
            return Err(Error::Format("bad packed-weight magic".into()));
        }
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let n = rows.div_ceil(BLOCK_ROWS) * cols.div_ceil(BLOCK_COLS);
        let mut blocks = vec![PackedWeightBlock::default(); n];
        for b in &mut blocks {
            r.read_exact(&mut b.payload)?;
        }
        let mut scales = vec![0f32; rows];
        r.read_f32_into::<LittleEndian>(&mut scales)?;
        Ok(Self {
            rows,
            cols,
            blocks,
            scales,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn calibrate_examples() {
        let s = calibrate_scales(array![[-0.8, 0.4]].view(), 4).unwrap();
        assert!((s.scale(0) - 0.8 / 7.0).abs() < 1e-15);
        assert!((s.scale(0) - 0.114286).abs() < 1e-6);

        let z = calibrate_scales(array![[0.0, 0.0, 0.0]].view(), 4).unwrap();
        assert_eq!(z.scale(0), FALLBACK_SCALE);
        let (q, d) = quantize_ste(array![[0.0, 0.0, 0.0]].view(), &z).unwrap();
        assert!(q.unwrap().codes.iter().all(|&c| c == 0));
        assert!(d.iter().all(|&v| v == 0.0));

        assert!(matches!(
            calibrate_scales(Array2::<f64>::zeros((0, 3)).view(), 4),
            Err(Error::EmptyWeights)
        ));
    }

    #[test]
    fn error_bound_random_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        let s = calibrate_scales(w.view(), 4).unwrap();
        let (_, d) = quantize_ste(w.view(), &s).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                // per-element oracle: nearest grid point distance
                let sc = s.scale(r);
                let best = (-8..=7)
                    .map(|k| (w[[r, c]] - k as f64 * sc).abs())
                    .fold(f64::MAX, f64::min);
                let err = (w[[r, c]] - d[[r, c]]).abs();
                assert!(err <= sc / 2.0 + 1e-12);
                assert!((err - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantize_examples() {
        let s = QuantScheme::per_tensor(4, 0.1).unwrap();
        let (q, d) = quantize_ste(array![[0.37, 1.0, -0.05, 0.05]].view(), &s).unwrap();
        let q = q.unwrap();
        assert_eq!(q.codes.row(0).to_vec(), vec![4, 7, -1, 1]);
        assert!((d[[0, 0]] - 0.4).abs() < 1e-12);
        assert!((d[[0, 1]] - 0.7).abs() < 1e-12);
        assert_eq!(q.dequantize(), d);
    }

    #[test]
    fn distinct_levels_bounded() {
        for bits in [2u8, 3, 4, 5, 6, 8] {
            let s = QuantScheme::per_tensor(bits, 0.013).unwrap();
            let sweep = Array2::from_shape_fn((1, 20001), |(_, i)| -10.0 + i as f64 * 0.001);
            let (_, d) = quantize_ste(sweep.view(), &s).unwrap();
            let mut vals: Vec<i64> = d.iter().map(|v| (v / 0.013).round() as i64).collect();
            vals.sort();
            vals.dedup();
            assert!(vals.len() <= 1 << bits);
            assert_eq!(vals.len(), 1 << bits, "dense sweep should hit every level");
        }
    }

    #[test]
    fn passthrough_is_identity() {
        let w = array![[0.123, -4.5], [9.0, 1e-9]];
        let (q, d) = quantize_ste(w.view(), &QuantScheme::passthrough()).unwrap();
        assert!(q.is_none());
        assert_eq!(d, w);
        let g = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(
            ste_backward(g.view(), w.view(), &QuantScheme::passthrough()).unwrap(),
            g
        );
    }

    #[test]
    fn ste_masks_saturation() {
        let s = QuantScheme::per_tensor(4, 0.1).unwrap();
        let w = array![[0.3, 1.0, -0.8, -0.81]];
        let g = array![[1.5, 2.0, -3.0, 4.0]];
        let out = ste_backward(g.view(), w.view(), &s).unwrap();
        assert_eq!(out, array![[1.5, 0.0, -3.0, 0.0]]);
    }

    #[test]
    fn ste_trains_quantized_regression() {
        // 1-layer quantized linear model on a separable toy set, trained through STE.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let x = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| if r[0] + 0.5 * r[1] > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let mut w = Array2::from_shape_fn((1, 4), |_| rng.random_range(-0.05..0.05));
        let loss_of = |wq: &Array2<f64>| -> f64 {
            x.rows()
                .into_iter()
                .zip(&y)
                .map(|(r, t)| (r.dot(&wq.row(0)) - t).powi(2))
                .sum::<f64>()
                / n as f64
        };
        let mut losses = Vec::new();
        let mut cal = ScaleCalibrator::per_channel(4, 10);
        let mut scheme = cal.observe(w.view()).unwrap();
        for _epoch in 0..=50 {
            if let Some(s) = cal.observe(w.view()) {
                scheme = s;
            }
            let (_, wq) = quantize_ste(w.view(), &scheme).unwrap();
            losses.push(loss_of(&wq));
            let mut g = Array2::<f64>::zeros((1, 4));
            for (r, t) in x.rows().into_iter().zip(&y) {
                let e = r.dot(&wq.row(0)) - t;
                for j in 0..4 {
                    g[[0, j]] += 2.0 * e * r[j] / n as f64;
                }
            }
            let g = ste_backward(g.view(), w.view(), &scheme).unwrap();
            w = &w - &(g * 0.2);
        }
        assert!(
            losses[50] < 0.5 * losses[0],
            "{:?}",
            (losses[0], losses[50])
        );
    }

    #[test]
    fn pack_sizes_and_roundtrip() {
        let codes = Array2::from_shape_fn((32, 128), |(r, c)| (((r * 7 + c * 3) % 16) as i8) - 8);
        let blocks = pack_int4(codes.view()).unwrap();
        assert_eq!(blocks.len() * BLOCK_BYTES, 2048);
        assert_eq!(packed_len_bytes(32, 128), 2048);
        assert_eq!(unpack_int4(&blocks, 32, 128).unwrap(), codes);

        let eye = Array2::from_shape_fn((4, 8), |(r, c)| if r == c { 1i8 } else { 0 });
        let b = pack_int4(eye.view()).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(unpack_int4(&b, 4, 8).unwrap(), eye);

        let bad = Array2::from_elem((1, 1), 9i8);
        assert!(matches!(
            pack_int4(bad.view()),
            Err(Error::CodeOverflow { code: 9, .. })
        ));
    }

    #[test]
    fn ragged_pack_roundtrip_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes = Array2::from_shape_fn((12, 20), |_| rng.random_range(-8i8..=7));
        let blocks = pack_int4(codes.view()).unwrap();
        assert_eq!(blocks.len(), 3 * 3);
        assert_eq!(unpack_int4(&blocks, 12, 20).unwrap(), codes);
        // padded columns 20..24 of the last column block are zero
        for rb in 0..3 {
            let blk = &blocks[rb * 3 + 2];
            for r in 0..4 {
                for c in 4..8 {
                    assert_eq!(blk.get(r, c), 0);
                }
            }
        }
    }

    #[test]
    fn packed_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Array2::from_shape_fn((32, 128), |_| rng.random_range(-1.0..1.0));
        let s = calibrate_scales(w.view(), 4).unwrap();
        let (q, _) = quantize_ste(w.view(), &s).unwrap();
        let p = PackedInt4Matrix::from_quantized(&q.unwrap()).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 2048 + 32 * 4);
        assert_eq!(PackedInt4Matrix::read_from(&buf[..]).unwrap(), p);
    }

    #[test]
    fn int6_emulation() {
        assert_eq!(
            emulate_int6(&[100, -5, -128, 31, -32, 32]),
            vec![31, -5, -32, 31, -32, 31]
        );
        // 8-bit container matmul equals a 6-bit reference computed in i64
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a: Vec<i8> = (0..24)
                .map(|_| rng.random_range(-128i16..=127) as i8)
                .collect();
            let b: Vec<i8> = (0..24)
                .map(|_| rng.random_range(-128i16..=127) as i8)
                .collect();
            let a6 = emulate_int6(&a);
            let acc: i32 = a6.iter().zip(&b).map(|(&x, &y)| x as i32 * y as i32).sum();
            let reference: i64 = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| (x as i64).clamp(-32, 31) * y as i64)
                .sum();
            assert_eq!(acc as i64, reference);
        }
    }

    #[test]
    fn calibrator_refresh_cadence() {
        let mut cal = ScaleCalibrator::per_tensor(4, 100);
        let x = array![[1.4, -0.7]];
        let first = cal.observe(x.view()).unwrap();
        assert!((first.scale(0) - 0.2).abs() < 1e-12);
        for _ in 1..100 {
            assert!(cal.observe((&x * 2.0).view()).is_none());
        }
        let refreshed = cal.observe(x.view()).unwrap();
        assert!((refreshed.scale(0) - 0.4).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn error_bound_and_monotone(
                bits in prop::sample::select(vec![2u8, 3, 4, 5, 6, 8]),
                scale in 0.001f64..2.0,
                a in -100.0f64..100.0,
                b in -100.0f64..100.0,
            ) {
                let s = QuantScheme::per_tensor(bits, scale).unwrap();
                let (lo, hi) = clip_range(bits);
                let (q, d) = quantize_ste(ndarray::array![[a, b]].view(), &s).unwrap();
                let q = q.unwrap();
                for (i, x) in [a, b].into_iter().enumerate() {
                    let t = x / scale;
                    if t >= lo as f64 && t <= hi as f64 {
                        prop_assert!((x - d[[0, i]]).abs() <= scale / 2.0 * (1.0 + 1e-12));
                    }
                }
                let (ca, cb) = (q.codes[[0, 0]], q.codes[[0, 1]]);
                if a <= b { prop_assert!(ca <= cb) } else { prop_assert!(ca >= cb) }
                let (q2, _) = quantize_ste(ndarray::array![[a, b]].view(), &s).unwrap();
                prop_assert_eq!(q2.unwrap().codes, q.codes);
            }

            #[test]
            fn pack_is_bijective(rows in 1usize..14, cols in 1usize..30, seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let codes = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-8i8..=7));
                let blocks = pack_int4(codes.view()).unwrap();
                prop_assert_eq!(blocks.len() * BLOCK_BYTES, packed_len_bytes(rows, cols));
                prop_assert_eq!(unpack_int4(&blocks, rows, cols).unwrap(), codes);
            }
        }
    }
}
