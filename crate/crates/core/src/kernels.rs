//! Integer matrix kernels: packed INT4 x INT8 gemv, INT8 x INT8 gemm, and a
//! small benchmark harness. Accumulation is exact 32-bit integer arithmetic;
//! scales are applied once per output.

use std::hint::black_box;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, PackedInt4Matrix, PackedWeightBlock, BLOCK_COLS, BLOCK_ROWS};

/// Raw i32 accumulators of `codes[c, :] . x` over packed 4x8 blocks.
pub fn gemv_int4_accumulate(
    blocks: &[PackedWeightBlock],
    rows: usize,
    cols: usize,
    x: &[i8],
) -> Result<Vec<i32>> {
    let cb = cols.div_ceil(BLOCK_COLS);
    if x.len() != cols {
        return Err(Error::Shape(format!(
            "activation length {} != {cols}",
            x.len()
        )));
    }
    if blocks.len() != rows.div_ceil(BLOCK_ROWS) * cb {
        return Err(Error::Shape(format!(
            "{} blocks for {rows}x{cols}",
            blocks.len()
        )));
    }
    let mut acc = vec![0i32; rows.div_ceil(BLOCK_ROWS) * BLOCK_ROWS];
    let mut xs = [0i32; BLOCK_COLS];
    for (bi, blk) in blocks.iter().enumerate() {
        let (rb, c0) = (bi / cb, (bi % cb) * BLOCK_COLS);
        let width = BLOCK_COLS.min(cols - c0);
        for (j, v) in xs.iter_mut().enumerate() {
            *v = if j < width { x[c0 + j] as i32 } else { 0 };
        }
        for r in 0..BLOCK_ROWS {
            let bytes = &blk.payload[r * 4..r * 4 + 4];
            let mut s = 0i32;
            for (p, &byte) in bytes.iter().enumerate() {
                let lo = ((byte << 4) as i8 >> 4) as i32;
                let hi = (byte as i8 >> 4) as i32;
                s += lo * xs[2 * p] + hi * xs[2 * p + 1];
            }
            acc[rb * BLOCK_ROWS + r] += s;
        }
    }
    acc.truncate(rows);
    Ok(acc)
}

/// `out[c] = scales[c] * x_scale * sum_j codes[c, j] * x[j]`.
pub fn gemv_int4_packed(
    weights: &PackedInt4Matrix,
    x_codes: &[i8],
    x_scale: f32,
) -> Result<Vec<f32>> {
    if weights.scales.len() != weights.rows {
        return Err(Error::Shape(format!(
            "{} scales for {} rows",
            weights.scales.len(),
            weights.rows
        )));
    }
    let acc = gemv_int4_accumulate(&weights.blocks, weights.rows, weights.cols, x_codes)?;
    Ok(acc
        .iter()
        .zip(&weights.scales)
        .map(|(&a, &s)| s * x_scale * a as f32)
        .collect())
}

/// i32 accumulators of `a [m x k] . b [n x k]^T`.
pub fn gemm_int8_accumulate(a: ArrayView2<'_, i8>, b: ArrayView2<'_, i8>) -> Result<Array2<i32>> {
    let (m, k) = a.dim();
    let (n, kb) = b.dim();
    if k != kb {
        return Err(Error::Shape(format!("inner dims {k} vs {kb}")));
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (asl, bsl) = (
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
    );
    let mut out = Array2::<i32>::zeros((m, n));
    for i in 0..m {
        let ar = &asl[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bsl[j * k..(j + 1) * k];
            out[[i, j]] = ar.iter().zip(br).map(|(&x, &y)| x as i32 * y as i32).sum();
        }
    }
    Ok(out)
}

/// INT8 gemm with a per-tensor activation scale and per-output-channel weight
/// scales. `b` is stored as `[n x k]` (one row per output channel).
pub fn gemm_int8(
    a: ArrayView2<'_, i8>,
    b: ArrayView2<'_, i8>,
    a_scale: f32,
    b_scales: &[f32],
) -> Result<Array2<f32>> {
    if b_scales.len() != b.nrows() {
        return Err(Error::Shape(format!(
            "{} scales for {} output channels",
            b_scales.len(),
            b.nrows()
        )));
    }
    let acc = gemm_int8_accumulate(a, b)?;
    let mut out = Array2::<f32>::zeros(acc.raw_dim());
    for ((i, j), &v) in acc.indexed_iter() {
        out[[i, j]] = a_scale * b_scales[j] * v as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemmSpec {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_bits: u8,
    pub b_bits: u8,
}

impl GemmSpec {
    pub fn weight_bytes(&self) -> usize {
        match self.b_bits {
            4 => quant::packed_len_bytes(self.n, self.k),
            16 => self.n * self.k * 2,
            b => (self.n * self.k * b as usize).div_ceil(8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::Shape("zero dimension".into()));
        }
        if self.a_bits != 8 {
            return Err(Error::InvalidArgument(format!(
                "activations must be INT8, got {} bits",
                self.a_bits
            )));
        }
        if !quant::bits_supported(self.b_bits) {
            return Err(Error::InvalidArgument(format!(
                "unsupported precision: {} bits",
                self.b_bits
            )));
        }
        let max_b = if self.b_bits == 16 {
            127
        } else {
            1i64 << (self.b_bits - 1)
        };
        if self.k as i64 * 128 * max_b >= 1i64 << 31 {
            return Err(Error::InvalidArgument(
                "accumulator could overflow i32".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub op_name: String,
    pub spec: GemmSpec,
    pub iters: usize,
    pub ns_per_call: f64,
    pub checksum: i64,
    pub oracle_checksum: i64,
    pub bytes_weights: usize,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "op,m,k,n,bits,ns_per_call,bytes_weights";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.1},{}",
            self.op_name,
            self.spec.m,
            self.spec.k,
            self.spec.n,
            self.spec.b_bits,
            self.ns_per_call,
            self.bytes_weights
        )
    }
}

fn random_codes(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bits: u8) -> Array2<i8> {
    let (lo, hi) = if bits >= 8 {
        (-128, 127)
    } else {
        quant::clip_range(bits)
    };
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..=hi) as i8)
}

fn naive_checksum(a: &Array2<i8>, b: &Array2<i8>) -> i64 {
    let mut sum = 0i64;
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            for t in 0..a.ncols() {
                sum += a[[i, t]] as i64 * b[[j, t]] as i64;
            }
        }
    }
    sum
}

/// Times `iters` calls of the kernel selected by `spec.b_bits` on seeded
/// random codes and reports the median. Single-threaded.
pub fn bench_kernel(spec: GemmSpec, iters: usize, seed: u64) -> Result<BenchResult> {
    spec.validate()?;
    let iters = iters.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_codes(&mut rng, spec.m, spec.k, 8);
    let b = random_codes(
        &mut rng,
        spec.n,
        spec.k,
        if spec.b_bits == 16 { 8 } else { spec.b_bits },
    );
    let oracle = naive_checksum(&a, &b);

    let mut timings = Vec::with_capacity(iters);
    let mut checksum = 0i64;
    let op_name;
    match spec.b_bits {
        4 => {
            op_name = if spec.m == 1 {
                "gemv_int4_packed"
            } else {
                "gemm_int4_packed"
            };
            let blocks = quant::pack_int4(b.view())?;
            let rows: Vec<Vec<i8>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
            for _ in 0..iters {
                let t0 = Instant::now();
                let mut s = 0i64;
                for x in &rows {
                    let acc =
                        gemv_int4_accumulate(black_box(&blocks), spec.n, spec.k, black_box(x))?;
                    s += acc.iter().map(|&v| v as i64).sum::<i64>();
                }
                timings.push(t0.elapsed().as_nanos() as f64);
                checksum = black_box(s);
            }
        }
        8 | 6 => {
            op_name = if spec.b_bits == 8 {
                "gemm_int8"
            } else {
                "gemm_int6_emulated"
            };
            let b = if spec.b_bits == 6 {
                Array2::from_shape_vec(
                    b.raw_dim(),
                    quant::emulate_int6(b.as_slice().expect("contiguous")),
                )
                .expect("same shape")
            } else {
                b.clone()
            };
            for _ in 0..iters {
                let t0 = Instant::now();
                let acc = gemm_int8_accumulate(black_box(a.view()), black_box(b.view()))?;
                timings.push(t0.elapsed().as_nanos() as f64);
                checksum = black_box(acc.iter().map(|&v| v as i64).sum());
            }
        }
        _ => {
            op_name = if spec.b_bits == 16 {
                "gemm_fp16_equiv"
            } else {
                "gemm_dequant_float"
            };
            let af = a.mapv(|v| v as f64);
            let bt = b.mapv(|v| v as f64).reversed_axes();
            for _ in 0..iters {
                let t0 = Instant::now();
                let out = black_box(&af).dot(black_box(&bt));
                timings.push(t0.elapsed().as_nanos() as f64);
                checksum = black_box(out.iter().map(|v| v.round() as i64).sum());
            }
        }
    }
    timings.sort_by(|x, y| x.partial_cmp(y).expect("finite timings"));
    Ok(BenchResult {
        op_name: op_name.to_string(),
        spec,
        iters,
        ns_per_call: timings[timings.len() / 2],
        checksum,
        oracle_checksum: oracle,
        bytes_weights: spec.weight_bytes(),
    })
}
