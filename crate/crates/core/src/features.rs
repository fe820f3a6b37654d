//! Log-Mel front end.
//!
//! Audio is framed with a Hann window (25 ms / 10 ms at 16 kHz), transformed
//! with a zero-padded FFT, projected onto an HTK-scale triangular filterbank
//! spanning 0-8 kHz and converted to dB of power. Values are clipped to
//! `[-80, 0]` dB before any normalization.
//!
//! Model inputs are `n_mels x 64` windows cut from a [`FeatureMatrix`]
//! (mel bands on rows, frames on columns).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 96;
pub const WINDOW_FRAMES: usize = 64;
pub const DB_FLOOR: f32 = -80.0;
pub const DB_CEIL: f32 = 0.0;
const POWER_EPS: f64 = 1e-10;

const CACHE_MAGIC: &[u8; 4] = b"MPIB";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(Error::InvalidAudio("empty clip".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Reads a PCM16 little-endian mono WAV file.
    pub fn from_wav<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidAudio(format!(
                "{} channels, expected mono",
                spec.channels
            )));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::InvalidAudio("expected 16-bit PCM".into()));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate(spec.sample_rate));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &v in &self.samples {
            writer.write_sample((v.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// Log-power mel energies, `[n_frames x n_mels]`, in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f32>) -> Self {
        Self { values }
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    /// Cuts `[n_mels x width]` windows (mel on rows) every `stride` frames.
    /// A tail shorter than `width` is dropped.
    pub fn windows(&self, width: usize, stride: usize) -> Vec<Array2<f32>> {
        assert!(width > 0 && stride > 0, "width and stride must be positive");
        let n = self.n_frames();
        if n < width {
            return Vec::new();
        }
        (0..=(n - width) / stride)
            .map(|i| {
                let start = i * stride;
                self.values
                    .slice(s![start..start + width, ..])
                    .t()
                    .to_owned()
            })
            .collect()
    }

    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_u32::<LittleEndian>(self.n_frames() as u32)?;
        w.write_u32::<LittleEndian>(self.n_mels() as u32)?;
        for &v in self.values.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("bad feature cache magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported feature cache version {version}"
            )));
        }
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let values =
            Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { values })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK filterbank, `[n_mels x (n_fft/2 + 1)]`, unit peak.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = Array2::zeros((n_mels, n_bins));
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }
}

pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Computes the clipped log-Mel spectrogram of a 16 kHz clip.
pub fn compute_logmel(
    clip: &AudioClip,
    n_mels: usize,
    win_ms: f64,
    hop_ms: f64,
) -> Result<FeatureMatrix> {
    if !(win_ms > hop_ms && hop_ms > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need win_ms > hop_ms > 0, got {win_ms}/{hop_ms}"
        )));
    }
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedRate(clip.sample_rate));
    }
    let sr = clip.sample_rate as f64;
    let win = (win_ms * sr / 1000.0).round() as usize;
    let hop = (hop_ms * sr / 1000.0).round() as usize;
    let x = &clip.samples;
    if x.len() < win {
        return Err(Error::InsufficientAudio {
            samples: x.len(),
            needed: win,
        });
    }
    let n_fft = win.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let fb = MelFilterbank::new(n_mels, n_fft, clip.sample_rate, 0.0, sr / 2.0);

    // periodic Hann, amplitude-normalized so a full-scale sinusoid peaks near -6 dB
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let norm = 1.0 / hann.iter().sum::<f64>();

    let n_frames = frame_count(x.len(), win, hop);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    let mut out = Array2::<f32>::zeros((n_frames, n_mels));
    for t in 0..n_frames {
        let frame = &x[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(frame[i] as f64 * hann[i] * norm, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
            *p = c.norm_sqr();
        }
        for m in 0..n_mels {
            let e: f64 = fb
                .weights
                .row(m)
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            let db = 10.0 * e.max(POWER_EPS).log10();
            out[[t, m]] = (db as f32).clamp(DB_FLOOR, DB_CEIL);
        }
    }
    Ok(FeatureMatrix { values: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalNormStats {
    pub mean: f64,
    pub std: f64,
    pub n_frames_fitted: usize,
}

/// Scalar mean and population std over every value of the training matrices.
pub fn fit_global_norm<'a, I>(train: I) -> Result<GlobalNormStats>
where
    I: IntoIterator<Item = ArrayView2<'a, f32>>,
    I::IntoIter: Clone,
{
    let it = train.into_iter();
    let (mut n, mut frames, mut sum) = (0usize, 0usize, 0.0f64);
    for m in it.clone() {
        n += m.len();
        frames += m.nrows();
        sum += m.iter().map(|&v| v as f64).sum::<f64>();
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "no frames to fit normalization".into(),
        ));
    }
    let mean = sum / n as f64;
    let ss: f64 = it
        .map(|m| m.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
        .sum();
    let std = (ss / n as f64).sqrt();
    if !(std > 1e-12) {
        return Err(Error::DegenerateStatistics);
    }
    Ok(GlobalNormStats {
        mean,
        std,
        n_frames_fitted: frames,
    })
}

pub fn fit_global_norm_features(train: &[FeatureMatrix]) -> Result<GlobalNormStats> {
    fit_global_norm(train.iter().map(|f| f.values.view()))
}

impl GlobalNormStats {
    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        x.mapv(|v| ((v as f64 - self.mean) / self.std) as f32)
    }

    pub fn invert(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        x.mapv(|v| (v as f64 * self.std + self.mean) as f32)
    }
}

/// Elementwise `(x - mean) / std`; output is not clipped.
pub fn apply_norm(f: &FeatureMatrix, stats: &GlobalNormStats) -> Result<FeatureMatrix> {
    if !(stats.std > 0.0) {
        return Err(Error::DegenerateStatistics);
    }
    Ok(FeatureMatrix {
        values: stats.apply(f.values.view()),
    })
}
