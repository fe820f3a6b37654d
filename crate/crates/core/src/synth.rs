//! Parametric trait/state corpus with known ground truth.
//!
//! Each window is a 64-frame × 96-band log-Mel-like matrix built from a
//! harmonic stack under a formant envelope. Speaker factors fix pitch,
//! formants, tilt and level; the per-window agitation score raises pitch,
//! flattens the tilt, lifts the level and scales frame-to-frame pitch and
//! energy variability.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{hz_to_mel, FeatureMatrix, DB_CEIL, DB_FLOOR, N_MELS, WINDOW_FRAMES};

pub const HOP_S: f64 = 0.010;
pub const WINDOW_S: f64 = WINDOW_FRAMES as f64 * HOP_S;
const F_MIN: f64 = 0.0;
const F_MAX: f64 = 8000.0;
const SESSION_GAP_S: f64 = 7.0 * 86_400.0;
pub const MANIFEST_HEADER: [&str; 7] = [
    "sample_id",
    "speaker_id",
    "session",
    "timestamp",
    "agitation",
    "pseudo_demographic",
    "feature_file",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub sessions: u8,
    pub windows_per_session: usize,
    pub agitation_mean: f64,
    pub agitation_std: f64,
    /// Share of agitation variance carried by the speaker mean.
    pub speaker_share: f64,
    /// Share of agitation variance carried by the session offset.
    pub session_share: f64,
    /// Lag-1 autocorrelation of window-level agitation within a session.
    pub autocorrelation: f64,
    pub noise_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 120,
            sessions: 4,
            windows_per_session: 20,
            agitation_mean: 1.42,
            agitation_std: 0.89,
            speaker_share: 0.3,
            session_share: 0.25,
            autocorrelation: 0.7,
            noise_fraction: 0.123,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 10 {
            return Err(Error::InvalidArgument(format!(
                "need at least 10 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.sessions == 0 || self.windows_per_session == 0 {
            return Err(Error::InvalidArgument(
                "sessions and windows_per_session must be positive".into(),
            ));
        }
        let shares_ok = self.speaker_share >= 0.0
            && self.session_share >= 0.0
            && self.speaker_share + self.session_share <= 1.0;
        if !shares_ok
            || !(0.0..1.0).contains(&self.autocorrelation)
            || !(0.0..=1.0).contains(&self.noise_fraction)
        {
            return Err(Error::InvalidArgument(
                "variance shares, autocorrelation or noise fraction out of range".into(),
            ));
        }
        if !(self.agitation_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "agitation_std must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerFactors {
    pub speaker_id: u32,
    /// Habitual F0 in Hz.
    pub base_pitch_hz: f64,
    /// Offset of the pitch from the population mean, in semitones.
    pub base_pitch_offset: f64,
    pub formant_pattern_seed: u64,
    pub formants_hz: [f64; 3],
    pub formant_bandwidths_mel: [f64; 3],
    /// Spectral slope in dB per octave above F0 (negative).
    pub tilt_db_per_octave: f64,
    pub energy_bias: f64,
    pub mean_agitation: f64,
    pub pseudo_demographic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateFactors {
    pub agitation: f64,
    pub pitch_variance_gain: f64,
    pub rate_gain: f64,
    pub energy_variance_gain: f64,
}

impl StateFactors {
    pub fn from_agitation(agitation: f64) -> Self {
        Self {
            agitation,
            pitch_variance_gain: 1.0 + 1.0 * agitation,
            rate_gain: 1.0 + 0.25 * agitation,
            energy_variance_gain: 1.0 + 0.75 * agitation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub sample_id: usize,
    pub features: FeatureMatrix,
    pub speaker_id: u32,
    pub session: u8,
    /// Position of the window within its session.
    pub window_index: usize,
    pub timestamp: f64,
    pub agitation: f64,
    pub pseudo_demographic: bool,
    pub noise_injected: bool,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SynthConfig,
    pub seed: u64,
    pub speakers: Vec<SpeakerFactors>,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn speaker_ids(&self) -> Vec<u32> {
        self.speakers.iter().map(|s| s.speaker_id).collect()
    }

    /// Indices of samples whose speaker satisfies `keep`.
    pub fn indices_where(&self, keep: impl Fn(&CorpusSample) -> bool) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| keep(s))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Fractional mel-band index of a frequency, matching the filterbank layout
/// (`n + 2` mel-spaced edges, band `i` centred on edge `i + 1`).
fn band_position(hz: f64) -> f64 {
    let (m0, m1) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (hz_to_mel(hz) - m0) / (m1 - m0) * (N_MELS as f64 + 1.0) - 1.0
}

fn sample_speaker(rng: &mut ChaCha8Rng, id: u32, cfg: &SynthConfig) -> SpeakerFactors {
    let pseudo_demographic = rng.random_bool(0.5);
    let center = if pseudo_demographic { 200.0 } else { 120.0 };
    let semis = Normal::new(0.0, 2.5).unwrap().sample(rng);
    let base_pitch_hz = center * 2f64.powf(semis / 12.0);
    let formant_pattern_seed = rng.random();
    let mut frng = ChaCha8Rng::seed_from_u64(formant_pattern_seed);
    let scale = if pseudo_demographic { 1.12 } else { 1.0 };
    let formants_hz = [
        frng.random_range(450.0..850.0) * scale,
        frng.random_range(1100.0..2200.0) * scale,
        frng.random_range(2300.0..3400.0) * scale,
    ];
    let formant_bandwidths_mel = [
        frng.random_range(60.0..120.0),
        frng.random_range(80.0..160.0),
        frng.random_range(100.0..200.0),
    ];
    let sd_spk = cfg.agitation_std * cfg.speaker_share.sqrt();
    let mean_agitation =
        cfg.agitation_mean + Normal::new(0.0, sd_spk.max(1e-12)).unwrap().sample(rng);
    SpeakerFactors {
        speaker_id: id,
        base_pitch_hz,
        base_pitch_offset: semis,
        formant_pattern_seed,
        formants_hz,
        formant_bandwidths_mel,
        tilt_db_per_octave: rng.random_range(-9.0..-4.0),
        energy_bias: rng.random_range(-6.0..6.0),
        mean_agitation,
        pseudo_demographic,
    }
}

/// Session-level channel differences.
struct SessionChannel {
    tilt_offset: f64,
    level_offset: f64,
}

/// Renders one window in dB, `[frames, mels]`.
fn render_window(
    rng: &mut ChaCha8Rng,
    spk: &SpeakerFactors,
    chan: &SessionChannel,
    state: &StateFactors,
    noisy: bool,
) -> Array2<f32> {
    let a = state.agitation;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let positions: Vec<f64> = (0..N_MELS).map(|b| b as f64).collect();
    // phonetic content: the window's formants drift around the speaker's targets
    let shift = 1.0 + 0.06 * std_normal.sample(rng);
    let formant_mel: Vec<f64> = spk
        .formants_hz
        .iter()
        .map(|f| hz_to_mel(f * shift))
        .collect();
    let f0 = spk.base_pitch_hz * (1.0 + 0.06 * a);
    let tilt = spk.tilt_db_per_octave + 1.2 * a + chan.tilt_offset;
    let level = spk.energy_bias + chan.level_offset + 2.0 * a;
    let rate_hz = rng.random_range(3.0..5.0) * state.rate_gain;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let jitter_sd = 0.008 * state.pitch_variance_gain;
    let energy_sd_db = 1.2 * state.energy_variance_gain;
    let noise_level_db = if noisy {
        rng.random_range(-22.0..-12.0)
    } else {
        -62.0
    };

    let mut out = Array2::<f32>::zeros((WINDOW_FRAMES, N_MELS));
    let mut pitch_dev = 0.0f64;
    let mut power = vec![0.0f64; N_MELS];
    for t in 0..WINDOW_FRAMES {
        pitch_dev = 0.6 * pitch_dev + 0.8 * jitter_sd * std_normal.sample(rng);
        let f0_t = f0 * (1.0 + pitch_dev);
        let syll = (std::f64::consts::TAU * rate_hz * t as f64 * HOP_S + phase).sin();
        let frame_db =
            level + 3.0 * state.energy_variance_gain * syll + energy_sd_db * std_normal.sample(rng)
                - 30.0;
        power.iter_mut().for_each(|p| *p = 0.0);
        let mut k = 1.0;
        while k * f0_t < F_MAX * 0.98 {
            let fk = k * f0_t;
            let mel = hz_to_mel(fk);
            let env_db: f64 = formant_mel
                .iter()
                .zip(&spk.formant_bandwidths_mel)
                .map(|(&fm, &bw)| 18.0 * (-(mel - fm).powi(2) / (2.0 * bw * bw)).exp())
                .sum();
            let amp_db = frame_db + env_db + tilt * k.log2();
            let amp = 10f64.powf(amp_db / 10.0);
            let pos = band_position(fk);
            let lo = (pos - 3.0).floor().max(0.0) as usize;
            let hi = ((pos + 3.0).ceil() as usize).min(N_MELS - 1);
            for b in lo..=hi {
                let d = positions[b] - pos;
                power[b] += amp * (-d * d / (2.0 * 0.7 * 0.7)).exp();
            }
            k += 1.0;
        }
        for (b, p) in power.iter().enumerate() {
            let noise = if noisy {
                noise_level_db + 4.0 * std_normal.sample(rng)
            } else {
                noise_level_db
            };
            let floor = 10f64.powf(noise / 10.0);
            let db = 10.0 * (p + floor).log10() + 1.0 * std_normal.sample(rng);
            out[[t, b]] = (db as f32).clamp(DB_FLOOR, DB_CEIL);
        }
    }
    out
}

pub fn generate_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    let sd = cfg.agitation_std;
    let sd_sess = sd * cfg.session_share.sqrt();
    let sd_win = sd
        * (1.0 - cfg.speaker_share - cfg.session_share)
            .max(0.0)
            .sqrt();
    let rho = cfg.autocorrelation;
    let mut speakers = Vec::with_capacity(cfg.n_speakers);
    let mut samples = Vec::new();
    for id in 0..cfg.n_speakers as u32 {
        let spk = sample_speaker(&mut root, id, cfg);
        // per-speaker stream so speakers are independent of generation order
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for session in 1..=cfg.sessions {
            let chan = SessionChannel {
                tilt_offset: 0.5 * normal.sample(&mut rng),
                level_offset: 1.5 * normal.sample(&mut rng),
            };
            let sess_mean = spk.mean_agitation + sd_sess * normal.sample(&mut rng);
            let mut resid = sd_win * normal.sample(&mut rng);
            for w in 0..cfg.windows_per_session {
                if w > 0 {
                    resid =
                        rho * resid + sd_win * (1.0 - rho * rho).sqrt() * normal.sample(&mut rng);
                }
                let agitation = (sess_mean + resid).clamp(0.0, 4.0);
                let noisy = rng.random_bool(cfg.noise_fraction);
                let state = StateFactors::from_agitation(agitation);
                let values = render_window(&mut rng, &spk, &chan, &state, noisy);
                samples.push(CorpusSample {
                    sample_id: samples.len(),
                    features: FeatureMatrix::new(values),
                    speaker_id: id,
                    session,
                    window_index: w,
                    timestamp: (session as f64 - 1.0) * SESSION_GAP_S + w as f64 * WINDOW_S,
                    agitation,
                    pseudo_demographic: spk.pseudo_demographic,
                    noise_injected: noisy,
                });
            }
        }
        speakers.push(spk);
    }
    Ok(Corpus {
        config: cfg.clone(),
        seed,
        speakers,
        samples,
    })
}

/// Renders a single window for a given speaker and agitation; used by
/// generator-contract checks.
pub fn render_for(spk: &SpeakerFactors, agitation: f64, noisy: bool, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chan = SessionChannel {
        tilt_offset: 0.0,
        level_offset: 0.0,
    };
    FeatureMatrix::new(render_window(
        &mut rng,
        spk,
        &chan,
        &StateFactors::from_agitation(agitation),
        noisy,
    ))
}

pub fn sample_speakers(cfg: &SynthConfig, seed: u64) -> Vec<SpeakerFactors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_speakers as u32)
        .map(|id| sample_speaker(&mut rng, id, cfg))
        .collect()
}

/// Mean over bands of the across-frame variance of band energy.
pub fn band_energy_variance(f: &FeatureMatrix) -> f64 {
    let v = f.values.mapv(|x| x as f64);
    let var = v.var_axis(ndarray::Axis(0), 0.0);
    var.mean().unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub speaker_fold: BTreeMap<u32, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, speaker: u32) -> Option<usize> {
        self.speaker_fold.get(&speaker).copied()
    }

    pub fn speakers_in(&self, fold: usize) -> Vec<u32> {
        self.speaker_fold
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&s, _)| s)
            .collect()
    }

    /// `(train, test)` sample indices for one fold.
    pub fn split(&self, corpus: &Corpus, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in corpus.samples.iter().enumerate() {
            match self.fold_of(s.speaker_id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {}
            }
        }
        (train, test)
    }
}

/// Grouped k-fold over speakers, stratified on each speaker's mean label:
/// speakers are sorted by mean agitation and each run of `k` consecutive
/// speakers is dealt at random across the folds.
pub fn speaker_independent_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for s in &corpus.samples {
        let e = sums.entry(s.speaker_id).or_default();
        e.0 += s.agitation;
        e.1 += 1;
    }
    if k < 2 || k > sums.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot build {k} folds over {} speakers",
            sums.len()
        )));
    }
    let mut order: Vec<(u32, f64)> = sums
        .into_iter()
        .map(|(s, (t, n))| (s, t / n as f64))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speaker_fold = BTreeMap::new();
    // rotate the starting fold so a short final stratum does not always hit fold 0
    let mut counts = vec![0usize; k];
    for chunk in order.chunks(k) {
        let mut folds: Vec<usize> = (0..k).collect();
        folds.shuffle(&mut rng);
        if chunk.len() < k {
            folds.sort_by_key(|&f| (counts[f], f));
            folds.truncate(chunk.len());
            folds.shuffle(&mut rng);
        }
        for ((spk, _), f) in chunk.iter().zip(folds) {
            speaker_fold.insert(*spk, f);
            counts[f] += 1;
        }
    }
    Ok(FoldAssignment { k, speaker_fold })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub unused: Vec<usize>,
}

pub fn temporal_split(
    corpus: &Corpus,
    train_sessions: &[u8],
    test_sessions: &[u8],
) -> Result<TemporalSplit> {
    if train_sessions.iter().any(|s| test_sessions.contains(s)) {
        return Err(Error::InvalidArgument(
            "train and test sessions overlap".into(),
        ));
    }
    let mut split = TemporalSplit {
        train: Vec::new(),
        test: Vec::new(),
        unused: Vec::new(),
    };
    for (i, s) in corpus.samples.iter().enumerate() {
        if train_sessions.contains(&s.session) {
            split.train.push(i);
        } else if test_sessions.contains(&s.session) {
            split.test.push(i);
        } else {
            split.unused.push(i);
        }
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidArgument(
            "temporal split has an empty side".into(),
        ));
    }
    Ok(split)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: usize,
    speaker_id: u32,
    session: u8,
    timestamp: f64,
    agitation: f64,
    pseudo_demographic: u8,
    feature_file: String,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Writes `manifest.csv` plus one feature cache per sample under `dir/features`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    for s in &corpus.samples {
        let name = format!("features/{:06}.mpib", s.sample_id);
        let file = fs::File::create(dir.join(&name))?;
        s.features.write_cache(std::io::BufWriter::new(file))?;
        w.serialize(ManifestRow {
            sample_id: s.sample_id,
            speaker_id: s.speaker_id,
            session: s.session,
            timestamp: s.timestamp,
            agitation: s.agitation,
            pseudo_demographic: s.pseudo_demographic as u8,
            feature_file: name,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    let meta = serde_json::json!({ "seed": corpus.seed, "config": corpus.config, "speakers": corpus.speakers });
    fs::write(
        dir.join("corpus.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(manifest)
}

/// Reads a corpus written by [`write_corpus`]. Noise flags are not part of
/// the manifest and come back as `false`.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)
            .map_err(|e| Error::Format(e.to_string()))?;
    let config: SynthConfig =
        serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format(e.to_string()))?;
    let speakers: Vec<SpeakerFactors> = serde_json::from_value(meta["speakers"].clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let seed = meta["seed"].as_u64().unwrap_or(0);
    let mut r = csv::Reader::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    let mut samples = Vec::new();
    let mut last: Option<(u32, u8, usize)> = None;
    for row in r.deserialize() {
        let row: ManifestRow = row.map_err(csv_err)?;
        let file = fs::File::open(dir.join(&row.feature_file))?;
        let features = FeatureMatrix::read_cache(std::io::BufReader::new(file))?;
        let window_index = match last {
            Some((s, sess, w)) if s == row.speaker_id && sess == row.session => w + 1,
            _ => 0,
        };
        last = Some((row.speaker_id, row.session, window_index));
        samples.push(CorpusSample {
            sample_id: row.sample_id,
            features,
            speaker_id: row.speaker_id,
            session: row.session,
            window_index,
            timestamp: row.timestamp,
            agitation: row.agitation,
            pseudo_demographic: row.pseudo_demographic != 0,
            noise_injected: false,
        });
    }
    Ok(Corpus {
        config,
        seed,
        speakers,
        samples,
    })
}
