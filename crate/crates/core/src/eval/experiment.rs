//! End-to-end experiments on the synthetic corpus: masked-patch pretraining
//! of the encoder on a disjoint corpus, cached encoder outputs, head training
//! with speaker-independent folds, and leakage/utility evaluation.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    budget, knn_mi, knn_mi_dithered, topk_identification, TrialList, ENROLL_PER_SPEAKER, KNN_K,
};
use crate::error::{Error, Result};
use crate::features::{self, GlobalNormStats};
use crate::losses::LossBreakdown;
use crate::model::tmae::{Tmae, DEFAULT_MASK_RATIO};
use crate::model::{patch_means, BatchInput, Encoder, Model, ModelConfig, TrainBatch, TrainConfig};
use crate::nn::AdamW;
use crate::privacy::MiaConfig;
use crate::synth::{self, Corpus, SynthConfig};

/// Seed offsets of the named random substreams derived from a root seed.
pub mod stream {
    pub const CORPUS: u64 = 0x01;
    pub const PRETRAIN_CORPUS: u64 = 0x02;
    pub const PRETRAIN: u64 = 0x03;
    pub const FOLDS: u64 = 0x04;
    pub const HEADS: u64 = 0x05;
    pub const BATCHES: u64 = 0x06;
    pub const BOOTSTRAP: u64 = 0x07;
    pub const PRIVACY: u64 = 0x08;

    pub fn derive(root: u64, stream: u64) -> u64 {
        // splitmix64 finalizer
        let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub n_speakers: usize,
    pub sessions: u8,
    pub windows_per_session: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub decoder_hidden: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            sessions: 2,
            windows_per_session: 10,
            steps: 300,
            batch: 16,
            lr: 2e-3,
            weight_decay: 1e-4,
            mask_ratio: DEFAULT_MASK_RATIO,
            decoder_hidden: 64,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0
            || !(self.lr > 0.0)
            || self.weight_decay < 0.0
            || self.decoder_hidden == 0
        {
            return Err(Error::InvalidArgument(
                "invalid pretraining settings".into(),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidRatio(self.mask_ratio));
        }
        self.corpus().validate()
    }

    fn corpus(&self) -> SynthConfig {
        SynthConfig {
            n_speakers: self.n_speakers,
            sessions: self.sessions,
            windows_per_session: self.windows_per_session,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: SynthConfig,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    /// Number of folds actually run (the first ones); all when unset.
    pub run_folds: Option<usize>,
    /// Optimizer steps per epoch; one pass over the training windows when unset.
    pub steps_per_epoch: Option<usize>,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                finetune_encoder: false,
                ..TrainConfig::default()
            },
            folds: 5,
            run_folds: None,
            steps_per_epoch: None,
            bootstrap_resamples: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.folds < 2 || self.run_folds.is_some_and(|r| r == 0 || r > self.folds) {
            return Err(Error::InvalidArgument(
                "folds must be >= 2 and run_folds within 1..=folds".into(),
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidArgument(
                "steps_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Window matrix `[frames, mels]` to normalized model input `[mels, frames]`.
pub fn model_input(corpus: &Corpus, idx: &[usize], norm: &GlobalNormStats) -> Array3<f64> {
    let first = &corpus.samples[idx[0]].features.values;
    let (frames, mels) = first.dim();
    let mut x = Array3::zeros((idx.len(), mels, frames));
    for (b, &i) in idx.iter().enumerate() {
        let v = &corpus.samples[i].features.values;
        for f in 0..frames {
            for m in 0..mels {
                x[[b, m, f]] = norm.normalize(v[[f, m]] as f64);
            }
        }
    }
    x
}

pub fn pretrain_encoder(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Encoder, GlobalNormStats, Vec<f64>)> {
    let p = &cfg.pretrain;
    let corpus =
        synth::generate_corpus(&p.corpus(), stream::derive(seed, stream::PRETRAIN_CORPUS))?;
    let norm = features::fit_global_norm_features(
        &corpus
            .samples
            .iter()
            .map(|s| s.features.clone())
            .collect::<Vec<_>>(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream::derive(seed, stream::PRETRAIN));
    let encoder = Encoder::new(cfg.model.encoder.clone(), &mut rng)?;
    let mut tmae = Tmae::new(encoder, p.decoder_hidden, p.mask_ratio, &mut rng)?;
    let mut opt = AdamW::new(p.lr, p.weight_decay);
    let all: Vec<usize> = (0..corpus.samples.len()).collect();
    let mut losses = Vec::with_capacity(p.steps);
    for _ in 0..p.steps {
        let idx: Vec<usize> = all
            .choose_multiple(&mut rng, p.batch.min(all.len()))
            .copied()
            .collect();
        let x = model_input(&corpus, &idx, &norm);
        losses.push(tmae.step(x.view(), &mut opt, &mut rng)?);
    }
    Ok((tmae.encoder, norm, losses))
}

/// Corpus, frozen encoder and its cached (pre-dropout) outputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub norm: GlobalNormStats,
    pub encoder: Encoder,
    pub hidden: Array2<f64>,
    pub recon: Array2<f64>,
    pub pretrain_losses: Vec<f64>,
    pub seed: u64,
}

pub const ENCODE_CHUNK: usize = 64;

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = synth::generate_corpus(&cfg.corpus, stream::derive(seed, stream::CORPUS))?;
    let (mut encoder, norm, pretrain_losses) = pretrain_encoder(cfg, seed)?;
    if cfg.model.encoder.mode.is_int8() {
        let n = corpus.samples.len().min(256);
        let calib: Vec<usize> = (0..n).collect();
        encoder.calibrate_int8(model_input(&corpus, &calib, &norm).view())?;
    }
    let n = corpus.samples.len();
    let mut hidden = Array2::zeros((n, encoder.output_dim()));
    let mut recon = Array2::zeros((n, cfg.model.recon_targets()));
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(ENCODE_CHUNK) {
        let x = model_input(&corpus, chunk, &norm);
        let h = encoder.forward(x.view(), None)?;
        let (a, b) = (chunk[0], chunk[chunk.len() - 1] + 1);
        hidden.slice_mut(s![a..b, ..]).assign(&h);
        recon
            .slice_mut(s![a..b, ..])
            .assign(&patch_means(x.view())?);
    }
    Ok(Prepared {
        corpus,
        norm,
        encoder,
        hidden,
        recon,
        pretrain_losses,
        seed,
    })
}

impl Prepared {
    /// Replaces the encoder outputs (for example with externally computed features).
    pub fn with_hidden(mut self, hidden: Array2<f64>) -> Result<Self> {
        if hidden.nrows() != self.corpus.samples.len() {
            return Err(Error::Shape(
                "one hidden row per corpus sample required".into(),
            ));
        }
        self.hidden = hidden;
        Ok(self)
    }

    pub fn labels(&self, idx: &[usize]) -> (Vec<u32>, Vec<f64>) {
        idx.iter()
            .map(|&i| {
                (
                    self.corpus.samples[i].speaker_id,
                    self.corpus.samples[i].agitation,
                )
            })
            .unzip()
    }
}

/// Batches of `participants` speakers × 2 sessions × 2 consecutive windows.
pub struct BatchSampler {
    /// speaker → session → window index → sample index
    index: BTreeMap<u32, BTreeMap<u8, BTreeMap<usize, usize>>>,
    speakers: Vec<u32>,
    participants: usize,
}

impl BatchSampler {
    pub fn new(corpus: &Corpus, pool: &[usize], participants: usize) -> Result<Self> {
        let mut index: BTreeMap<u32, BTreeMap<u8, BTreeMap<usize, usize>>> = BTreeMap::new();
        for &i in pool {
            let s = &corpus.samples[i];
            index
                .entry(s.speaker_id)
                .or_default()
                .entry(s.session)
                .or_default()
                .insert(s.window_index, i);
        }
        let usable = |sess: &BTreeMap<u8, BTreeMap<usize, usize>>| {
            sess.values()
                .filter(|w| w.keys().any(|k| w.contains_key(&(k + 1))))
                .count()
                >= 2
        };
        let speakers: Vec<u32> = index
            .iter()
            .filter(|(_, s)| usable(s))
            .map(|(&k, _)| k)
            .collect();
        if speakers.len() < participants.min(2) || speakers.len() < 2 {
            return Err(Error::InvalidArgument(
                "not enough speakers with two sessions of consecutive windows".into(),
            ));
        }
        let participants = participants.min(speakers.len());
        Ok(Self {
            index,
            speakers,
            participants,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.participants * 4
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size());
        for &spk in self.speakers.choose_multiple(rng, self.participants) {
            let sessions: Vec<&BTreeMap<usize, usize>> = self.index[&spk]
                .values()
                .filter(|w| w.keys().any(|k| w.contains_key(&(k + 1))))
                .collect();
            for w in sessions.choose_multiple(rng, 2) {
                let starts: Vec<usize> = w
                    .keys()
                    .copied()
                    .filter(|k| w.contains_key(&(k + 1)))
                    .collect();
                let k = *starts.choose(rng).expect("usable session");
                out.push(w[&k]);
                out.push(w[&(k + 1)]);
            }
        }
        out
    }
}

pub fn make_batch(prep: &Prepared, idx: &[usize]) -> TrainBatch {
    let s = |i: usize| &prep.corpus.samples[i];
    TrainBatch {
        input: BatchInput::Encoded(prep.hidden.select(Axis(0), idx)),
        participants: idx.iter().map(|&i| s(i).speaker_id).collect(),
        sessions: idx.iter().map(|&i| s(i).session).collect(),
        window_index: idx.iter().map(|&i| s(i).window_index).collect(),
        agitation: idx.iter().map(|&i| s(i).agitation).collect(),
        recon_target: prep.recon.select(Axis(0), idx),
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHeads {
    pub model: Model,
    /// Mean loss breakdown per epoch.
    pub history: Vec<LossBreakdown>,
}

/// Trains fresh heads on the frozen encoder outputs of `train_idx`.
pub fn train_heads(
    prep: &Prepared,
    train_idx: &[usize],
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<TrainedHeads> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream::derive(seed, stream::HEADS));
    let mut model = Model::with_encoder(model_cfg.clone(), prep.encoder.clone(), &mut rng)?;
    let sampler = BatchSampler::new(&prep.corpus, train_idx, cfg.train.batch_participants)?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_idx.len().div_ceil(sampler.batch_size()).max(1));
    let tcfg = TrainConfig {
        finetune_encoder: false,
        ..cfg.train.clone()
    };
    let mut opt = tcfg.optimizer();
    let mut brng = ChaCha8Rng::seed_from_u64(stream::derive(seed, stream::BATCHES));
    let mut history = Vec::new();
    for epoch in 0..tcfg.n_epochs() {
        let mut acc: Option<LossBreakdown> = None;
        for _ in 0..steps {
            let batch = make_batch(prep, &sampler.sample(&mut brng));
            let out = model.train_step(&batch, &tcfg, &mut opt, &mut rng)?;
            acc = Some(match acc {
                None => out,
                Some(a) => add_breakdown(&a, &out),
            });
        }
        let mean = scale_breakdown(&acc.expect("steps >= 1"), 1.0 / steps as f64);
        log::debug!("epoch {epoch}: {}", mean.csv_row(epoch));
        history.push(mean);
    }
    Ok(TrainedHeads { model, history })
}

fn add_breakdown(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    let mut out = a.clone();
    out.components.recon += b.components.recon;
    out.components.stab += b.components.stab;
    out.components.smooth += b.components.smooth;
    out.components.orth += b.components.orth;
    out.components.agit += b.components.agit;
    out.total += b.total;
    out
}

fn scale_breakdown(a: &LossBreakdown, k: f64) -> LossBreakdown {
    let mut out = a.clone();
    out.components.recon *= k;
    out.components.stab *= k;
    out.components.smooth *= k;
    out.components.orth *= k;
    out.components.agit *= k;
    out.total *= k;
    out
}

/// Embeddings and predictions on a held-out set.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub idx: Vec<usize>,
    pub speakers: Vec<u32>,
    pub agitation: Vec<f64>,
    pub predicted: Vec<f64>,
    pub trait_emb: Array2<f64>,
    pub state_emb: Array2<f64>,
    /// Quantization step of the state values; `None` at 16 bits.
    pub state_step: Option<f64>,
}

pub fn embed_heldout(prep: &Prepared, model: &Model, idx: &[usize]) -> Result<HeldOut> {
    let mut idx = idx.to_vec();
    // enrollment takes the earliest windows of each speaker
    idx.sort_by_key(|&i| {
        let s = &prep.corpus.samples[i];
        (s.speaker_id, s.session, s.window_index)
    });
    let e = model.embed(&BatchInput::Encoded(prep.hidden.select(Axis(0), &idx)))?;
    let (speakers, agitation) = prep.labels(&idx);
    Ok(HeldOut {
        idx,
        speakers,
        agitation,
        predicted: e.agitation,
        trait_emb: e.trait_emb,
        state_step: e.state.codes.as_ref().map(|_| e.state.scale),
        state_emb: e.state.values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub rho: f64,
    pub state_top1: f64,
    pub state_eer: f64,
    pub state_mi_bits: f64,
    pub trait_top1: f64,
    pub trait_eer: f64,
    pub n_test_speakers: usize,
}

/// Spearman correlation of predictions with labels; 0 when predictions are constant.
pub fn rho_or_zero(pred: &[f64], target: &[f64]) -> Result<f64> {
    match super::spearman_rho(pred, target) {
        Ok(r) => Ok(r),
        Err(Error::UndefinedCorrelation) => Ok(0.0),
        Err(e) => Err(e),
    }
}

pub fn fold_metrics(h: &HeldOut) -> Result<FoldMetrics> {
    let st = topk_identification(h.state_emb.view(), &h.speakers, ENROLL_PER_SPEAKER, &[1])?[0];
    let tt = topk_identification(h.trait_emb.view(), &h.speakers, ENROLL_PER_SPEAKER, &[1])?[0];
    Ok(FoldMetrics {
        rho: rho_or_zero(&h.predicted, &h.agitation)?,
        state_top1: st,
        state_eer: TrialList::all_vs_all(h.state_emb.view(), &h.speakers, ENROLL_PER_SPEAKER)?
            .eer()?,
        state_mi_bits: match h.state_step {
            Some(step) => knn_mi_dithered(h.state_emb.view(), &h.speakers, KNN_K, step)?,
            None => knn_mi(h.state_emb.view(), &h.speakers, KNN_K)?,
        },
        trait_top1: tt,
        trait_eer: TrialList::all_vs_all(h.trait_emb.view(), &h.speakers, ENROLL_PER_SPEAKER)?
            .eer()?,
        n_test_speakers: h
            .speakers
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
}

fn mean_metrics(f: &[FoldMetrics]) -> FoldMetrics {
    let n = f.len() as f64;
    let m = |g: fn(&FoldMetrics) -> f64| f.iter().map(g).sum::<f64>() / n;
    FoldMetrics {
        rho: m(|x| x.rho),
        state_top1: m(|x| x.state_top1),
        state_eer: m(|x| x.state_eer),
        state_mi_bits: m(|x| x.state_mi_bits),
        trait_top1: m(|x| x.trait_top1),
        trait_eer: m(|x| x.trait_eer),
        n_test_speakers: f.iter().map(|x| x.n_test_speakers).sum::<usize>() / f.len().max(1),
    }
}

/// Speaker-independent cross-validation of one head configuration.
pub fn cross_validate(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<CvResult> {
    let folds = synth::speaker_independent_folds(
        &prep.corpus,
        cfg.folds,
        stream::derive(prep.seed, stream::FOLDS),
    )?;
    let mut out = Vec::new();
    for fold in 0..cfg.run_folds.unwrap_or(cfg.folds) {
        let (train, test) = folds.split(&prep.corpus, fold);
        let heads = train_heads(
            prep,
            &train,
            cfg,
            model_cfg,
            stream::derive(seed, fold as u64 + 1),
        )?;
        out.push(fold_metrics(&embed_heldout(prep, &heads.model, &test)?)?);
    }
    Ok(CvResult {
        mean: mean_metrics(&out),
        folds: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bits: u8,
    pub state_dim: usize,
    pub capacity_bits: u64,
    pub rho: f64,
    pub top1: f64,
    pub eer: f64,
    pub mi_bits: f64,
    pub rho_ci: (f64, f64),
    pub eer_ci: (f64, f64),
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "bits,state_dim,capacity_bits,rho,top1,eer,mi_bits,rho_lo,rho_hi,eer_lo,eer_hi";
}

/// Trains and evaluates one head per `(bits, state_dim)` pair, all on the same
/// frozen encoder. Intervals bootstrap over folds.
pub fn run_sweep(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    configs: &[(u8, usize)],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    configs
        .iter()
        .map(|&(bits, dim)| {
            let mc = ModelConfig {
                state_bits: bits,
                state_dim: dim,
                ..cfg.model.clone()
            };
            let cv = cross_validate(prep, cfg, &mc, seed)?;
            let rhos: Vec<f64> = cv.folds.iter().map(|f| f.rho).collect();
            let eers: Vec<f64> = cv.folds.iter().map(|f| f.state_eer).collect();
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            let bs = stream::derive(seed, stream::BOOTSTRAP);
            Ok(SweepRow {
                bits,
                state_dim: dim,
                capacity_bits: budget::capacity_bits(dim, bits as u32)?,
                rho: cv.mean.rho,
                top1: cv.mean.state_top1,
                eer: cv.mean.state_eer,
                mi_bits: cv.mean.state_mi_bits,
                rho_ci: super::bootstrap_ci(&rhos, mean, cfg.bootstrap_resamples, 0.95, bs),
                eer_ci: super::bootstrap_ci(&eers, mean, cfg.bootstrap_resamples, 0.95, bs + 1),
            })
        })
        .collect()
}

/// Precision sweep at the default state dimension.
pub fn run_bitwidth_sweep(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    bits: &[u8],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let configs: Vec<(u8, usize)> = bits.iter().map(|&b| (b, cfg.model.state_dim)).collect();
    run_sweep(prep, cfg, &configs, seed)
}

/// Configurations holding state capacity at 128 bits.
pub const CAPACITY_MATCHED: [(u8, usize); 4] = [(16, 8), (8, 16), (4, 32), (2, 64)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalResult {
    pub rho_in_session: f64,
    pub rho_later_session: f64,
    pub relative_drop: f64,
    /// Fraction of held-out speakers whose session-1 profile needs re-onboarding at the later session.
    pub reonboard_rate: f64,
}

/// Heads trained on sessions `train_sessions` of the training speakers;
/// evaluated on held-out speakers, in those sessions and in `later`.
pub fn temporal_stability(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    train_sessions: &[u8],
    later: u8,
    seed: u64,
) -> Result<TemporalResult> {
    let folds = synth::speaker_independent_folds(
        &prep.corpus,
        cfg.folds,
        stream::derive(prep.seed, stream::FOLDS),
    )?;
    let (train, test) = folds.split(&prep.corpus, 0);
    let sess = |i: &usize| prep.corpus.samples[*i].session;
    let train: Vec<usize> = train
        .into_iter()
        .filter(|i| train_sessions.contains(&sess(i)))
        .collect();
    let in_sess: Vec<usize> = test
        .iter()
        .copied()
        .filter(|i| train_sessions.contains(&sess(i)))
        .collect();
    let late: Vec<usize> = test.iter().copied().filter(|i| sess(i) == later).collect();
    if late.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no windows in session {later}"
        )));
    }
    let heads = train_heads(prep, &train, cfg, &cfg.model, seed)?;
    let a = embed_heldout(prep, &heads.model, &in_sess)?;
    let b = embed_heldout(prep, &heads.model, &late)?;
    let r_in = rho_or_zero(&a.predicted, &a.agitation)?;
    let r_late = rho_or_zero(&b.predicted, &b.agitation)?;

    // profiles from each speaker's first three in-session windows, checked against their later mean
    let mut decisions = Vec::new();
    let speakers: std::collections::BTreeSet<u32> = a.speakers.iter().copied().collect();
    for spk in speakers {
        let rows_a: Vec<usize> = (0..a.speakers.len())
            .filter(|&r| a.speakers[r] == spk)
            .take(3)
            .collect();
        let rows_b: Vec<usize> = (0..b.speakers.len())
            .filter(|&r| b.speakers[r] == spk)
            .collect();
        if rows_a.len() < 3 || rows_b.is_empty() {
            continue;
        }
        let views: Vec<_> = rows_a.iter().map(|&r| a.trait_emb.row(r)).collect();
        let profile = crate::model::onboard(&views, &[0.0; 3], 1.0, 0)?;
        let later_mean = b
            .trait_emb
            .select(Axis(0), &rows_b)
            .mean_axis(Axis(0))
            .expect("non-empty");
        decisions.push(
            crate::model::check_drift(&profile, later_mean.view())?
                == crate::model::DriftDecision::Reonboard,
        );
    }
    let reonboard_rate =
        decisions.iter().filter(|&&d| d).count() as f64 / decisions.len().max(1) as f64;
    let relative_drop = if r_in > 0.0 {
        (r_in - r_late) / r_in
    } else {
        f64::NAN
    };
    Ok(TemporalResult {
        rho_in_session: r_in,
        rho_later_session: r_late,
        relative_drop,
        reonboard_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRow {
    pub sigma: f64,
    pub rho: f64,
    /// Mean attack AUC over the attack seeds.
    pub mia_auc: f64,
    /// Trait Top-1 identification of held-out speakers under noise.
    pub top1: f64,
    pub eer: f64,
}

impl PrivacyRow {
    pub const CSV_HEADER: &'static str = "sigma,rho,mia_auc,top1,eer";
}

/// Trains one model on the first fold, then perturbs trait embeddings with
/// each `sigma`. Members are training windows, nonmembers held-out windows,
/// subsampled to equal counts. The attack halves split windows, so the same
/// speaker can appear on both sides; `speaker_disjoint` splits by speaker instead. One standard-normal draw per entry is shared
/// by every `sigma` so the grid differs only in scale.
pub fn privacy_tradeoff(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    sigmas: &[f64],
    mia: &MiaConfig,
    attack_seeds: usize,
    speaker_disjoint: bool,
    seed: u64,
) -> Result<Vec<PrivacyRow>> {
    if attack_seeds == 0 || sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(
            "need at least one attack seed and non-negative noise levels".into(),
        ));
    }
    let folds = synth::speaker_independent_folds(
        &prep.corpus,
        cfg.folds,
        stream::derive(prep.seed, stream::FOLDS),
    )?;
    let (train, test) = folds.split(&prep.corpus, 0);
    let heads = train_heads(prep, &train, cfg, &cfg.model, seed)?;
    let members = embed_heldout(prep, &heads.model, &train)?;
    let held = embed_heldout(prep, &heads.model, &test)?;
    let rho = rho_or_zero(&held.predicted, &held.agitation)?;

    let mut rng = ChaCha8Rng::seed_from_u64(stream::derive(seed, stream::PRIVACY));
    let n = members.trait_emb.nrows().min(held.trait_emb.nrows());
    let pick = |rows: usize, rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..rows)
            .collect::<Vec<_>>()
            .choose_multiple(rng, n)
            .copied()
            .collect();
        idx.sort_unstable();
        idx
    };
    let m_idx = pick(members.trait_emb.nrows(), &mut rng);
    let n_idx = pick(held.trait_emb.nrows(), &mut rng);
    let m_groups: Vec<u32> = m_idx.iter().map(|&i| members.speakers[i]).collect();
    let n_groups: Vec<u32> = n_idx.iter().map(|&i| held.speakers[i]).collect();
    let m_clean = members.trait_emb.select(Axis(0), &m_idx);
    let n_clean = held.trait_emb.select(Axis(0), &n_idx);
    let unit = |shape: (usize, usize), rng: &mut ChaCha8Rng| {
        crate::privacy::perturb_with(Array2::zeros(shape).view(), 1.0, rng)
    };
    let m_eps = unit(m_clean.dim(), &mut rng);
    let n_eps = unit(n_clean.dim(), &mut rng);
    let h_eps = unit(held.trait_emb.dim(), &mut rng);

    sigmas
        .iter()
        .map(|&sigma| {
            let m = &m_clean + &(&m_eps * sigma);
            let nm = &n_clean + &(&n_eps * sigma);
            let mut auc = 0.0;
            for k in 0..attack_seeds {
                let c = MiaConfig {
                    seed: stream::derive(mia.seed, k as u64 + 1),
                    ..*mia
                };
                auc += if speaker_disjoint {
                    crate::privacy::mia_evaluate_grouped(
                        m.view(),
                        &m_groups,
                        nm.view(),
                        &n_groups,
                        &c,
                    )?
                    .auc
                } else {
                    crate::privacy::mia_evaluate(m.view(), nm.view(), &c)?.auc
                };
            }
            let noisy = &held.trait_emb + &(&h_eps * sigma);
            let top1 =
                topk_identification(noisy.view(), &held.speakers, ENROLL_PER_SPEAKER, &[1])?[0];
            let eer =
                TrialList::all_vs_all(noisy.view(), &held.speakers, ENROLL_PER_SPEAKER)?.eer()?;
            Ok(PrivacyRow {
                sigma,
                rho,
                mia_auc: auc / attack_seeds as f64,
                top1,
                eer,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            corpus: SynthConfig {
                n_speakers: 12,
                sessions: 3,
                windows_per_session: 6,
                ..SynthConfig::default()
            },
            pretrain: PretrainConfig {
                n_speakers: 10,
                windows_per_session: 2,
                steps: 3,
                batch: 4,
                ..PretrainConfig::default()
            },
            model: ModelConfig {
                encoder: EncoderConfig {
                    base_width: 4,
                    conv_blocks: 2,
                    embedding_dim: 16,
                    ..EncoderConfig::default()
                },
                trait_dim: 8,
                state_dim: 4,
                agit_hidden: 8,
                recon_hidden: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: Some(2),
                batch_participants: 4,
                finetune_encoder: false,
                ..TrainConfig::default()
            },
            folds: 3,
            run_folds: Some(1),
            steps_per_epoch: Some(3),
            bootstrap_resamples: 50,
        }
    }

    #[test]
    fn sampler_structure() {
        let cfg = tiny();
        let corpus = synth::generate_corpus(&cfg.corpus, 1).unwrap();
        let pool: Vec<usize> = (0..corpus.samples.len()).collect();
        let s = BatchSampler::new(&corpus, &pool, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = s.sample(&mut rng);
        assert_eq!(b.len(), 16);
        for quad in b.chunks(4) {
            let c = |i: usize| &corpus.samples[quad[i]];
            assert!((0..4).all(|i| c(i).speaker_id == c(0).speaker_id));
            assert_eq!(c(0).session, c(1).session);
            assert_eq!(c(2).session, c(3).session);
            assert_ne!(c(0).session, c(2).session);
            assert_eq!(c(1).window_index, c(0).window_index + 1);
            assert_eq!(c(3).window_index, c(2).window_index + 1);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let cfg = tiny();
        let prep = prepare(&cfg, 3).unwrap();
        assert_eq!(prep.hidden.nrows(), 12 * 3 * 6);
        let a = run_bitwidth_sweep(&prep, &cfg, &[4, 16], 1).unwrap();
        let b = run_bitwidth_sweep(&prepare(&cfg, 3).unwrap(), &cfg, &[4, 16], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.iter().map(|r| r.capacity_bits).collect::<Vec<_>>(),
            vec![16, 64]
        );
        let t = temporal_stability(&prep, &cfg, &[1, 2], 3, 0).unwrap();
        let mia = MiaConfig {
            hidden: 8,
            epochs: 2,
            ..MiaConfig::default()
        };
        let rows = privacy_tradeoff(&prep, &cfg, &[0.0, 1.0], &mia, 1, true, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rho, rows[1].rho);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mia_auc)));
        assert!((0.0..=1.0).contains(&t.reonboard_rate));
    }

    #[test]
    fn stream_seeds_differ() {
        let s: std::collections::BTreeSet<u64> = (1..=8).map(|k| stream::derive(42, k)).collect();
        assert_eq!(s.len(), 8);
    }
}
