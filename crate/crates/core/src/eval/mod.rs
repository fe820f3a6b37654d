//! Identity-leakage metrics: closed-set identification, verification EER,
//! k-NN mutual information and ROC AUC.

pub mod budget;
pub mod experiment;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use budget::{
    capacity_bits, energy_report, model_size_report, EnergyParams, EnergyReport, SizeReport,
};
pub use stats::{bootstrap_ci, pearson, spearman_rho, wilcoxon_paired};

pub const ENROLL_PER_SPEAKER: usize = 3;
pub const KNN_K: usize = 3;
const MI_JITTER_SEED: u64 = 0x6d69;

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Enrollment centroids plus the probe rows left for scoring.
#[derive(Debug, Clone)]
pub struct Enrollment {
    pub speakers: Vec<u32>,
    pub centroids: Array2<f64>,
    /// `(row in the embedding matrix, index into speakers)`.
    pub probes: Vec<(usize, usize)>,
}

/// The first `n_enroll` rows of each speaker (in input order) are averaged
/// into a centroid; the rest become probes. Speakers without at least one
/// probe are dropped.
pub fn enroll(embs: ArrayView2<'_, f64>, labels: &[u32], n_enroll: usize) -> Result<Enrollment> {
    if embs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings, {} labels",
            embs.nrows(),
            labels.len()
        )));
    }
    let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        rows.entry(l).or_default().push(i);
    }
    let mut speakers = Vec::new();
    let mut cents = Vec::new();
    let mut probes = Vec::new();
    for (spk, idx) in rows {
        if idx.len() <= n_enroll {
            log::warn!("speaker {spk} has {} utterances; excluded", idx.len());
            continue;
        }
        let k = speakers.len();
        speakers.push(spk);
        let c = embs
            .select(Axis(0), &idx[..n_enroll])
            .mean_axis(Axis(0))
            .expect("n_enroll > 0");
        cents.push(c);
        probes.extend(idx[n_enroll..].iter().map(|&r| (r, k)));
    }
    if speakers.len() < 2 {
        return Err(Error::InvalidArgument(
            "fewer than 2 speakers with enough utterances".into(),
        ));
    }
    let views: Vec<_> = cents.iter().map(|c| c.view()).collect();
    let centroids = ndarray::stack(Axis(0), &views).expect("equal dims");
    Ok(Enrollment {
        speakers,
        centroids,
        probes,
    })
}

fn probe_scores(e: &Enrollment, embs: ArrayView2<'_, f64>, row: usize) -> Vec<f64> {
    e.centroids
        .rows()
        .into_iter()
        .map(|c| cosine(embs.row(row), c))
        .collect()
}

/// Top-k identification accuracy for each `k`. Ties with the true speaker
/// are broken uniformly at random in expectation, so a constant embedding
/// scores chance rather than a perfect hit.
pub fn topk_identification(
    embs: ArrayView2<'_, f64>,
    labels: &[u32],
    n_enroll: usize,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let e = enroll(embs, labels, n_enroll)?;
    let mut hits = vec![0.0; ks.len()];
    for &(row, truth) in &e.probes {
        let scores = probe_scores(&e, embs, row);
        let t = scores[truth];
        let greater = scores.iter().filter(|&&s| s > t).count() as f64;
        let ties = scores.iter().filter(|&&s| s == t).count() as f64 - 1.0;
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += ((k as f64 - greater) / (ties + 1.0)).clamp(0.0, 1.0);
        }
    }
    let n = e.probes.len() as f64;
    Ok(hits.into_iter().map(|h| h / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub probe: usize,
    pub claimed: u32,
    pub target: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// Every probe against every enrolled centroid: probes × speakers
    /// trials, of which one per probe is a target trial.
    pub fn all_vs_all(embs: ArrayView2<'_, f64>, labels: &[u32], n_enroll: usize) -> Result<Self> {
        let e = enroll(embs, labels, n_enroll)?;
        let mut trials = Vec::with_capacity(e.probes.len() * e.speakers.len());
        for &(row, truth) in &e.probes {
            for (k, score) in probe_scores(&e, embs, row).into_iter().enumerate() {
                trials.push(Trial {
                    probe: row,
                    claimed: e.speakers[k],
                    target: k == truth,
                    score,
                });
            }
        }
        Ok(Self { trials })
    }

    pub fn from_scores(scores: &[(f64, bool)]) -> Self {
        let trials = scores
            .iter()
            .enumerate()
            .map(|(i, &(score, target))| Trial {
                probe: i,
                claimed: 0,
                target,
                score,
            })
            .collect();
        Self { trials }
    }

    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    /// One line per trial: `probe_id claimed_spk target|nontarget score`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let kind = if t.target { "target" } else { "nontarget" };
            writeln!(s, "{} {} {} {:.6}", t.probe, t.claimed, kind, t.score).expect("string write");
        }
        s
    }

    pub fn eer(&self) -> Result<f64> {
        let pairs: Vec<(f64, bool)> = self.trials.iter().map(|t| (t.score, t.target)).collect();
        compute_eer(&pairs)
    }
}

/// Equal error rate with acceptance at `score >= threshold`. Thresholds run
/// over the distinct scores plus +inf; the FAR/FRR crossing is linearly
/// interpolated between the two bracketing thresholds.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<f64> {
    let n_t = scores.iter().filter(|s| s.1).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::DegenerateTrials);
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::InvalidArgument("non-finite trial score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // at threshold sorted[i].0: everything before i is rejected
    let mut points = Vec::with_capacity(sorted.len() + 1);
    let (mut rej_t, mut rej_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        points.push((rej_n as f64, rej_t as f64));
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                rej_t += 1;
            } else {
                rej_n += 1;
            }
            i += 1;
        }
    }
    points.push((rej_n as f64, rej_t as f64));
    let rates: Vec<(f64, f64)> = points
        .iter()
        .map(|&(rn, rt)| (1.0 - rn / n_n as f64, rt / n_t as f64))
        .collect();
    for w in rates.windows(2) {
        let (far0, frr0) = w[0];
        let (far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return Ok(far0);
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let a = d0 / (d0 - d1);
            return Ok(far0 + a * (far1 - far0));
        }
    }
    unreachable!("FAR - FRR goes from 1 to -1")
}

/// Area under the ROC curve (probability a positive outranks a negative,
/// ties counted half).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let ranks = stats::average_ranks(scores);
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateTrials);
    }
    let sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Mutual information (bits) between continuous vectors and discrete labels
/// by the nearest-neighbour estimator for mixed pairs: for each point the
/// distance to its k-th neighbour within its class sets a radius, and `m` counts
/// all points inside it. The label entropy term uses the Miller–Madow
/// corrected plug-in estimate, which matches the digamma form
/// ψ(N) − ⟨ψ(N_x)⟩ to first order. Classes with ≤ k samples are excluded.
/// Quantized inputs repeat values exactly, so every coordinate gets a fixed,
/// seeded jitter of 1e-10 times its scale to break distance ties.
pub fn knn_mi(embs: ArrayView2<'_, f64>, labels: &[u32], k: usize) -> Result<f64> {
    if embs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings, {} labels",
            embs.nrows(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let keep: Vec<usize> = (0..labels.len())
        .filter(|&i| counts[&labels[i]] > k)
        .collect();
    let dropped = counts.values().filter(|&&c| c <= k).count();
    if dropped > 0 {
        log::warn!("{dropped} classes with <= {k} samples excluded from MI estimate");
    }
    let n = keep.len();
    let classes: Vec<usize> = counts.values().copied().filter(|&c| c > k).collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 classes with more than k samples".into(),
        ));
    }
    let mut x = embs.select(Axis(0), &keep);
    let mut jitter = ChaCha8Rng::seed_from_u64(MI_JITTER_SEED);
    let scale = x
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    x.mapv_inplace(|v| v + 1e-10 * scale * jitter.random_range(-1.0..1.0));
    let lab: Vec<u32> = keep.iter().map(|&i| labels[i]).collect();
    let sq: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = x.dot(&x.t());

    let mut psi_m = 0.0;
    let mut dists = vec![0.0; n];
    let mut same = Vec::with_capacity(n);
    for i in 0..n {
        same.clear();
        for j in 0..n {
            dists[j] = (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0).sqrt();
            if j != i && lab[j] == lab[i] {
                same.push(dists[j]);
            }
        }
        same.select_nth_unstable_by(k - 1, f64::total_cmp);
        let radius = same[k - 1];
        let m = (0..n).filter(|&j| j != i && dists[j] <= radius).count();
        psi_m += stats::digamma(m as f64);
    }
    let nf = n as f64;
    let h_plugin: f64 = -classes
        .iter()
        .map(|&c| c as f64 / nf * (c as f64 / nf).ln())
        .sum::<f64>();
    let h_mm = h_plugin + (classes.len() as f64 - 1.0) / (2.0 * nf);
    let nats = h_mm + stats::digamma(k as f64) - psi_m / nf;
    Ok(nats / std::f64::consts::LN_2)
}

/// [`knn_mi`] on quantized embeddings with grid spacing `step`: each value is
/// spread uniformly over its quantization cell (seeded) before estimating,
/// which removes the exact ties the neighbour counts cannot handle.
pub fn knn_mi_dithered(
    embs: ArrayView2<'_, f64>,
    labels: &[u32],
    k: usize,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "quantization step must be positive, got {step}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(MI_JITTER_SEED + 1);
    let x = embs.mapv(|v| v + step * rng.random_range(-0.5..0.5));
    knn_mi(x.view(), labels, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub top1: f64,
    pub top5: f64,
    pub eer: f64,
    pub mi_bits: f64,
    pub mia_auc: Option<f64>,
    pub top1_ci: Ci,
    pub eer_ci: Ci,
    pub n_trials: usize,
}

/// Identification, verification and MI leakage of one embedding set, with
/// speaker-level percentile bootstrap intervals. `quant_step` is the grid
/// spacing of quantized embeddings, used to dither them for the MI estimate.
pub fn leakage_report(
    embs: ArrayView2<'_, f64>,
    labels: &[u32],
    quant_step: Option<f64>,
    resamples: usize,
    seed: u64,
) -> Result<LeakageReport> {
    let acc = topk_identification(embs, labels, ENROLL_PER_SPEAKER, &[1, 5])?;
    let trials = TrialList::all_vs_all(embs, labels, ENROLL_PER_SPEAKER)?;
    let eer = trials.eer()?;
    let mi_bits = match quant_step {
        Some(step) => knn_mi_dithered(embs, labels, KNN_K, step)?,
        None => knn_mi(embs, labels, KNN_K)?,
    };

    // per-probe top-1 hits and per-probe trial groups, resampled by probe
    let e = enroll(embs, labels, ENROLL_PER_SPEAKER)?;
    let per_probe: Vec<(f64, Vec<(f64, bool)>)> = e
        .probes
        .iter()
        .map(|&(row, truth)| {
            let s = probe_scores(&e, embs, row);
            let t = s[truth];
            let greater = s.iter().filter(|&&v| v > t).count() as f64;
            let ties = s.iter().filter(|&&v| v == t).count() as f64 - 1.0;
            let hit = ((1.0 - greater) / (ties + 1.0)).clamp(0.0, 1.0);
            (
                hit,
                s.iter()
                    .enumerate()
                    .map(|(k, &v)| (v, k == truth))
                    .collect(),
            )
        })
        .collect();
    let top1_ci = stats::bootstrap_ci(
        &per_probe,
        |xs| xs.iter().map(|p| p.0).sum::<f64>() / xs.len() as f64,
        resamples,
        0.95,
        seed,
    );
    let eer_ci = stats::bootstrap_ci(
        &per_probe,
        |xs| {
            let all: Vec<(f64, bool)> = xs.iter().flat_map(|p| p.1.iter().copied()).collect();
            compute_eer(&all).unwrap_or(0.5)
        },
        resamples,
        0.95,
        seed ^ 0x5eed,
    );
    Ok(LeakageReport {
        top1: acc[0],
        top5: acc[1],
        eer,
        mi_bits,
        mia_auc: None,
        top1_ci: Ci {
            lo: top1_ci.0,
            hi: top1_ci.1,
        },
        eer_ci: Ci {
            lo: eer_ci.0,
            hi: eer_ci.1,
        },
        n_trials: trials.trials.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn one_hot_identifies_perfectly() {
        let labels: Vec<u32> = (0..10).flat_map(|s| [s; 5]).collect();
        let embs = Array2::from_shape_fn(
            (50, 10),
            |(i, j)| if labels[i] as usize == j { 1.0 } else { 0.0 },
        );
        let acc = topk_identification(embs.view(), &labels, 3, &[1, 5]).unwrap();
        assert_eq!(acc, vec![1.0, 1.0]);
        assert_eq!(
            TrialList::all_vs_all(embs.view(), &labels, 3)
                .unwrap()
                .eer()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn constant_embeddings_score_chance() {
        let labels: Vec<u32> = (0..20).flat_map(|s| [s; 4]).collect();
        let embs = Array2::zeros((80, 4));
        let acc = topk_identification(embs.view(), &labels, 3, &[1, 5]).unwrap();
        assert!((acc[0] - 1.0 / 20.0).abs() < 1e-12);
        assert!((acc[1] - 5.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn random_embeddings_are_at_chance() {
        let labels: Vec<u32> = (0..120).flat_map(|s| [s; 4]).collect();
        let mut top1 = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let embs = gaussian(&mut rng, labels.len(), 16);
            let acc = topk_identification(embs.view(), &labels, 3, &[1, 5]).unwrap();
            assert!(acc[1] >= acc[0]);
            top1 += acc[0] / 10.0;
            let t = TrialList::all_vs_all(embs.view(), &labels, 3).unwrap();
            assert_eq!(t.trials.len(), 120 * 120);
            assert_eq!(t.n_target(), 120);
            let eer = t.eer().unwrap();
            assert!((eer - 0.5).abs() <= 0.1, "{eer}");
        }
        assert!((top1 - 1.0 / 120.0).abs() <= 0.01, "{top1}");
    }

    /// Independent oracle: scan every candidate threshold and return the
    /// midpoint of FAR and FRR where they are closest.
    fn eer_scan(scores: &[(f64, bool)]) -> f64 {
        let nt = scores.iter().filter(|s| s.1).count() as f64;
        let nn = scores.len() as f64 - nt;
        let mut th: Vec<f64> = scores.iter().map(|s| s.0).collect();
        th.push(f64::INFINITY);
        th.iter()
            .map(|&t| {
                let frr = scores.iter().filter(|s| s.1 && s.0 < t).count() as f64 / nt;
                let far = scores.iter().filter(|s| !s.1 && s.0 >= t).count() as f64 / nn;
                ((far - frr).abs(), (far + frr) / 2.0)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1
    }

    #[test]
    fn eer_hand_built_and_degenerate() {
        let s = [(0.9, true), (0.2, true), (0.8, false), (0.1, false)];
        assert_eq!(compute_eer(&s).unwrap(), 0.5);
        assert_eq!(eer_scan(&s), 0.5);
        assert_eq!(compute_eer(&[(0.9, true), (0.1, false)]).unwrap(), 0.0);
        assert!(matches!(
            compute_eer(&[(0.9, true), (0.3, true)]),
            Err(Error::DegenerateTrials)
        ));
    }

    #[test]
    fn eer_null_distribution() {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<(f64, bool)> = (0..2000)
                .map(|i| (rng.random::<f64>(), i % 2 == 0))
                .collect();
            let e = compute_eer(&s).unwrap();
            assert!((e - eer_scan(&s)).abs() < 2e-3);
            total += e / 10.0;
        }
        assert!((total - 0.5).abs() <= 0.03, "{total}");
    }

    #[test]
    fn trial_text_format() {
        let t = TrialList {
            trials: vec![Trial {
                probe: 3,
                claimed: 7,
                target: false,
                score: 0.25,
            }],
        };
        assert_eq!(t.to_text(), "3 7 nontarget 0.250000\n");
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap(),
            0.5
        );
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
    }

    fn clusters(rng: &mut ChaCha8Rng, c: usize, per: usize, d: usize) -> (Array2<f64>, Vec<u32>) {
        let centers = gaussian(rng, c, d) * 50.0;
        let labels: Vec<u32> = (0..c as u32).flat_map(|l| vec![l; per]).collect();
        let x = Array2::from_shape_fn((c * per, d), |(i, j)| {
            centers[[labels[i] as usize, j]] + rng.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    }

    #[test]
    fn mi_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for c in [2usize, 4, 8] {
            let (x, l) = clusters(&mut rng, c, 60, 4);
            let mi = knn_mi(x.view(), &l, 3).unwrap();
            let truth = (c as f64).log2();
            assert!((mi - truth).abs() <= 0.1 * truth, "C={c}: {mi}");
        }
    }

    #[test]
    fn mi_independent_labels() {
        let mut mean = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, 960, 8);
            let l: Vec<u32> = (0..960).map(|_| rng.random_range(0..8)).collect();
            let mi = knn_mi(x.view(), &l, 3).unwrap();
            assert!(mi.abs() <= 0.1, "seed {seed}: {mi}");
            mean += mi / 5.0;
        }
        assert!(mean.abs() <= 0.05, "{mean}");
    }

    #[test]
    fn dithered_mi_on_quantized_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // coarse grid: most rows repeat exactly
        let x = gaussian(&mut rng, 960, 8).mapv(|v| (v * 0.7).round() * 0.5);
        let l: Vec<u32> = (0..960).map(|_| rng.random_range(0..8)).collect();
        let mi = knn_mi_dithered(x.view(), &l, 3, 0.5).unwrap();
        assert!(mi.abs() <= 0.1, "{mi}");
        let (c, l) = clusters(&mut rng, 4, 60, 4);
        let c = c.mapv(|v| (v / 4.0).round() * 4.0);
        let mi = knn_mi_dithered(c.view(), &l, 3, 4.0).unwrap();
        assert!((mi - 2.0).abs() <= 0.2, "{mi}");
        assert!(knn_mi_dithered(c.view(), &l, 3, 0.0).is_err());
    }

    #[test]
    fn mi_duplication_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, l) = clusters(&mut rng, 4, 30, 3);
        let x = x.mapv(|v| v / 20.0);
        let a = knn_mi(x.view(), &l, 3).unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let l2: Vec<u32> = l.iter().chain(&l).copied().collect();
        let b = knn_mi(x2.view(), &l2, 3).unwrap();
        assert!((a - b).abs() < 0.1, "{a} vs {b}");
    }

    #[test]
    fn leakage_report_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, l) = clusters(&mut rng, 8, 6, 4);
        let r = leakage_report(x.view(), &l, None, 200, 1).unwrap();
        assert!(r.top1 <= r.top5);
        assert!(r.top1_ci.lo <= r.top1 && r.top1 <= r.top1_ci.hi);
        assert!(r.eer_ci.lo <= r.eer + 1e-12 && r.eer <= r.eer_ci.hi + 1e-12);
        assert_eq!(r.n_trials, 8 * 3 * 8);
    }
}
