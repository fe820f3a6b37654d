//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p mpib --test acceptance -- 1 4 11` (`dps` adds the
//! supplementary trigger-rate check, which never affects the exit status).

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mpib::adapt::{dps_timing_model, estimate_uncertainty, DpsConfig, DpsScheduler, DpsStageCosts};
use mpib::eval::budget::{
    capacity_bits, energy_report, model_size_report, EnergyParams, SizeComponent,
};
use mpib::eval::experiment::{
    prepare, privacy_tradeoff, run_sweep, stream, temporal_stability, train_heads,
    ExperimentConfig, Prepared, SweepRow,
};
use mpib::eval::{
    bootstrap_ci, knn_mi, spearman_rho, topk_identification, wilcoxon_paired, TrialList,
    ENROLL_PER_SPEAKER, KNN_K,
};
use mpib::kernels::{gemv_int4_accumulate, gemv_int4_packed};
use mpib::losses::{self, BatchEmbeddings};
use mpib::model::{
    patch_means, BatchInput, EncoderConfig, Model, ModelConfig, TrainBatch, TrainConfig,
};
use mpib::nn::{HasParams, Param};
use mpib::privacy::MiaConfig;
use mpib::quant::{
    self, calibrate_scales, quantize_ste, ste_backward, PackedInt4Matrix, QuantScheme,
};
use mpib::synth;

const MINUTE: Duration = Duration::from_secs(60);

// tolerances
const KERNEL_REL_TOL: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;
const FD_SEEDS: u64 = 20;
const OPL_DUP_TOL: f64 = 1e-9;
const C7_TOP1_RATIO: f64 = 0.5;
const C7_EER_MARGIN: f64 = 0.05;
const C7_RHO_MIN: f64 = 0.5;
const C8_SEEDS: [u64; 3] = [1, 2, 3];
const C8_RUN_FOLDS: usize = 3;
/// Slack on the monotone checks of the privacy grid: at chance level the
/// identification rate moves by a few probes between noise draws.
const C9_MONOTONE_SLACK: f64 = 0.01;
const C9_MIA_BAND: (f64, f64) = (0.45, 0.60);
const C10_EER_TOL: f64 = 0.03;
const C10_TOP1_TOL: f64 = 0.01;
const C10_MI_INDEPENDENT_MAX: f64 = 0.05;
const C10_MI_CLUSTER_REL: f64 = 0.10;
const C10_MI_SAMPLES: usize = 3000;
const C13_MAX_DROP: f64 = 0.30;
const EXPERIMENT_SEED: u64 = 1;
const SUPP_TRIGGER_BAND: (f64, f64) = (0.08, 0.16);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / na.max(nb).max(1e-12)
}

/// Central-difference gradient of a scalar function of a matrix.
fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + FD_STEP;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - FD_STEP;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * FD_STEP);
    }
    g
}

fn c1_capacity() -> Outcome {
    let state = capacity_bits(32, 4).unwrap();
    let trait_ = capacity_bits(64, 16).unwrap();
    let ratio = trait_ as f64 / state as f64;
    outcome(
        state == 128 && trait_ == 1024 && ratio == 8.0,
        format!("state {state} bits, trait {trait_} bits, ratio {ratio}x"),
    )
}

fn c2_packed_size() -> Outcome {
    let m = Model::new(ModelConfig::default(), 0).unwrap();
    let packed = m
        .state_head
        .packed()
        .unwrap()
        .expect("4-bit state head packs");
    let (rows, cols) = (packed.rows, packed.cols);
    let params = rows * cols;
    let mut buf = Vec::new();
    packed.write_to(&mut buf).unwrap();
    let back = PackedInt4Matrix::read_from(buf.as_slice()).unwrap();
    let with_bias = model_size_report(&[SizeComponent {
        name: "state".into(),
        params: params + rows,
        bits: 4,
        reference_kb: Some(2.1),
    }]);
    let pass = (rows, cols) == (32, 128)
        && packed.payload_bytes() == params / 2
        && packed.payload_bytes() == 2048
        && back == packed
        && with_bias.rows[0].bytes == 2064;
    outcome(
        pass,
        format!(
            "{rows}x{cols}: payload {} bytes (params/2 = {}), with biases {} bytes",
            packed.payload_bytes(),
            params / 2,
            with_bias.rows[0].bytes
        ),
    )
}

fn c3_kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut exact, mut worst) = (0usize, 0.0f64);
    let cases = 1200;
    for _ in 0..cases {
        let rows = rng.random_range(1..=70);
        let cols = rng.random_range(1..=150);
        let codes = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-8i8..=7));
        let x: Vec<i8> = (0..cols)
            .map(|_| rng.random_range(-128i16..=127) as i8)
            .collect();
        let scales: Vec<f64> = (0..rows).map(|_| rng.random_range(1e-3..1.0)).collect();
        let scheme = QuantScheme::new(4, scales.clone()).unwrap();
        let packed = PackedInt4Matrix::from_quantized(&quant::QuantizedTensor {
            codes: codes.clone(),
            scheme,
        })
        .unwrap();
        let acc = gemv_int4_accumulate(&packed.blocks, rows, cols, &x).unwrap();
        // oracle: the unpacked codes times the activations in i32
        let oracle: Vec<i32> = (0..rows)
            .map(|r| (0..cols).map(|c| codes[[r, c]] as i32 * x[c] as i32).sum())
            .collect();
        if acc == oracle {
            exact += 1;
        }
        let x_scale = rng.random_range(1e-3f32..0.1);
        let out = gemv_int4_packed(&packed, &x, x_scale).unwrap();
        let float: Vec<f64> = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| {
                        codes[[r, c]] as f64
                            * packed.scales[r] as f64
                            * x[c] as f64
                            * x_scale as f64
                    })
                    .sum()
            })
            .collect();
        for (o, f) in out.iter().zip(&float) {
            let denom = f.abs().max(1e-12);
            if f.abs() > 1e-6 {
                worst = worst.max((*o as f64 - f).abs() / denom);
            }
        }
    }
    outcome(
        exact == cases && worst <= KERNEL_REL_TOL,
        format!("{exact}/{cases} shapes bit-exact; worst dequantized relative error {worst:.2e}"),
    )
}

fn c4_quantizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ratio = 0.0f64;
    let mut max_distinct_ok = true;
    let mut report = Vec::new();
    for bits in [2u8, 3, 4, 5, 6, 8] {
        let w = gaussian(&mut rng, 16, 2000) * rng.random_range(0.1..3.0);
        let scheme = calibrate_scales(w.view(), bits).unwrap();
        let (_, deq) = quantize_ste(w.view(), &scheme).unwrap();
        let (lo, hi) = (scheme.clip_lo() as f64, scheme.clip_hi() as f64);
        for r in 0..w.nrows() {
            let s = scheme.scale(r);
            for (x, d) in w.row(r).iter().zip(deq.row(r)) {
                if (lo..=hi).contains(&(x / s)) {
                    worst_ratio = worst_ratio.max((x - d).abs() / (s / 2.0));
                }
            }
            let mut distinct: Vec<u64> = deq.row(r).iter().map(|v| v.to_bits()).collect();
            distinct.sort_unstable();
            distinct.dedup();
            max_distinct_ok &= distinct.len() <= 1 << bits;
        }
        // dense sweep over the representable range, one scale
        let s = 0.37;
        let single = QuantScheme::per_tensor(bits, s).unwrap();
        let grid = Array2::from_shape_fn((1, 20_001), |(_, i)| {
            lo * s + (hi - lo) * s * i as f64 / 20_000.0
        });
        let (_, dg) = quantize_ste(grid.view(), &single).unwrap();
        let sweep_worst = grid
            .iter()
            .zip(dg.iter())
            .map(|(x, d)| (x - d).abs() / (s / 2.0))
            .fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(sweep_worst);
        report.push(format!("b{bits}"));
    }
    // rounding ties land exactly on s/2; allow one ulp-scale of slack
    let pass = worst_ratio <= 1.0 + 1e-9 && max_distinct_ok;
    outcome(pass, format!("max |w - deq| = {worst_ratio:.9} x s/2; distinct levels within 2^b: {max_distinct_ok} ({})", report.join(",")))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            base_width: 2,
            conv_blocks: 2,
            embedding_dim: 12,
            ..EncoderConfig::default()
        },
        trait_dim: 6,
        state_dim: 4,
        state_bits: 16,
        agit_hidden: 5,
        recon_hidden: 4,
        ..ModelConfig::default()
    }
}

fn model_params(m: &mut Model) -> Vec<&mut Param> {
    let mut v = m.encoder.params_mut();
    v.extend(m.trait_head.linear.params_mut());
    v.extend(m.state_head.linear.params_mut());
    v.extend(m.agitation.params_mut());
    v.extend(m.recon.l1.params_mut());
    v.extend(m.recon.l2.params_mut());
    v
}

fn tiny_batch(rng: &mut ChaCha8Rng) -> TrainBatch {
    let x = Array3::from_shape_fn((4, 96, 64), |_| rng.random_range(-1.0..1.0));
    TrainBatch {
        recon_target: patch_means(x.view()).unwrap(),
        input: BatchInput::Windows(x),
        participants: vec![0, 0, 1, 1],
        sessions: vec![1, 2, 1, 1],
        window_index: vec![0, 0, 3, 4],
        agitation: (0..4).map(|_| rng.random_range(0.0..4.0)).collect(),
    }
}

/// Worst relative error over every parameter tensor of the float model,
/// sampling a few entries of each.
fn model_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = tiny_batch(&mut rng);
    let mut m = Model::new(tiny_model_config(), seed).unwrap();
    let tcfg = TrainConfig {
        temperature: 0.5,
        finetune_encoder: true,
        ..TrainConfig::default()
    };
    let loss = |m: &mut Model| {
        m.forward_backward(&batch, &tcfg, &mut ChaCha8Rng::seed_from_u64(seed + 100))
            .unwrap()
            .total
    };
    for p in model_params(&mut m) {
        p.zero_grad();
    }
    loss(&mut m);
    let n = model_params(&mut m).len();
    let mut worst = 0.0f64;
    for k in 0..n {
        let (grad, len) = {
            let p = &model_params(&mut m)[k];
            (p.grad.clone(), p.len())
        };
        let idx: Vec<usize> = (0..len.min(5)).map(|_| rng.random_range(0..len)).collect();
        let analytic: Vec<f64> = idx.iter().map(|&i| grad.as_slice().unwrap()[i]).collect();
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let eval = |d: f64| {
                    let mut probe = m.clone();
                    model_params(&mut probe)[k].value.as_slice_mut().unwrap()[i] += d;
                    loss(&mut probe)
                };
                (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
            })
            .collect();
        if analytic.iter().chain(&numeric).any(|v| v.abs() > 1e-9) {
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    worst
}

/// Worst relative error over the standalone loss gradients.
fn losses_fd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zt, zs) = (gaussian(&mut rng, 8, 5), gaussian(&mut rng, 8, 3));
    let participants = [0, 0, 1, 1, 2, 2, 3, 3];
    let sessions = [1, 2, 1, 2, 1, 1, 2, 3];
    let mut errs = Vec::new();

    let (_, gt, gs) = losses::opl_grad(zt.view(), zs.view()).unwrap();
    errs.push(rel_err(
        gt.as_slice().unwrap(),
        numeric_grad(&zt, |z| losses::opl_grad(z.view(), zs.view()).unwrap().0)
            .as_slice()
            .unwrap(),
    ));
    errs.push(rel_err(
        gs.as_slice().unwrap(),
        numeric_grad(&zs, |z| losses::opl_grad(zt.view(), z.view()).unwrap().0)
            .as_slice()
            .unwrap(),
    ));

    let (_, g) = losses::stability_loss_grad(zt.view(), &participants, &sessions, 0.3).unwrap();
    let num = numeric_grad(&zt, |z| {
        losses::stability_loss(z.view(), &participants, &sessions, 0.3).unwrap()
    });
    errs.push(rel_err(g.as_slice().unwrap(), num.as_slice().unwrap()));

    let pairs = [(0, 1), (2, 3), (4, 5), (5, 6)];
    let (_, g) = losses::smoothness_pairs_grad(zs.view(), &pairs);
    let num = numeric_grad(&zs, |z| {
        pairs
            .iter()
            .map(|&(p, c)| losses::smoothness_loss(z.row(p), z.row(c)))
            .sum::<f64>()
            / pairs.len() as f64
    });
    errs.push(rel_err(g.as_slice().unwrap(), num.as_slice().unwrap()));

    let target = gaussian(&mut rng, 8, 3);
    let (_, g) = losses::mse_grad(zs.view(), target.view()).unwrap();
    let num = numeric_grad(&zs, |z| losses::mse_loss(z.view(), target.view()).unwrap());
    errs.push(rel_err(g.as_slice().unwrap(), num.as_slice().unwrap()));
    errs.into_iter().fold(0.0, f64::max)
}

fn ste_matches_mask(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian(&mut rng, 6, 40);
    let scheme = calibrate_scales(w.view(), 4).unwrap();
    // widen the inputs so that some saturate
    let w = w * 1.6;
    let up = gaussian(&mut rng, 6, 40);
    let g = ste_backward(up.view(), w.view(), &scheme).unwrap();
    let (lo, hi) = (scheme.clip_lo() as f64, scheme.clip_hi() as f64);
    let mut saturated = 0;
    let ok = (0..6).all(|r| {
        (0..40).all(|c| {
            let t = w[[r, c]] / scheme.scale(r);
            let inside = t >= lo && t <= hi;
            saturated += usize::from(!inside);
            g[[r, c]] == if inside { up[[r, c]] } else { 0.0 }
        })
    });
    ok && saturated > 0
}

fn c5_gradients() -> Outcome {
    let model_worst = (0..FD_SEEDS).map(model_fd).fold(0.0, f64::max);
    let loss_worst = (0..FD_SEEDS).map(losses_fd).fold(0.0, f64::max);
    let ste = (0..FD_SEEDS).all(ste_matches_mask);
    outcome(
        model_worst <= FD_REL_TOL && loss_worst <= FD_REL_TOL && ste,
        format!("{FD_SEEDS} seeds: full float model worst rel err {model_worst:.2e}, losses {loss_worst:.2e}, STE mask exact: {ste}"),
    )
}

fn c6_opl() -> Outcome {
    // rows of an 8x8 Hadamard matrix are orthogonal; all but the first are centered
    let h = Array2::from_shape_fn((8, 8), |(i, j)| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    });
    let zt = h.slice(s![1..4, ..]).t().to_owned();
    let codes = h.slice(s![4..7, ..]).t().mapv(|v| v as i8);
    let ortho = BatchEmbeddings {
        trait_emb: zt,
        state_codes: codes,
        scale: 0.25,
        participant_ids: vec![0; 8],
        timestamps: vec![0.0; 8],
    };
    let zero = losses::opl_loss(&ortho).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = rng.random_range(2..12);
        let batch = BatchEmbeddings {
            trait_emb: gaussian(&mut rng, b, 5),
            state_codes: Array2::from_shape_fn((b, 4), |_| rng.random_range(-8i8..=7)),
            scale: rng.random_range(0.01..1.0),
            participant_ids: vec![0; b],
            timestamps: vec![0.0; b],
        };
        let dup = BatchEmbeddings {
            trait_emb: concatenate(Axis(0), &[batch.trait_emb.view(), batch.trait_emb.view()])
                .unwrap(),
            state_codes: concatenate(
                Axis(0),
                &[batch.state_codes.view(), batch.state_codes.view()],
            )
            .unwrap(),
            participant_ids: vec![0; 2 * b],
            timestamps: vec![0.0; 2 * b],
            ..batch.clone()
        };
        let (a, d) = (
            losses::opl_loss(&batch).unwrap(),
            losses::opl_loss(&dup).unwrap(),
        );
        worst = worst.max((a - d).abs() / a.abs().max(1e-12));
    }
    outcome(
        zero.abs() < 1e-12 && worst <= OPL_DUP_TOL,
        format!("orthogonal value {zero:.1e}; duplication relative change {worst:.1e}"),
    )
}

fn default_experiment() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn row<'a>(rows: &'a [SweepRow], bits: u8, dim: usize) -> &'a SweepRow {
    rows.iter()
        .find(|r| r.bits == bits && r.state_dim == dim)
        .expect("configuration was run")
}

fn c7_disentanglement() -> Outcome {
    let cfg = default_experiment();
    let prep = prepare(&cfg, EXPERIMENT_SEED).unwrap();
    let rows = run_sweep(&prep, &cfg, &[(4, 32), (16, 8)], EXPERIMENT_SEED).unwrap();
    let (q, base) = (row(&rows, 4, 32), row(&rows, 16, 8));
    let a = q.top1 <= C7_TOP1_RATIO * base.top1;
    let b = q.eer >= base.eer + C7_EER_MARGIN;
    let c = q.rho >= C7_RHO_MIN && q.rho >= base.rho;
    outcome(
        a && b && c,
        format!(
            "INT4x32 top1 {:.3} eer {:.3} rho {:.3} | FP16x8 top1 {:.3} eer {:.3} rho {:.3} | (a) {a} (b) {b} (c) {c}",
            q.top1, q.eer, q.rho, base.top1, base.eer, base.rho
        ),
    )
}

fn c8_bit_sweep() -> Outcome {
    let bits = [2u8, 4, 8, 16];
    let configs: Vec<(u8, usize)> = bits.iter().map(|&b| (b, 32)).collect();
    let mut eer_ok = true;
    let mut capacity_ok = true;
    let mut interior = 0;
    let mut lines = Vec::new();
    for seed in C8_SEEDS {
        let cfg = ExperimentConfig {
            run_folds: Some(C8_RUN_FOLDS),
            ..default_experiment()
        };
        let prep: Prepared = prepare(&cfg, seed).unwrap();
        let rows = run_sweep(&prep, &cfg, &configs, seed).unwrap();
        let eers: Vec<f64> = rows.iter().map(|r| r.eer).collect();
        let rhos: Vec<f64> = rows.iter().map(|r| r.rho).collect();
        eer_ok &= eers.windows(2).all(|w| w[1] <= w[0]);
        capacity_ok &= rows.iter().all(|r| r.capacity_bits == 32 * r.bits as u64);
        let best = (0..rhos.len())
            .max_by(|&i, &j| rhos[i].total_cmp(&rhos[j]))
            .unwrap();
        interior += usize::from(best != 0 && best != rhos.len() - 1);
        lines.push(format!("seed {seed}: eer {eers:.3?} rho {rhos:.3?}"));
    }
    outcome(
        eer_ok && interior >= 2 && capacity_ok,
        format!("EER non-increasing {eer_ok}; interior rho peak on {interior}/3; capacity exact {capacity_ok} [{}]", lines.join("; ")),
    )
}

fn c9_privacy() -> Outcome {
    let cfg = default_experiment();
    let prep = prepare(&cfg, EXPERIMENT_SEED).unwrap();
    let sigmas = [0.0, 25.3, 253.0];
    let rows = privacy_tradeoff(
        &prep,
        &cfg,
        &sigmas,
        &MiaConfig::default(),
        5,
        false,
        EXPERIMENT_SEED,
    )
    .unwrap();
    let non_inc = |v: Vec<f64>| v.windows(2).all(|w| w[1] <= w[0] + C9_MONOTONE_SLACK);
    let mia = non_inc(rows.iter().map(|r| r.mia_auc).collect());
    let top1 = non_inc(rows.iter().map(|r| r.top1).collect());
    let rho = non_inc(rows.iter().map(|r| r.rho).collect());
    let last = rows.last().unwrap().mia_auc;
    let band = (C9_MIA_BAND.0..=C9_MIA_BAND.1).contains(&last);
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "sigma {}: mia {:.3} top1 {:.4} rho {:.3}",
                r.sigma, r.mia_auc, r.top1, r.rho
            )
        })
        .collect();
    outcome(
        mia && top1 && rho && band,
        format!(
            "{} | monotone mia {mia} top1 {top1} rho {rho}; final MIA in band {band}",
            table.join("; ")
        ),
    )
}

fn c10_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (speakers, per) = (120u32, 20);
    let labels: Vec<u32> = (0..speakers).flat_map(|s| vec![s; per]).collect();
    let x = gaussian(&mut rng, labels.len(), 32);
    let top1 = topk_identification(x.view(), &labels, ENROLL_PER_SPEAKER, &[1]).unwrap()[0];
    let eer = TrialList::all_vs_all(x.view(), &labels, ENROLL_PER_SPEAKER)
        .unwrap()
        .eer()
        .unwrap();
    let chance = 1.0 / speakers as f64;
    let random_ok = (eer - 0.5).abs() <= C10_EER_TOL && (top1 - chance).abs() <= C10_TOP1_TOL;

    let indep: Vec<f64> = (0..5)
        .map(|_| {
            let x = gaussian(&mut rng, C10_MI_SAMPLES, 8);
            let l: Vec<u32> = (0..C10_MI_SAMPLES)
                .map(|_| rng.random_range(0..8))
                .collect();
            knn_mi(x.view(), &l, KNN_K).unwrap()
        })
        .collect();
    let indep_ok = indep.iter().all(|&m| m <= C10_MI_INDEPENDENT_MAX);
    let mut cluster = Vec::new();
    for c in [2usize, 4, 8] {
        let centers = gaussian(&mut rng, c, 4) * 50.0;
        let l: Vec<u32> = (0..c as u32).flat_map(|k| vec![k; 60]).collect();
        let x = Array2::from_shape_fn((l.len(), 4), |(i, j)| {
            centers[[l[i] as usize, j]] + rng.sample::<f64, _>(StandardNormal)
        });
        cluster.push((c, knn_mi(x.view(), &l, KNN_K).unwrap()));
    }
    let cluster_ok = cluster.iter().all(|&(c, mi)| {
        let truth = (c as f64).log2();
        (mi - truth).abs() <= C10_MI_CLUSTER_REL * truth
    });
    outcome(
        random_ok && indep_ok && cluster_ok,
        format!("random eer {eer:.3} top1 {top1:.4} (chance {chance:.4}); independent MI {indep:.3?}; clusters {cluster:.3?}"),
    )
}

fn c11_arithmetic() -> Outcome {
    let r = energy_report(EnergyParams::default()).unwrap();
    let energy_ok = (r.e_per_inference_mj - 2.574).abs() < 1e-9
        && r.inferences_per_day == 17_280.0
        && (r.duty_cycle - 0.128).abs() < 1e-12
        && r.audit.iter().any(|a| a.contains("mWh"));
    let t = dps_timing_model(&DpsConfig::default(), &DpsStageCosts::published()).unwrap();
    // ten 0.7 ms passes spread over fifty sub-windows
    let dps_ok = t.subwindows == 50
        && (t.pass_share_ms - 10.0 * 0.7 / 50.0).abs() < 1e-12
        && (t.overhead_ms - 7.8 / 50.0).abs() < 1e-12;
    outcome(
        energy_ok && dps_ok,
        format!(
            "{:.3} mJ, {} inferences/day, duty {:.1}%, {} audit flag(s); DPS {} sub-windows, pass share {:.3} ms, overhead {:.3} ms",
            r.e_per_inference_mj,
            r.inferences_per_day,
            100.0 * r.duty_cycle,
            r.audit.len(),
            t.subwindows,
            t.pass_share_ms,
            t.overhead_ms
        ),
    )
}

fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    // rank = 1 + #smaller + (#equal - 1) / 2
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let eq = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Two-sided p-value by enumerating all 2^n sign patterns of the ranks.
fn oracle_wilcoxon(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    let ranks = oracle_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w: f64 = ranks
        .iter()
        .zip(&d)
        .filter(|(_, v)| **v > 0.0)
        .map(|(r, _)| r)
        .sum();
    let n = d.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let s: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        le += u64::from(s <= w + 1e-9);
        ge += u64::from(s >= w - 1e-9);
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le as f64 / total).min(ge as f64 / total)).min(1.0)
}

fn c12_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut w_worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(5..=10);
        // coarse values so that ties and zero differences occur
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        if a == b {
            continue;
        }
        w_worst = w_worst.max((wilcoxon_paired(&a, &b).unwrap() - oracle_wilcoxon(&a, &b)).abs());
    }
    let mut s_worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(3..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let b: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..8) as f64 + rng.random_range(0.0..1.0))
            .collect();
        let (ra, rb) = (oracle_ranks(&a), oracle_ranks(&b));
        if ra.iter().all(|&r| r == ra[0]) {
            continue;
        }
        s_worst = s_worst.max((spearman_rho(&a, &b).unwrap() - oracle_pearson(&ra, &rb)).abs());
    }
    let constant = vec![0.42; 30];
    let ci = bootstrap_ci(
        &constant,
        |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64,
        500,
        0.95,
        1,
    );
    let point = (ci.0 - 0.42).abs() < 1e-12 && (ci.1 - 0.42).abs() < 1e-12;
    outcome(
        w_worst < 1e-12 && s_worst < 1e-12 && point,
        format!("wilcoxon max |diff| {w_worst:.1e}; spearman max |diff| {s_worst:.1e}; constant-data CI {ci:?}"),
    )
}

fn c13_temporal() -> Outcome {
    let cfg = default_experiment();
    let prep = prepare(&cfg, EXPERIMENT_SEED).unwrap();
    let r = temporal_stability(&prep, &cfg, &[1, 2], 4, EXPERIMENT_SEED).unwrap();
    outcome(
        r.relative_drop < C13_MAX_DROP,
        format!(
            "rho sessions 1-2 {:.3}, session 4 {:.3}, relative drop {:.1}%, re-onboard rate {:.2}",
            r.rho_in_session,
            r.rho_later_session,
            100.0 * r.relative_drop,
            r.reonboard_rate
        ),
    )
}

/// Not one of the numbered criteria: the DPS gate's trigger rate on held-out
/// synthetic windows, of which about 12% carry injected noise.
fn supplementary_trigger_rate() -> Outcome {
    let cfg = default_experiment();
    let prep = prepare(&cfg, EXPERIMENT_SEED).unwrap();
    let folds = synth::speaker_independent_folds(
        &prep.corpus,
        cfg.folds,
        stream::derive(prep.seed, stream::FOLDS),
    )
    .unwrap();
    let (train, test) = folds.split(&prep.corpus, 0);
    let heads = train_heads(
        &prep,
        &train,
        &cfg,
        &cfg.model,
        stream::derive(EXPERIMENT_SEED, 1),
    )
    .unwrap();
    let dps = DpsConfig::default();
    let h = prep.hidden.select(Axis(0), &test);
    let mut rng = ChaCha8Rng::seed_from_u64(EXPERIMENT_SEED);
    let uc = estimate_uncertainty(&heads.model, &BatchInput::Encoded(h), &dps, &mut rng).unwrap();
    let mut sched = DpsScheduler::new(dps).unwrap();
    for (w, u) in uc.iter().enumerate() {
        sched.subwindow(w as u64, 0, || Ok(*u)).unwrap();
    }
    let noisy = test
        .iter()
        .filter(|&&i| prep.corpus.samples[i].noise_injected)
        .count() as f64
        / test.len() as f64;
    let rate = sched.trigger_rate();
    outcome(
        (SUPP_TRIGGER_BAND.0..=SUPP_TRIGGER_BAND.1).contains(&rate),
        format!("trigger rate {rate:.3} over {} windows ({:.1}% noisy); target band {SUPP_TRIGGER_BAND:?}", test.len(), 100.0 * noisy),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

const CRITERIA: [Criterion; 13] = [
    (1, "capacity arithmetic", MINUTE, c1_capacity),
    (2, "packed INT4 size", MINUTE, c2_packed_size),
    (3, "kernel equivalence", MINUTE, c3_kernels),
    (4, "quantizer contract", MINUTE, c4_quantizer),
    (
        5,
        "gradient correctness",
        Duration::from_secs(5 * 60),
        c5_gradients,
    ),
    (6, "OPL properties", MINUTE, c6_opl),
    (
        7,
        "synthetic disentanglement",
        Duration::from_secs(30 * 60),
        c7_disentanglement,
    ),
    (
        8,
        "bit-width sweep direction",
        Duration::from_secs(60 * 60),
        c8_bit_sweep,
    ),
    (9, "privacy trend", Duration::from_secs(15 * 60), c9_privacy),
    (
        10,
        "estimator calibration",
        Duration::from_secs(5 * 60),
        c10_calibration,
    ),
    (11, "exact arithmetic", MINUTE, c11_arithmetic),
    (12, "statistics oracles", MINUTE, c12_statistics),
    (
        13,
        "temporal stability",
        Duration::from_secs(15 * 60),
        c13_temporal,
    ),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, budget, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let in_time = elapsed <= budget;
        let pass = o.pass && in_time;
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s of {}s budget]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    // reported only; the numbered criteria decide the exit status
    if selected.is_empty() || args.iter().any(|a| a == "dps") {
        let o = panic::catch_unwind(supplementary_trigger_rate)
            .unwrap_or_else(|_| outcome(false, "panicked"));
        println!(
            "supplementary {} DPS trigger rate: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
