//! One function per subcommand. Each returns JSON results plus a flat table.

use mpib::adapt::dps_timing_model;
use mpib::eval::budget::energy_report;
use mpib::eval::experiment::{
    cross_validate, embed_heldout, fold_metrics, prepare, pretrain_encoder, privacy_tradeoff,
    run_sweep, stream, train_heads, FoldMetrics, PrivacyRow, SweepRow, CAPACITY_MATCHED,
};
use mpib::eval::leakage_report;
use mpib::kernels::{bench_kernel, BenchResult};
use mpib::losses::LossBreakdown;
use mpib::model::{checkpoint, Model};
use mpib::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::report::Table;

pub type Output = (Value, Table);

const FOLD_COLUMNS: [&str; 8] = [
    "fold",
    "rho",
    "state_top1",
    "state_eer",
    "state_mi_bits",
    "trait_top1",
    "trait_eer",
    "n_test_speakers",
];
const SWEEP_COLUMNS: [&str; 11] = [
    "bits",
    "state_dim",
    "capacity_bits",
    "rho",
    "top1",
    "eer",
    "mi_bits",
    "rho_ci_0",
    "rho_ci_1",
    "eer_ci_0",
    "eer_ci_1",
];
const LOSS_COLUMNS: [&str; 7] = ["epoch", "recon", "stab", "smooth", "orth", "agit", "total"];

fn to_value<T: Serialize>(v: &T) -> mpib::Result<Value> {
    serde_json::to_value(v).map_err(|e| mpib::Error::Format(e.to_string()))
}

fn table<T: Serialize>(columns: &[&str], rows: &[T]) -> mpib::Result<Table> {
    let mut t = Table::new(columns);
    for r in rows {
        t.push(r).map_err(|e| mpib::Error::Format(e.to_string()))?;
    }
    Ok(t)
}

#[derive(Serialize)]
struct Labeled<'a, T> {
    #[serde(rename = "fold")]
    label: String,
    #[serde(flatten)]
    inner: &'a T,
}

#[derive(Serialize)]
struct EpochRow<'a> {
    epoch: usize,
    #[serde(flatten)]
    components: &'a mpib::losses::LossComponents,
    total: f64,
}

fn loss_rows(history: &[LossBreakdown]) -> Vec<EpochRow<'_>> {
    history
        .iter()
        .enumerate()
        .map(|(epoch, h)| EpochRow {
            epoch,
            components: &h.components,
            total: h.total,
        })
        .collect()
}

pub fn synth(cfg: &RunConfig) -> mpib::Result<Output> {
    let corpus = synth::generate_corpus(
        &cfg.experiment.corpus,
        stream::derive(cfg.seed, stream::CORPUS),
    )?;
    let manifest = synth::write_corpus(&corpus, &cfg.out.join("corpus"))?;
    #[derive(Serialize)]
    struct Summary {
        manifest: String,
        n_samples: usize,
        n_speakers: usize,
    }
    let s = Summary {
        manifest: manifest.display().to_string(),
        n_samples: corpus.samples.len(),
        n_speakers: corpus.speakers.len(),
    };
    Ok((
        to_value(&s)?,
        table(&["manifest", "n_samples", "n_speakers"], &[s])?,
    ))
}

pub fn pretrain(cfg: &RunConfig) -> mpib::Result<Output> {
    let (encoder, norm, losses) = pretrain_encoder(&cfg.experiment, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream::derive(cfg.seed, stream::HEADS));
    let mut model = Model::with_encoder(cfg.experiment.model.clone(), encoder, &mut rng)?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("encoder.mpib");
    checkpoint::save(&mut model, Some(norm), &path)?;
    #[derive(Serialize)]
    struct Step {
        step: usize,
        loss: f64,
    }
    let steps: Vec<Step> = losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| Step { step, loss })
        .collect();
    Ok((
        json!({ "checkpoint": path.display().to_string(), "losses": losses }),
        table(&["step", "loss"], &steps)?,
    ))
}

pub fn train(cfg: &RunConfig) -> mpib::Result<Output> {
    let e = &cfg.experiment;
    let prep = prepare(e, cfg.seed)?;
    let folds = synth::speaker_independent_folds(
        &prep.corpus,
        e.folds,
        stream::derive(prep.seed, stream::FOLDS),
    )?;
    let (train_idx, test_idx) = folds.split(&prep.corpus, 0);
    let mut heads = train_heads(&prep, &train_idx, e, &e.model, stream::derive(cfg.seed, 1))?;
    let held = fold_metrics(&embed_heldout(&prep, &heads.model, &test_idx)?)?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("model.mpib");
    checkpoint::save(&mut heads.model, Some(prep.norm.clone()), &path)?;
    let rows = loss_rows(&heads.history);
    let results = json!({ "checkpoint": path.display().to_string(), "heldout": to_value(&held)?, "history": to_value(&rows)? });
    Ok((results, table(&LOSS_COLUMNS, &rows)?))
}

pub fn eval(cfg: &RunConfig) -> mpib::Result<Output> {
    let e = &cfg.experiment;
    let prep = prepare(e, cfg.seed)?;
    let cv = cross_validate(&prep, e, &e.model, cfg.seed)?;
    let mut rows: Vec<Labeled<FoldMetrics>> = cv
        .folds
        .iter()
        .enumerate()
        .map(|(i, f)| Labeled {
            label: i.to_string(),
            inner: f,
        })
        .collect();
    rows.push(Labeled {
        label: "mean".into(),
        inner: &cv.mean,
    });
    Ok((to_value(&cv)?, table(&FOLD_COLUMNS, &rows)?))
}

pub fn sweep(cfg: &RunConfig) -> mpib::Result<Output> {
    let e = &cfg.experiment;
    let configs: Vec<(u8, usize)> = if cfg.sweep.capacity_matched {
        CAPACITY_MATCHED.to_vec()
    } else {
        let dim = cfg.sweep.state_dim.unwrap_or(e.model.state_dim);
        cfg.sweep.bits.iter().map(|&b| (b, dim)).collect()
    };
    let rows: Vec<SweepRow> = if configs.is_empty() {
        Vec::new()
    } else {
        run_sweep(&prepare(e, cfg.seed)?, e, &configs, cfg.seed)?
    };
    Ok((to_value(&rows)?, table(&SWEEP_COLUMNS, &rows)?))
}

pub fn leakage(cfg: &RunConfig) -> mpib::Result<Output> {
    let e = &cfg.experiment;
    let prep = prepare(e, cfg.seed)?;
    let folds = synth::speaker_independent_folds(
        &prep.corpus,
        e.folds,
        stream::derive(prep.seed, stream::FOLDS),
    )?;
    let (train_idx, test_idx) = folds.split(&prep.corpus, 0);
    let heads = train_heads(&prep, &train_idx, e, &e.model, stream::derive(cfg.seed, 1))?;
    let h = embed_heldout(&prep, &heads.model, &test_idx)?;
    let bs = stream::derive(cfg.seed, stream::BOOTSTRAP);
    let reports = [
        (
            "trait",
            leakage_report(
                h.trait_emb.view(),
                &h.speakers,
                None,
                e.bootstrap_resamples,
                bs,
            )?,
        ),
        (
            "state",
            leakage_report(
                h.state_emb.view(),
                &h.speakers,
                h.state_step,
                e.bootstrap_resamples,
                bs,
            )?,
        ),
    ];
    let rows: Vec<Labeled<_>> = reports
        .iter()
        .map(|(n, r)| Labeled {
            label: n.to_string(),
            inner: r,
        })
        .collect();
    let mut t = table(
        &[
            "fold",
            "top1",
            "top5",
            "eer",
            "mi_bits",
            "mia_auc",
            "top1_ci_lo",
            "top1_ci_hi",
            "eer_ci_lo",
            "eer_ci_hi",
            "n_trials",
        ],
        &rows,
    )?;
    t.columns[0] = "embedding".into();
    let results = json!({ "trait": to_value(&reports[0].1)?, "state": to_value(&reports[1].1)? });
    Ok((results, t))
}

pub fn privacy(cfg: &RunConfig) -> mpib::Result<Output> {
    let e = &cfg.experiment;
    let p = &cfg.privacy;
    let prep = prepare(e, cfg.seed)?;
    let rows: Vec<PrivacyRow> = privacy_tradeoff(
        &prep,
        e,
        &p.sigmas,
        &p.attack,
        p.attack_seeds,
        p.speaker_disjoint,
        stream::derive(cfg.seed, 1),
    )?;
    Ok((
        to_value(&rows)?,
        table(&["sigma", "rho", "mia_auc", "top1", "eer"], &rows)?,
    ))
}

pub fn energy(cfg: &RunConfig) -> mpib::Result<Output> {
    let r = energy_report(cfg.energy)?;
    #[derive(Serialize)]
    struct Row<'a> {
        #[serde(rename = "e_per_inference_mJ")]
        e_per_inference_mj: f64,
        inferences_per_day: f64,
        duty_cycle: f64,
        per_inference_total_mwh: f64,
        duty_cycle_total_mwh: f64,
        audit: &'a str,
    }
    let audit = r.audit.join("; ");
    let row = Row {
        e_per_inference_mj: r.e_per_inference_mj,
        inferences_per_day: r.inferences_per_day,
        duty_cycle: r.duty_cycle,
        per_inference_total_mwh: r.per_inference.total_mwh,
        duty_cycle_total_mwh: r.duty_cycle_based.total_mwh,
        audit: &audit,
    };
    let cols = [
        "e_per_inference_mJ",
        "inferences_per_day",
        "duty_cycle",
        "per_inference_total_mwh",
        "duty_cycle_total_mwh",
        "audit",
    ];
    Ok((to_value(&r)?, table(&cols, &[row])?))
}

pub fn bench(cfg: &RunConfig) -> mpib::Result<Output> {
    let b = &cfg.bench;
    let results: Vec<BenchResult> = b
        .shapes
        .iter()
        .enumerate()
        .map(|(i, &s)| bench_kernel(s, b.iters, stream::derive(cfg.seed, i as u64)))
        .collect::<mpib::Result<_>>()?;
    for r in &results {
        if r.checksum != r.oracle_checksum {
            return Err(mpib::Error::InvalidArgument(format!(
                "{} checksum {} differs from oracle {}",
                r.op_name, r.checksum, r.oracle_checksum
            )));
        }
    }
    let timing = dps_timing_model(&b.dps, &b.dps_costs)?;
    let cols = [
        "op_name",
        "spec_m",
        "spec_k",
        "spec_n",
        "spec_b_bits",
        "ns_per_call",
        "bytes_weights",
    ];
    Ok((
        json!({ "kernels": to_value(&results)?, "dps_timing": to_value(&timing)? }),
        table(&cols, &results)?,
    ))
}
