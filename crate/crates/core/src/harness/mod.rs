//! Experiment plumbing: configuration, sweeps, CSV output and the summary
//! report behind the `rfadvsim` command-line tool.

mod broadcast;
mod certify;
mod config;
mod sweep;

pub use broadcast::{
    broadcast_eval, broadcast_frames, line_search_weights, BroadcastFrame, BroadcastMethod, BroadcastStats,
};
pub use certify::{certify_frames, CertRow, CertSummary};
pub use config::{
    ArchitectureName, BroadcastSection, ChannelSection, ConventionName, DatasetSection, DefenseSection,
    EvalSection, ExperimentConfig, ModelSection, ShadowUnitsName, TrainSection, UapKind, UapSection, VaeSection,
    SEED_ENV,
};
pub use sweep::{evaluate, observe, AttackKind, EvalContext, EvalStats, Observation, UapSettings};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::classifier::{Classifier, ClassifierModel};
use crate::defense::Outcome;
use crate::iqcore::{generate_dataset, noise_power_for_snr, read_dataset, Dataset, DatasetRecord};
use crate::{Error, Result};

pub const CURVE_HEADER: [&str; 6] = ["attack", "pnr_db", "accuracy", "n_frames", "abstain_rate", "seed"];
pub const CERT_HEADER: [&str; 6] = ["frame_id", "true_label", "outcome", "n_A", "n_B", "p_value"];

/// One row of an accuracy-versus-PNR curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub attack: String,
    pub pnr_db: f64,
    pub accuracy: f64,
    pub n_frames: usize,
    pub abstain_rate: Option<f64>,
    pub seed: u64,
}

pub fn write_curve_csv<W: Write>(out: W, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for p in points {
        w.write_record([
            p.attack.clone(),
            format!("{}", p.pnr_db),
            format!("{:.6}", p.accuracy),
            p.n_frames.to_string(),
            p.abstain_rate.map(|a| format!("{a:.6}")).unwrap_or_default(),
            p.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(input: R) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CURVE_HEADER {
        return Err(Error::format(0, format!("unexpected curve header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::format(rec.position().map_or(0, |p| p.byte()), format!("row {}: bad {what}", i + 1));
        let num = |k: usize, what: &str| rec[k].parse::<f64>().map_err(|_| bad(what));
        out.push(CurvePoint {
            attack: rec[0].to_string(),
            pnr_db: num(1, "pnr_db")?,
            accuracy: num(2, "accuracy")?,
            n_frames: rec[3].parse().map_err(|_| bad("n_frames"))?,
            abstain_rate: if rec[4].is_empty() { None } else { Some(num(4, "abstain_rate")?) },
            seed: rec[5].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(out)
}

pub fn write_cert_csv<W: Write>(out: W, rows: &[CertRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CERT_HEADER)?;
    for r in rows {
        let outcome = match r.outcome {
            Outcome::Class(c) => c.to_string(),
            Outcome::Abstain => "abstain".to_string(),
        };
        w.write_record([
            r.frame_id.to_string(),
            r.true_label.to_string(),
            outcome,
            r.n_a.to_string(),
            r.n_b.to_string(),
            format!("{:.6e}", r.p_value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-attack table with one accuracy column per PNR value.
pub fn report(points: &[CurvePoint]) -> String {
    let mut pnrs: Vec<f64> = points.iter().map(|p| p.pnr_db).collect();
    pnrs.sort_by(f64::total_cmp);
    pnrs.dedup();
    let mut rows: BTreeMap<&str, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for p in points {
        let col = pnrs.iter().position(|x| *x == p.pnr_db).expect("collected above");
        if !rows.contains_key(p.attack.as_str()) {
            order.push(&p.attack);
        }
        rows.entry(&p.attack).or_default().insert(col, p.accuracy);
    }
    let width = order.iter().map(|a| a.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}", "attack");
    for p in &pnrs {
        s.push_str(&format!(" {:>9}", format!("{p}dB")));
    }
    s.push_str(&format!(" {:>9}\n", "mean"));
    for a in order {
        let r = &rows[a];
        s.push_str(&format!("{a:<width$}"));
        for c in 0..pnrs.len() {
            match r.get(&c) {
                Some(v) => s.push_str(&format!(" {v:>9.4}")),
                None => s.push_str(&format!(" {:>9}", "-")),
            }
        }
        let mean = r.values().sum::<f64>() / r.len() as f64;
        s.push_str(&format!(" {mean:>9.4}\n"));
    }
    s
}

/// The configured dataset file, or a freshly synthesized set.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let seed = cfg.dataset.seed.unwrap_or(cfg.seed);
    match &cfg.dataset.path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::config("dataset.path", format!("{} does not exist", p.display())));
            }
            read_dataset(p, seed)
        }
        None => generate_dataset(&cfg.synth_config()?),
    }
}

pub fn load_classifier(path: Option<&Path>, key: &str) -> Result<ClassifierModel> {
    let path = path.ok_or_else(|| Error::config(key, "no checkpoint configured"))?;
    if !path.exists() {
        return Err(Error::config(key, format!("{} does not exist", path.display())));
    }
    ClassifierModel::load(path)
}

/// The `index`-th of `count` contiguous disjoint parts.
pub fn shard(records: &[DatasetRecord], index: usize, count: usize) -> Vec<DatasetRecord> {
    let n = records.len();
    records[index * n / count..(index + 1) * n / count].to_vec()
}

/// Test records at the evaluation SNR, at most `eval.frames` of them.
pub fn eval_records(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<DatasetRecord>> {
    let recs: Vec<DatasetRecord> = ds
        .test_records()
        .into_iter()
        .filter(|r| r.snr_db == cfg.eval.snr_db)
        .take(cfg.eval.frames)
        .collect();
    if recs.is_empty() {
        return Err(Error::config("eval.snr_db", format!("no test frames at {} dB", cfg.eval.snr_db)));
    }
    Ok(recs)
}

/// Training records at the evaluation SNR, used as the adversary's
/// pre-collected inputs.
pub fn attacker_records(ds: &Dataset, cfg: &ExperimentConfig) -> Vec<DatasetRecord> {
    ds.train_records().into_iter().filter(|r| r.snr_db == cfg.eval.snr_db).collect()
}

/// Evaluation context for `model` on `frames` as configured.
pub fn eval_context<'a>(
    cfg: &ExperimentConfig,
    model: &'a dyn Classifier,
    surrogate: Option<&'a dyn Classifier>,
    frames: &'a [DatasetRecord],
    attacker: &'a [DatasetRecord],
) -> Result<EvalContext<'a>> {
    let mut ctx = EvalContext::new(
        model,
        frames,
        cfg.channel_params()?,
        cfg.convention(),
        cfg.eval.snr_db as f64,
        cfg.seed,
    );
    ctx.surrogate = surrogate;
    ctx.attacker_records = attacker;
    ctx.options = cfg.attack_options()?;
    ctx.gamma_grid = cfg.attack.gamma_grid.clone();
    ctx.limited_n = cfg.attack.limited_n;
    ctx.uap = UapSettings {
        kind: cfg.uap.kind,
        n: cfg.uap.n,
        k: cfg.uap.k,
        vae: cfg.vae_config(cfg.seed),
        vae_train: cfg.vae.n_train,
    };
    Ok(ctx)
}

/// Every configured attack at every PNR, attack-major.
pub fn run_attack_sweep(cfg: &ExperimentConfig, ctx: &EvalContext) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::with_capacity(cfg.attack.kind.len() * cfg.eval.pnr_db.len());
    for name in &cfg.attack.kind {
        let kind = AttackKind::parse(name)?;
        for &pnr in &cfg.eval.pnr_db {
            let s = evaluate(ctx, kind, pnr)?;
            out.push(CurvePoint {
                attack: name.clone(),
                pnr_db: pnr,
                accuracy: s.accuracy(),
                n_frames: s.n_frames,
                abstain_rate: None,
                seed: cfg.seed,
            });
        }
    }
    Ok(out)
}

fn weights_label(w: &[f64]) -> String {
    w.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

/// Broadcast curves: for each attack and weight vector, one joint-accuracy
/// row (`<attack> w=<weights>`) and one row per receiver (`... rx<i>`) at
/// every PNR. With `broadcast.line_search`, weights found by grid search at
/// each PNR are added under `w=search`.
pub fn run_broadcast_sweep(cfg: &ExperimentConfig, models: &[&dyn Classifier]) -> Result<Vec<CurvePoint>> {
    let b = &cfg.broadcast;
    if models.len() != b.m {
        return Err(Error::config("broadcast.checkpoints", format!("needs {} models, got {}", b.m, models.len())));
    }
    let channel = cfg.channel_params()?;
    let frames = broadcast_frames(
        &cfg.schemes()?,
        &cfg.synth_config()?.modulator,
        cfg.eval.frames,
        cfg.eval.snr_db as f64,
        &channel,
        &b.rayleigh_scales,
        cfg.seed,
    )?;
    let opts = cfg.attack_options()?;
    let p = frames.first().map_or(crate::FRAME_LEN, |f| f.r[0].len());
    let noise = p as f64 * noise_power_for_snr(cfg.eval.snr_db as f64);
    let mut out = Vec::new();
    for name in &b.attacks {
        let method = BroadcastMethod::parse(name)?;
        let mut series: Vec<(String, Option<Vec<f64>>)> =
            b.weights.iter().map(|w| (weights_label(w), Some(w.clone()))).collect();
        if b.line_search {
            series.push(("search".into(), None));
        }
        for (label, w) in series {
            for &pnr in &cfg.eval.pnr_db {
                let pmax = cfg.convention().pmax(pnr, noise, &channel);
                let w = match &w {
                    Some(w) => w.clone(),
                    None => line_search_weights(models, &frames, method, pmax, b.grid_step, &opts)?,
                };
                let s = broadcast_eval(models, &frames, method, &w, pmax, &opts)?;
                let base = format!("{name} w={label}");
                out.push(CurvePoint {
                    attack: base.clone(),
                    pnr_db: pnr,
                    accuracy: s.joint_accuracy(),
                    n_frames: s.n_frames,
                    abstain_rate: None,
                    seed: cfg.seed,
                });
                for i in 0..b.m {
                    out.push(CurvePoint {
                        attack: format!("{base} rx{}", i + 1),
                        pnr_db: pnr,
                        accuracy: s.receiver_accuracy(i),
                        n_frames: s.n_frames,
                        abstain_rate: None,
                        seed: cfg.seed,
                    });
                }
            }
        }
    }
    Ok(out)
}
