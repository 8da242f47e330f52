//! Training runs, checkpoint evaluation and the paired ablation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dacdet_core::augment::{augment_pipeline, DetSample};
use dacdet_core::boxes::Detection;
use dacdet_core::gradcheck::{GradCheckConfig, GradCheckReport};
use dacdet_core::evalmap::{evaluate, APReport, EvalConfig};
use dacdet_core::losses::LossBreakdown;
use dacdet_core::model::{decode_predictions, DetectorModel};
use dacdet_core::optim::Optimizer;
use dacdet_core::rng;
use dacdet_core::train::{train_step, StepInput, TrainError};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ExperimentConfig, TrainConfig, DECODE_FLOOR};
use crate::dataset::{self, EvalRecord, EvalSplit, TrainRecord};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsLog, Record, Summary};

// RNG stream tags
const SHUFFLE: u64 = 0x5348;
const AUGMENT: u64 = 0x4155;

pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps_run: u64,
    pub first_loss: Option<LossBreakdown>,
    pub last_loss: Option<LossBreakdown>,
    pub test_report: Option<APReport>,
    pub wall_seconds: f64,
}

/// Runs every image through the detector.
pub fn detect_all(model: &DetectorModel<f32>, records: &[EvalRecord], nms_iou: f64) -> Result<BTreeMap<u64, Vec<Detection>>> {
    records
        .iter()
        .map(|r| {
            let grid = model.predict(&r.image)?;
            Ok((r.index as u64, decode_predictions(&grid, DECODE_FLOOR, nms_iou)))
        })
        .collect()
}

pub fn evaluate_model(
    model: &DetectorModel<f32>,
    records: &[EvalRecord],
    nms_iou: f64,
    eval: &EvalConfig,
) -> Result<APReport> {
    let dets = detect_all(model, records, nms_iou)?;
    let gts: BTreeMap<u64, Vec<_>> = records.iter().map(|r| (r.index as u64, r.boxes.clone())).collect();
    Ok(evaluate(&dets, &gts, eval)?)
}

/// Scores a checkpoint on one split. `conf` overrides the operating point.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path, split: EvalSplit, conf: Option<f64>) -> Result<APReport> {
    let ck = checkpoint::load(ckpt)?;
    let records = dataset::load_eval(data, split)?;
    let mut eval = ck.config.train.eval;
    if let Some(c) = conf {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Config(format!("--conf must lie in [0, 1], got {c}")));
        }
        eval.conf_thresh = c;
    }
    evaluate_model(&ck.model, &records, ck.config.train.nms_iou, &eval)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE, epoch as u64]));
    order
}

/// Trains from scratch, or continues `resume` up to `cfg.train.epochs`.
/// Writes `metrics.jsonl`, `timing.jsonl`, `summary.json`, per-class PR
/// curves and the final checkpoint under `out`.
pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let started = Instant::now();
    let train_set = dataset::load_train(data)?;
    if train_set.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let test_set = dataset::load_eval(data, EvalSplit::Test)?;
    let (mut model, mut opt, mut step, start_epoch) = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.config.model != cfg.model {
                return Err(Error::Config("the checkpoint was trained with a different [model] config".into()));
            }
            (ck.model, ck.optimizer, ck.step, ck.epoch)
        }
        None => {
            let model = DetectorModel::<f32>::new(cfg.model.clone(), tc.seed)?;
            let opt = Optimizer::new(tc.optimizer, tc.learning_rate, &model.params);
            (model, opt, 0, 0)
        }
    };
    opt.lr = tc.learning_rate;

    let mut log = MetricsLog::open(out, resume.is_some())?;
    log.write(&Record::Config { config: cfg, resumed_from_step: resume.map(|_| step) })?;

    let pool: Vec<DetSample> = train_set.iter().map(|r| DetSample { image: r.x_h.clone(), boxes: r.y_h.clone() }).collect();
    let batch_size = tc.batch_size.min(train_set.len());
    let (mut first, mut last) = (None, None);
    let steps_at_start = step;
    let mut epoch = start_epoch;
    let capped = |s: u64| tc.max_steps > 0 && s >= tc.max_steps as u64;
    let per_epoch = (train_set.len() / batch_size) as u64;
    // a run stopped by max_steps inside an epoch resumes at the next batch
    let mut skip = step.saturating_sub(start_epoch as u64 * per_epoch) as usize;
    while epoch < tc.epochs && !capped(step) {
        let order = shuffled(train_set.len(), tc.seed, epoch);
        let mut completed = true;
        for chunk in order.chunks_exact(batch_size).skip(std::mem::take(&mut skip)) {
            if capped(step) {
                completed = false;
                break;
            }
            let bd = run_step(&mut model, &mut opt, &train_set, &pool, chunk, tc, step).inspect_err(|e| {
                let _ = log.write(&Record::Abort { step, reason: e.to_string() });
            })?;
            log.write(&Record::Step { step, epoch, loss: &bd })?;
            first.get_or_insert(bd);
            last = Some(bd);
            step += 1;
        }
        if !completed {
            break;
        }
        epoch += 1;
        let last_epoch = epoch == tc.epochs;
        if tc.eval_every > 0 && epoch % tc.eval_every == 0 && !last_epoch {
            let r = evaluate_model(&model, &test_set, tc.nms_iou, &tc.eval)?;
            log.write(&Record::Eval { step, epoch, split: "test", report: &r })?;
        }
    }

    let report = if test_set.is_empty() {
        None
    } else {
        let r = evaluate_model(&model, &test_set, tc.nms_iou, &tc.eval)?;
        log.write(&Record::Eval { step, epoch, split: "test", report: &r })?;
        metrics::write_pr_curves(&out.join("pr"), &r)?;
        Some(r)
    };
    let ck = Checkpoint { config: cfg.clone(), step, epoch, model, optimizer: opt };
    checkpoint::save(&out.join(CHECKPOINT_DIR), &ck)?;
    metrics::write_summary(
        out,
        &Summary { steps: step, epochs: epoch, first_loss: first.as_ref(), last_loss: last.as_ref(), test: report.as_ref() },
    )?;
    log.finish()?;
    Ok(TrainOutcome {
        checkpoint: ck,
        steps_run: step - steps_at_start,
        first_loss: first,
        last_loss: last,
        test_report: report,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn run_step(
    model: &mut DetectorModel<f32>,
    opt: &mut Optimizer<f32>,
    train_set: &[TrainRecord],
    pool: &[DetSample],
    chunk: &[usize],
    tc: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let mut r = rng::stream(tc.seed, &[AUGMENT, step]);
    let augmented = chunk
        .iter()
        .map(|&i| augment_pipeline(&pool[i], pool, &tc.aug, &mut r))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Other(format!("augmentation failed at step {step}: {e}")))?;
    let batch: Vec<StepInput> = chunk
        .iter()
        .zip(&augmented)
        .map(|(&i, a)| StepInput {
            det_image: &a.image,
            det_boxes: &a.boxes,
            dac_hcm: &train_set[i].x_h,
            dac_lcm: &train_set[i].x_l,
        })
        .collect();
    train_step(model, opt, &batch, &tc.dac).map_err(|e| match e {
        TrainError::NonFinite(breakdown) => Error::NonFinite { step, breakdown },
        source => Error::Train { step, source },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub lambda_dac: f64,
    pub map50: f64,
    pub report: APReport,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub with_dac: ArmResult,
    pub without_dac: ArmResult,
    /// `(with − without) / without`.
    pub relative_improvement: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub runs: Vec<SeedResult>,
    pub median_with_dac: f64,
    pub median_without_dac: f64,
    /// Relative gap between the two medians.
    pub median_gap: f64,
    /// Median over seeds of the per-seed relative improvement.
    pub median_relative_improvement: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn relative(with: f64, without: f64) -> f64 {
    if without > 0.0 {
        (with - without) / without
    } else if with > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Both arms of one seed: identical configs except for the contrastive weight.
pub fn arm_configs(cfg: &ExperimentConfig, seed: u64) -> Result<(ExperimentConfig, ExperimentConfig)> {
    if cfg.train.dac.lambda_dac <= 0.0 {
        return Err(Error::Config("ablation needs lambda_dac > 0 for the contrastive arm".into()));
    }
    let mut with = cfg.clone();
    with.train.seed = seed;
    let mut without = with.clone();
    without.train.dac.lambda_dac = 0.0;
    let mut probe = without.clone();
    probe.train.dac.lambda_dac = with.train.dac.lambda_dac;
    assert_eq!(probe, with, "arms must differ only in lambda_dac");
    Ok((with, without))
}

/// Trains both arms for every seed on the same dataset.
pub fn ablate(cfg: &ExperimentConfig, data: &Path, seeds: &[u64], out: &Path) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    cfg.validate()?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let (with, without) = arm_configs(cfg, seed)?;
        let arm = |c: &ExperimentConfig, name: &str| -> Result<ArmResult> {
            let dir: PathBuf = out.join(format!("seed_{seed}")).join(name);
            let o = train(c, data, &dir, None)?;
            let report = o.test_report.unwrap_or_default();
            Ok(ArmResult { lambda_dac: c.train.dac.lambda_dac, map50: report.map50, report, wall_seconds: o.wall_seconds })
        };
        let w = arm(&with, "with_dac")?;
        let wo = arm(&without, "without_dac")?;
        runs.push(SeedResult { seed, relative_improvement: relative(w.map50, wo.map50), with_dac: w, without_dac: wo });
    }
    let mw = median(&runs.iter().map(|r| r.with_dac.map50).collect::<Vec<_>>());
    let mwo = median(&runs.iter().map(|r| r.without_dac.map50).collect::<Vec<_>>());
    let result = AblationResult {
        median_gap: relative(mw, mwo),
        median_relative_improvement: median(&runs.iter().map(|r| r.relative_improvement).collect::<Vec<_>>()),
        median_with_dac: mw,
        median_without_dac: mwo,
        runs,
    };
    let path = out.join("ablation.json");
    let text = serde_json::to_string_pretty(&result).expect("serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

/// Human-readable ablation table; deltas to one decimal.
pub fn format_ablation(r: &AblationResult) -> String {
    let mut s = String::from("seed  with_dac  without_dac  rel_improvement\n");
    for run in &r.runs {
        s.push_str(&format!(
            "{:<4}  {:>8.4}  {:>11.4}  {:>+14.1}%\n",
            run.seed,
            run.with_dac.map50,
            run.without_dac.map50,
            100.0 * run.relative_improvement
        ));
    }
    s.push_str(&format!(
        "median with_dac {:.4}, without_dac {:.4}: {:+.1}% (median per-seed {:+.1}%)\n",
        r.median_with_dac,
        r.median_without_dac,
        100.0 * r.median_gap,
        100.0 * r.median_relative_improvement
    ));
    s
}

/// Runs the finite-difference check and turns a failure into an error that
/// names the offending parameters.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let report = dacdet_core::gradcheck::grad_check(cfg, None)?;
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::GradCheckFailed { max_rel_error: report.max_rel_error(), params: report.failing_params() })
    }
}
