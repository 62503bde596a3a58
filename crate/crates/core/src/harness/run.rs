use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::output::{emit_outputs, write_manifest, CurvePoint, Manifest, TrainingCurve};
use super::{synthesize_dataset, ExperimentConfig, LabeledSet, REFERENCE_GRID};
use crate::denoiser::{init_denoiser, save_checkpoint, Condition, DenoiserParams};
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, Extractor, MetricReport};
use crate::params::write_text;
use crate::rewards::{calibrate_bounds, eval_reward, RewardModel, RewardSpec};
use crate::rng::{derive_seed, rng_for, standard_normal};
use crate::samplers::{combined_sample, interpolated_guidance_sample, sample_trajectory, TrajectoryConfig};
use crate::schedule::NoiseSchedule;
use crate::trainers::{train_loop, Algorithm, Dataset, StepReport, TrainConfig};

/// The reference switch-point grid rescaled from 40 steps to `steps`.
pub fn default_grid(steps: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = REFERENCE_GRID
        .iter()
        .map(|&g| ((g * steps) as f64 / 40.0).round() as usize)
        .collect();
    grid.dedup();
    grid
}

/// `per_class` copies of every class label, class-major.
pub fn evaluation_conditions(classes: usize, per_class: usize) -> Vec<Condition> {
    (0..classes)
        .flat_map(|k| std::iter::repeat_n(Condition::Class(k), per_class))
        .collect()
}

/// Quality and diversity rows of one method over switch points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub method: String,
    pub rows: Vec<MetricReport>,
}

/// Which parameters denoise each step.
#[derive(Clone, Copy)]
pub enum Route<'a> {
    BaseOnly,
    FtOnly(&'a DenoiserParams),
    /// Fine-tuned model for the last `switch_point` steps.
    Combined(&'a DenoiserParams),
}

/// Samples from an `x_T` and step noise keyed by `(cfg.rng_seed, tag)`, so
/// every route called with the same tag sees the same noise.
pub fn generate(
    base: &DenoiserParams,
    route: Route<'_>,
    schedule: &NoiseSchedule,
    conds: &[Condition],
    cfg: &TrajectoryConfig,
    tag: &str,
) -> Result<Array2<f64>> {
    let x_t = standard_normal(conds.len(), base.arch().data_dim(), &mut rng_for(cfg.rng_seed, tag, 0));
    let cfg = TrajectoryConfig {
        rng_seed: derive_seed(cfg.rng_seed, tag, 1),
        ..cfg.clone()
    };
    match route {
        Route::BaseOnly => sample_trajectory(base, schedule, &x_t, conds, cfg.guidance_scale_base, &cfg),
        Route::FtOnly(ft) => sample_trajectory(ft, schedule, &x_t, conds, cfg.guidance_scale_ft, &cfg),
        Route::Combined(ft) => combined_sample(base, ft, schedule, &x_t, conds, &cfg),
    }
}

pub fn pretrain_base(
    cfg: &ExperimentConfig,
    train: &LabeledSet,
    schedule: &NoiseSchedule,
) -> Result<(DenoiserParams, Vec<StepReport>)> {
    let init = init_denoiser(&cfg.arch, derive_seed(cfg.seed, "init", 0))?.with_name("base");
    let data = Dataset {
        x0: &train.x0,
        conds: &train.conds,
    };
    let (p, log) = train_loop(&cfg.pretrain, &data, schedule, None, init, |_, r| {
        if r.step % 500 == 0 {
            info!("pretrain step {} loss {:.4}", r.step, r.total);
        }
        Ok(())
    })?;
    Ok((p.freeze(), log))
}

/// Reward spec with bounds fixed by the config or calibrated on base-only samples.
pub fn calibrate_reward(cfg: &ExperimentConfig, base: &DenoiserParams, schedule: &NoiseSchedule) -> Result<RewardSpec> {
    let spec = RewardSpec::new(cfg.reward.kind.clone());
    if let Some(bounds) = cfg.reward.bounds {
        return Ok(spec.with_bounds(bounds));
    }
    let classes = cfg.data.classes();
    let per_class = cfg.reward.calibration_samples.div_ceil(classes);
    let conds = evaluation_conditions(classes, per_class);
    let x0 = generate(base, Route::BaseOnly, schedule, &conds, &cfg.trajectory, "calibration")?;
    let model = RewardModel::new(&spec)?;
    Ok(spec.with_bounds(calibrate_bounds(&model, &x0, &conds)?))
}

pub fn build_evaluator(cfg: &ExperimentConfig, heldout: &LabeledSet) -> Result<Evaluator> {
    let extractor = Extractor::new(&cfg.eval.extractor, cfg.data.data_dim())?;
    Evaluator::new(extractor, &heldout.x0, &heldout.conds)
}

fn score(
    evaluator: &Evaluator,
    reward: &RewardModel,
    samples: &Array2<f64>,
    conds: &[Condition],
    seed: u64,
    method: &str,
    t_prime: usize,
) -> Result<MetricReport> {
    let raw = eval_reward(reward, samples, conds)?;
    evaluator.report(samples, conds, &raw, seed, method, t_prime)
}

/// Fine-tunes a trainable copy of `base`, tracing fine-tuned-only probe
/// metrics every `eval_every` steps and saving intermediate checkpoints under
/// `checkpoint_dir` when configured.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &ExperimentConfig,
    tc: &TrainConfig,
    base: &DenoiserParams,
    train: &LabeledSet,
    schedule: &NoiseSchedule,
    reward: &RewardModel,
    evaluator: &Evaluator,
    checkpoint_dir: Option<&Path>,
) -> Result<(DenoiserParams, Vec<StepReport>, TrainingCurve)> {
    let alg = tc.algorithm.as_str();
    let probe_conds = evaluation_conditions(cfg.data.classes(), cfg.eval.probe_samples / cfg.data.classes());
    let steps = cfg.trajectory.steps;
    let probe = |p: &DenoiserParams, step: usize| -> Result<CurvePoint> {
        let x = generate(base, Route::FtOnly(p), schedule, &probe_conds, &cfg.trajectory, "probe")?;
        let report = score(evaluator, reward, &x, &probe_conds, cfg.seed, alg, steps)?;
        Ok(CurvePoint { step, report })
    };
    let start = base.clone_params().with_name(format!("ft_{alg}"));
    let mut points = Vec::new();
    if cfg.eval.eval_every > 0 {
        points.push(probe(&start, 0)?);
    }
    let data = Dataset {
        x0: &train.x0,
        conds: &train.conds,
    };
    let (p, log) = train_loop(tc, &data, schedule, Some(reward), start, |p, r| {
        let done = r.step + 1;
        if cfg.eval.eval_every > 0 && done % cfg.eval.eval_every == 0 {
            let pt = probe(p, done)?;
            info!(
                "{alg} step {done}: reward {:.4} diversity {:.4}",
                pt.report.reward_mean, pt.report.embedding_diversity
            );
            points.push(pt);
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.eval.checkpoint_every > 0 && done % cfg.eval.checkpoint_every == 0 {
                save_checkpoint(p, &dir.join(format!("ft_{alg}_step{done}.ckpt.json")), None)?;
            }
        }
        Ok(())
    })?;
    Ok((
        p,
        log,
        TrainingCurve {
            algorithm: alg.to_string(),
            points,
        },
    ))
}

fn sort_rows(rows: &mut [MetricReport]) {
    let rank = |m: &str| match m {
        "base_only" => 0,
        "ft_only" => 2,
        _ => 1,
    };
    rows.sort_by_key(|r| (r.t_prime, rank(&r.algorithm)));
}

/// One combined-sampling row per grid point plus the base-only (`T' = 0`)
/// and fine-tuned-only (`T' = steps`) endpoints, all from common noise.
#[allow(clippy::too_many_arguments)]
pub fn sweep_switch_point(
    cfg: &ExperimentConfig,
    base: &DenoiserParams,
    ft: &DenoiserParams,
    schedule: &NoiseSchedule,
    reward: &RewardModel,
    evaluator: &Evaluator,
    grid: &[usize],
    method: &str,
) -> Result<TradeoffCurve> {
    let steps = cfg.trajectory.steps;
    if let Some(&bad) = grid.iter().find(|&&t| t > steps) {
        return Err(Error::config(format!("switch point {bad} outside [0, {steps}]")));
    }
    let conds = evaluation_conditions(cfg.data.classes(), cfg.eval.samples_per_condition);
    let row = |route: Route<'_>, t_prime: usize, tag: &str| -> Result<MetricReport> {
        let traj = TrajectoryConfig {
            switch_point: t_prime,
            ..cfg.trajectory.clone()
        };
        let x = generate(base, route, schedule, &conds, &traj, "sweep")?;
        score(evaluator, reward, &x, &conds, cfg.seed, tag, t_prime)
    };
    let mut rows = vec![row(Route::BaseOnly, 0, "base_only")?, row(Route::FtOnly(ft), steps, "ft_only")?];
    for &t in grid {
        rows.push(row(Route::Combined(ft), t, method)?);
    }
    sort_rows(&mut rows);
    Ok(TradeoffCurve {
        method: method.to_string(),
        rows,
    })
}

/// Interpolation-guidance baseline; row `t_prime` holds `round(lambda * steps)`.
fn interp_curve(
    cfg: &ExperimentConfig,
    base: &DenoiserParams,
    ft: &DenoiserParams,
    schedule: &NoiseSchedule,
    reward: &RewardModel,
    evaluator: &Evaluator,
    method: &str,
) -> Result<TradeoffCurve> {
    let conds = evaluation_conditions(cfg.data.classes(), cfg.eval.samples_per_condition);
    let traj = &cfg.trajectory;
    let x_t = standard_normal(conds.len(), base.arch().data_dim(), &mut rng_for(traj.rng_seed, "sweep", 0));
    let t = TrajectoryConfig {
        rng_seed: derive_seed(traj.rng_seed, "sweep", 1),
        ..traj.clone()
    };
    let mut rows = Vec::new();
    for &lambda in &cfg.eval.interp_lambdas {
        let x = interpolated_guidance_sample(base, ft, lambda, schedule, &x_t, &conds, &t)?;
        let t_prime = (lambda * traj.steps as f64).round() as usize;
        rows.push(score(evaluator, reward, &x, &conds, cfg.seed, method, t_prime)?);
    }
    sort_rows(&mut rows);
    Ok(TradeoffCurve {
        method: method.to_string(),
        rows,
    })
}

pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub base: DenoiserParams,
    pub reward: RewardSpec,
    pub finetuned: Vec<(Algorithm, DenoiserParams)>,
    pub logs: Vec<(String, Vec<StepReport>)>,
    pub curves: Vec<TradeoffCurve>,
    pub training_curves: Vec<TrainingCurve>,
    pub manifest: Manifest,
}

fn write_log(path: &Path, log: &[StepReport]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Pretrain, calibrate, fine-tune every configured algorithm, sweep and
/// write all artifacts plus `manifest.json` under `cfg.output_dir`. A failing
/// stage writes a failure manifest before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let cfg = cfg.clone().resolve()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut stage = "setup";
    let result = run_stages(&cfg, &dir, &mut stage);
    match result {
        Ok(mut art) => {
            art.manifest = write_manifest(&dir, &cfg, None)?;
            Ok(art)
        }
        Err(e) => {
            write_manifest(&dir, &cfg, Some((stage, &e)))?;
            Err(e)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, dir: &Path, stage: &mut &'static str) -> Result<RunArtifacts> {
    cfg.save(&dir.join("config.json"))?;
    *stage = "data";
    let (train, heldout) = synthesize_dataset(&cfg.data, derive_seed(cfg.seed, "data", 0))?;
    let schedule = cfg.schedule.build()?;

    *stage = "pretrain";
    let (base, log) = pretrain_base(cfg, &train, &schedule)?;
    save_checkpoint(&base, &dir.join("base.ckpt.json"), Some(serde_json::to_value(&cfg.pretrain)?))?;
    write_log(&dir.join("train_log_pretrain.jsonl"), &log)?;
    let mut logs = vec![("pretrain".to_string(), log)];

    *stage = "calibrate";
    let spec = calibrate_reward(cfg, &base, &schedule)?;
    write_text(&dir.join("reward.json"), &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    let reward = RewardModel::new(&spec)?;
    let evaluator = build_evaluator(cfg, &heldout)?;

    let mut finetuned = Vec::new();
    let mut training_curves = Vec::new();
    let mut curves = Vec::new();
    for tc in &cfg.finetune {
        let alg = tc.algorithm.as_str();
        *stage = "finetune";
        let (ft, log, trace) = finetune(cfg, tc, &base, &train, &schedule, &reward, &evaluator, Some(dir))?;
        save_checkpoint(&ft, &dir.join(format!("ft_{alg}.ckpt.json")), Some(serde_json::to_value(tc)?))?;
        write_log(&dir.join(format!("train_log_{alg}.jsonl")), &log)?;
        logs.push((alg.to_string(), log));
        training_curves.push(trace);

        *stage = "sweep";
        let method = format!("{alg}_combined");
        curves.push(sweep_switch_point(cfg, &base, &ft, &schedule, &reward, &evaluator, &cfg.sweep_grid, &method)?);
        if !cfg.eval.interp_lambdas.is_empty() {
            let method = format!("{alg}_interp_guidance");
            curves.push(interp_curve(cfg, &base, &ft, &schedule, &reward, &evaluator, &method)?);
        }
        finetuned.push((tc.algorithm, ft));
    }

    *stage = "emit";
    emit_outputs(dir, &curves, &training_curves)?;
    Ok(RunArtifacts {
        output_dir: dir.to_path_buf(),
        base,
        reward: spec,
        finetuned,
        logs,
        curves,
        training_curves,
        manifest: Manifest::default(),
    })
}
