use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use ndarray::Array2;

use rewardtune::denoiser::{load_checkpoint, save_checkpoint, Condition, DenoiserParams};
use rewardtune::harness::{
    build_evaluator, calibrate_reward, emit_outputs, evaluation_conditions, finetune, generate, plot_tradeoff,
    plot_training_curves, pretrain_base, read_curves_json, run_experiment, sweep_switch_point, synthesize_dataset,
    template, write_manifest, ExperimentConfig, LabeledSet, Route, TEMPLATE_NAMES,
};
use rewardtune::params::{read_text, write_text};
use rewardtune::rewards::{eval_reward, RewardModel, RewardSpec};
use rewardtune::rng::derive_seed;
use rewardtune::schedule::NoiseSchedule;
use rewardtune::trainers::{Algorithm, StepReport};
use rewardtune::{Error, Result};

#[derive(Parser)]
#[command(name = "rewardtune", version, about = "Reward fine-tuning of toy diffusion models")]
struct Cli {
    /// Experiment config (JSON); defaults to the `points2d` template.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a named config template.
    Template { name: String },
    /// Pretrain, fine-tune, sweep and plot in one go.
    Run,
    /// Train the base model and write `base.ckpt.json`.
    Pretrain,
    /// Fine-tune the base model.
    Finetune {
        #[arg(long)]
        algorithm: String,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Generate samples with the base model, a fine-tuned model, or both.
    Sample {
        #[arg(long)]
        base: Option<PathBuf>,
        /// Fine-tuned checkpoint; omit for base-only sampling.
        #[arg(long)]
        ft: Option<PathBuf>,
        /// Number of final steps taken by the fine-tuned model.
        #[arg(long)]
        switch_point: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Sweep the switch point between base and fine-tuned models.
    Sweep {
        #[arg(long)]
        algorithm: String,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        ft: Option<PathBuf>,
    },
    /// Score a samples CSV against the held-out set.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Redraw plots from `results.json`.
    Plot,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => template("points2d")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.resolve()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn load_params(path: &Path, what: &str) -> Result<DenoiserParams> {
    if !path.exists() {
        return Err(Error::config(format!("missing {what} checkpoint {}", path.display())));
    }
    Ok(load_checkpoint(path)?.0)
}

fn write_log(path: &Path, log: &[StepReport]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

struct Context {
    cfg: ExperimentConfig,
    dir: PathBuf,
    schedule: NoiseSchedule,
    train: LabeledSet,
    heldout: LabeledSet,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = load_config(cli)?;
        let dir = cfg.output_dir.clone();
        ensure_dir(&dir)?;
        let (train, heldout) = synthesize_dataset(&cfg.data, derive_seed(cfg.seed, "data", 0))?;
        Ok(Self {
            schedule: cfg.schedule.build()?,
            cfg,
            dir,
            train,
            heldout,
        })
    }

    fn base(&self, path: &Option<PathBuf>) -> Result<DenoiserParams> {
        load_params(&path.clone().unwrap_or_else(|| self.dir.join("base.ckpt.json")), "base")
    }

    /// The reward saved next to the checkpoints, or a fresh calibration.
    fn reward(&self, base: &DenoiserParams) -> Result<RewardSpec> {
        let path = self.dir.join("reward.json");
        if path.exists() {
            let spec = RewardSpec::from_json(&read_text(&path)?)?;
            if spec.kind != self.cfg.reward.kind {
                return Err(Error::config("reward.json does not match the configured reward"));
            }
            return Ok(spec);
        }
        let spec = calibrate_reward(&self.cfg, base, &self.schedule)?;
        write_text(&path, &(serde_json::to_string_pretty(&spec)? + "\n"))?;
        Ok(spec)
    }
}

fn samples_csv(x: &Array2<f64>, conds: &[Condition]) -> String {
    let mut out = String::from("class");
    for j in 0..x.ncols() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (row, c) in x.rows().into_iter().zip(conds) {
        out.push_str(&c.class_id().map_or("null".to_string(), |k| k.to_string()));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn parse_samples_csv(text: &str, dim: usize) -> Result<(Array2<f64>, Vec<Condition>)> {
    let bad = |line: usize| Error::config(format!("samples csv line {line} is malformed"));
    let mut data = Vec::new();
    let mut conds = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(bad(i + 1));
        }
        conds.push(match fields[0] {
            "null" => Condition::Null,
            k => Condition::Class(k.parse().map_err(|_| bad(i + 1))?),
        });
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|_| bad(i + 1))?);
        }
    }
    let x = Array2::from_shape_vec((conds.len(), dim), data).map_err(|_| bad(0))?;
    Ok((x, conds))
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::config(format!("device `{}` is not available; use cpu", cli.device)));
    }
    match &cli.command {
        Command::Template { name } => {
            let cfg = template(name).map_err(|_| {
                Error::config(format!("unknown template `{name}`; available: {}", TEMPLATE_NAMES.join(", ")))
            })?;
            print!("{}", cfg.to_json());
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let art = run_experiment(&cfg)?;
            println!("{}", art.output_dir.join("manifest.json").display());
        }
        Command::Pretrain => {
            let ctx = Context::new(cli)?;
            ctx.cfg.save(&ctx.dir.join("config.json"))?;
            let (base, log) = pretrain_base(&ctx.cfg, &ctx.train, &ctx.schedule)?;
            let path = ctx.dir.join("base.ckpt.json");
            save_checkpoint(&base, &path, Some(serde_json::to_value(&ctx.cfg.pretrain)?))?;
            write_log(&ctx.dir.join("train_log_pretrain.jsonl"), &log)?;
            println!("{}", path.display());
        }
        Command::Finetune { algorithm, base } => {
            let alg: Algorithm = algorithm.parse()?;
            if alg == Algorithm::Pretrain {
                return Err(Error::config("use the `pretrain` command for base training"));
            }
            let ctx = Context::new(cli)?;
            let tc = ctx.cfg.finetune_config(alg)?;
            let base = ctx.base(base)?;
            let reward = RewardModel::new(&ctx.reward(&base)?)?;
            let evaluator = build_evaluator(&ctx.cfg, &ctx.heldout)?;
            let (ft, log, trace) = finetune(&ctx.cfg, tc, &base, &ctx.train, &ctx.schedule, &reward, &evaluator, Some(&ctx.dir))?;
            let name = alg.as_str();
            let path = ctx.dir.join(format!("ft_{name}.ckpt.json"));
            save_checkpoint(&ft, &path, Some(serde_json::to_value(tc)?))?;
            write_log(&ctx.dir.join(format!("train_log_{name}.jsonl")), &log)?;
            plot_training_curves(&ctx.dir, std::slice::from_ref(&trace))?;
            write_text(
                &ctx.dir.join(format!("training_curve_{name}.json")),
                &(serde_json::to_string_pretty(&trace)? + "\n"),
            )?;
            println!("{}", path.display());
        }
        Command::Sample {
            base,
            ft,
            switch_point,
            per_class,
        } => {
            let ctx = Context::new(cli)?;
            let base = ctx.base(base)?;
            let ft = ft.as_ref().map(|p| load_params(p, "fine-tuned")).transpose()?;
            let mut traj = ctx.cfg.trajectory.clone();
            if let Some(t) = switch_point {
                traj.switch_point = *t;
            }
            traj.validate()?;
            let conds = evaluation_conditions(
                ctx.cfg.data.classes(),
                per_class.unwrap_or(ctx.cfg.eval.samples_per_condition),
            );
            let route = match &ft {
                None => Route::BaseOnly,
                Some(f) => Route::Combined(f),
            };
            let x = generate(&base, route, &ctx.schedule, &conds, &traj, "sample")?;
            let path = ctx.dir.join("samples.csv");
            write_text(&path, &samples_csv(&x, &conds))?;
            println!("{}", path.display());
        }
        Command::Sweep { algorithm, base, ft } => {
            let alg: Algorithm = algorithm.parse()?;
            let ctx = Context::new(cli)?;
            let base = ctx.base(base)?;
            let ft_path = ft
                .clone()
                .unwrap_or_else(|| ctx.dir.join(format!("ft_{}.ckpt.json", alg.as_str())));
            let ft = load_params(&ft_path, "fine-tuned")?;
            let reward = RewardModel::new(&ctx.reward(&base)?)?;
            let evaluator = build_evaluator(&ctx.cfg, &ctx.heldout)?;
            let method = format!("{}_combined", alg.as_str());
            info!("sweeping {} switch points", ctx.cfg.sweep_grid.len());
            let curve = sweep_switch_point(
                &ctx.cfg,
                &base,
                &ft,
                &ctx.schedule,
                &reward,
                &evaluator,
                &ctx.cfg.sweep_grid,
                &method,
            )?;
            emit_outputs(&ctx.dir, std::slice::from_ref(&curve), &[])?;
            write_manifest(&ctx.dir, &ctx.cfg, None)?;
            println!("{}", ctx.dir.join("sweep.csv").display());
        }
        Command::Evaluate { samples } => {
            let ctx = Context::new(cli)?;
            let (x, conds) = parse_samples_csv(&read_text(samples)?, ctx.cfg.data.data_dim())?;
            let base = ctx.base(&None)?;
            let reward = RewardModel::new(&ctx.reward(&base)?)?;
            let evaluator = build_evaluator(&ctx.cfg, &ctx.heldout)?;
            let raw = eval_reward(&reward, &x, &conds)?;
            let report = evaluator.report(&x, &conds, &raw, ctx.cfg.seed, "samples", ctx.cfg.trajectory.switch_point)?;
            let text = serde_json::to_string_pretty(&report.to_json())? + "\n";
            write_text(&ctx.dir.join("evaluation.json"), &text)?;
            print!("{text}");
        }
        Command::Plot => {
            let dir = cli
                .out
                .clone()
                .map_or_else(|| load_config(cli).map(|c| c.output_dir), Ok)?;
            let (curves, training) = read_curves_json(&dir.join("results.json"))?;
            plot_tradeoff(&dir, &curves)?;
            if !training.is_empty() {
                plot_training_curves(&dir, &training)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
