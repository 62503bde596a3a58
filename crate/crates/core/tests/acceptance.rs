//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use rewardtune::denoiser::{init_denoiser, predict_eps, Arch, Condition, ConvArch, DenoiserParams, GradMode, MlpArch};
use rewardtune::harness::{
    build_evaluator, calibrate_reward, finetune, pretrain_base, synthesize_dataset, sweep_switch_point, template,
    DataConfig, ExperimentConfig, LabeledSet, TradeoffCurve,
};
use rewardtune::metrics::{
    cov_distance_from_cov, embedding_diversity_features, frechet_distance, log_cov_distance_from_cov, spearman,
    Evaluator, FeatureSet, LOG_COV_EPS,
};
use rewardtune::params::Gradients;
use rewardtune::rewards::{RewardKind, RewardModel, RewardSpec};
use rewardtune::rng::{derive_seed, rng_for, standard_normal};
use rewardtune::samplers::{
    combined_sample, partial_sample_rows, predict_x0, predict_x0_backward, sample_trajectory, StepSettings,
    TrajectoryConfig,
};
use rewardtune::schedule::{build_schedule, NoiseSchedule, SamplerKind, ScheduleKind};
use rewardtune::trainers::{
    imagerefl_grad, refl_grad, train_loop, Algorithm, Branch, Dataset, ImageReflDraw, TrainConfig,
};
use rewardtune::Result;

type Outcome = Result<(bool, String)>;

// ---------------------------------------------------------------------------
// 1. gradient truncation

fn small_arch(conv: bool) -> Arch {
    if conv {
        Arch::Conv(ConvArch {
            height: 4,
            width: 4,
            channels: vec![4, 4],
            time_embed_dim: 6,
            class_embed_dim: 3,
            class_count: 3,
        })
    } else {
        Arch::Mlp(MlpArch {
            input_dim: 2,
            hidden: vec![12, 12],
            time_embed_dim: 6,
            class_embed_dim: 3,
            class_count: 3,
        })
    }
}

/// Reward with bounds wide enough that nothing clamps, so the rescaled
/// reward is affine in the raw reward.
fn open_reward(dim: usize) -> RewardModel {
    let targets = (0..3).map(|k| (0..dim).map(|j| ((k + j) % 3) as f64 - 1.0).collect()).collect();
    let spec = RewardSpec::new(RewardKind::RegionTarget { targets }).with_bounds((-1e12, 1e12));
    RewardModel::new(&spec).unwrap()
}

/// Gradient of `-mean rescale(R(x0_hat))` where `x0_hat` is predicted from a
/// constant `x_tf` by a single tracked evaluation of `p`.
fn final_step_oracle(
    p: &DenoiserParams,
    inf: &NoiseSchedule,
    reward: &RewardModel,
    x_tf: &Array2<f64>,
    t_f: usize,
    conds: &[Condition],
) -> Result<Gradients> {
    let times = vec![inf.model_time(t_f); x_tf.nrows()];
    let eval = predict_eps(p, x_tf, &times, conds, GradMode::Track)?;
    let x0_hat = predict_x0(inf, &eval.eps, x_tf, t_f)?;
    let r = reward.evaluate(&x0_hat, conds, true)?;
    let spec = reward.spec();
    let d = -spec.scale / (spec.norm_hi - spec.norm_lo) / x_tf.nrows() as f64;
    let g_x0 = r.grad.unwrap() * d;
    let (_, g_eps) = predict_x0_backward(inf, t_f, &g_x0)?;
    Ok(eval.backward(p, &g_eps)?.0)
}

fn criterion_truncation() -> Outcome {
    let s = build_schedule(ScheduleKind::Linear, 100, 1e-3, 0.2)?;
    let inf = s.respace(20)?;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for case in 0..8u64 {
        let conv = case % 2 == 1;
        let arch = small_arch(conv);
        let dim = arch.data_dim();
        let p = init_denoiser(&arch, 100 + case)?;
        let frozen = p.clone_params().freeze();
        let reward = open_reward(dim);
        let mut rng = rng_for(case, "instance", 0);
        let n = 3 + case as usize % 3;
        let conds: Vec<Condition> = (0..n)
            .map(|_| Condition::Class(rng.random_range(0..3)))
            .collect();
        let settings = StepSettings {
            kind: if case % 3 == 0 { SamplerKind::Ancestral } else { SamplerKind::Deterministic },
            eta: if case % 3 == 1 { 0.7 } else { 0.0 },
            guidance_scale: 1.0,
            rng_seed: derive_seed(case, "noise", 0),
        };

        // ReFL: the prefix runs on frozen weights, only the last prediction is live.
        let x_t = standard_normal(n, dim, &mut rng);
        let t_f = rng.random_range(1..=6);
        let (_, got) = refl_grad(&p, &inf, &reward, &x_t, &conds, t_f, &settings)?;
        let starts = vec![inf.len(); n];
        let prefix = partial_sample_rows(&frozen, &inf, &x_t, &starts, t_f, &conds, false, &settings)?;
        let want = final_step_oracle(&p, &inf, &reward, &prefix.x_tf, t_f, &conds)?;
        worst = worst.max(got.max_abs_diff(&want));

        // ImageReFL: forward-noised data, per-row start steps, plus the weighted diffusion loss.
        let x0 = standard_normal(n, dim, &mut rng);
        let t_primes: Vec<usize> = (0..n).map(|_| rng.random_range(8..=11)).collect();
        let eps = standard_normal(n, dim, &mut rng);
        let t_f = rng.random_range(1..=6);
        let weight = 0.3;
        let draw = ImageReflDraw {
            t_primes: t_primes.clone(),
            eps: eps.clone(),
            t_f,
            rng_seed: settings.rng_seed,
        };
        let (_, got) = imagerefl_grad(&p, &inf, Some(&reward), &x0, &conds, &draw, weight, &settings)?;
        let mut x_tp = Array2::zeros((n, dim));
        for i in 0..n {
            let ab = inf.alpha_bar(t_primes[i]);
            let row = &x0.row(i) * ab.sqrt() + &eps.row(i) * (1.0 - ab).sqrt();
            x_tp.row_mut(i).assign(&row);
        }
        let prefix = partial_sample_rows(&frozen, &inf, &x_tp, &t_primes, t_f, &conds, false, &settings)?;
        let mut want = final_step_oracle(&p, &inf, &reward, &prefix.x_tf, t_f, &conds)?;
        let times: Vec<usize> = t_primes.iter().map(|&t| inf.model_time(t)).collect();
        let eval = predict_eps(&p, &x_tp, &times, &conds, GradMode::Track)?;
        let g = (&eval.eps - &eps) * (2.0 / n as f64);
        want.add_scaled(&eval.backward(&p, &g)?.0, weight);
        worst = worst.max(got.max_abs_diff(&want));
        cases += 2;
    }
    Ok((worst <= 1e-10, format!("{cases} instances, max |diff| {worst:.2e} (tol 1e-10)")))
}

// ---------------------------------------------------------------------------
// 2. boundary equivalences

fn criterion_boundaries() -> Outcome {
    let s = build_schedule(ScheduleKind::Cosine, 100, 1e-4, 0.02)?;
    let mut ok = true;
    let mut checked = 0;
    for (case, kind, eta) in [
        (0u64, SamplerKind::Deterministic, 0.0),
        (1, SamplerKind::Deterministic, 0.5),
        (2, SamplerKind::Ancestral, 0.0),
    ] {
        let arch = small_arch(false);
        let base = init_denoiser(&arch, 7 + case)?.freeze();
        let ft = init_denoiser(&arch, 70 + case)?;
        let mut rng = rng_for(case, "boundary", 0);
        let conds: Vec<Condition> = (0..9).map(|i| Condition::Class(i % 3)).collect();
        let x_t = standard_normal(conds.len(), 2, &mut rng);
        let mut cfg = TrajectoryConfig {
            steps: 25,
            sampler_kind: kind,
            eta,
            rng_seed: 11 + case,
            ..TrajectoryConfig::default()
        };
        cfg.switch_point = 0;
        let combined = combined_sample(&base, &ft, &s, &x_t, &conds, &cfg)?;
        let base_only = sample_trajectory(&base, &s, &x_t, &conds, cfg.guidance_scale_base, &cfg)?;
        ok &= combined == base_only;
        cfg.switch_point = cfg.steps;
        let combined = combined_sample(&base, &ft, &s, &x_t, &conds, &cfg)?;
        let ft_only = sample_trajectory(&ft, &s, &x_t, &conds, cfg.guidance_scale_ft, &cfg)?;
        ok &= combined == ft_only;
        checked += 2;
    }
    Ok((ok, format!("{checked} boundary pairs compared bit-for-bit")))
}

// ---------------------------------------------------------------------------
// 3. metric oracles

/// Stratified sample: `mean + sd * Phi^-1((i + 0.5) / n)`.
fn normal_features(n: usize, mean: f64, sd: f64) -> FeatureSet {
    let phi = Normal::new(mean, sd).unwrap();
    let z = Array2::from_shape_fn((n, 1), |(i, _)| phi.inverse_cdf((i as f64 + 0.5) / n as f64));
    FeatureSet::new(z, "identity").unwrap()
}

fn criterion_metrics() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let n = 10_000;
    for (name, a, b) in [("N(0,1)|N(1,1)", (0.0, 1.0), (1.0, 1.0)), ("N(0,1)|N(0,4)", (0.0, 1.0), (0.0, 2.0))] {
        let d = frechet_distance(&normal_features(n, a.0, a.1), &normal_features(n, b.0, b.1))?;
        let rel = (d - 1.0).abs();
        ok &= rel <= 0.02;
        notes.push(format!("frechet {name} {d:.4}"));
    }

    let da: [f64; 4] = [0.5, 2.0, 3.0, 1e-3];
    let db = [1.5, 2.0, 0.25, 4.0];
    let sa = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&da));
    let sb = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&db));
    let dim = da.len() as f64;
    let cov_want = da.iter().zip(&db).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / dim;
    let log_want = da
        .iter()
        .zip(&db)
        .map(|(a, b)| ((a + LOG_COV_EPS).ln() - (b + LOG_COV_EPS).ln()).powi(2))
        .sum::<f64>()
        .sqrt()
        / dim;
    let cov_err = (cov_distance_from_cov(&sa, &sb) - cov_want).abs();
    let log_err = (log_cov_distance_from_cov(&sa, &sb)? - log_want).abs();
    ok &= cov_err <= 1e-8 && log_err <= 1e-8;
    notes.push(format!("cov err {cov_err:.1e} logcov err {log_err:.1e}"));

    let mut rng = rng_for(5, "diversity", 0);
    let groups: Vec<Array2<f64>> = (0..4).map(|g| standard_normal(20 + g, 6, &mut rng)).collect();
    let got = embedding_diversity_features(&groups)?;
    let mut per_group = Vec::new();
    for g in &groups {
        let rows: Vec<Array1<f64>> = g.rows().into_iter().map(|r| r.to_owned()).collect();
        let (mut sum, mut pairs) = (0.0, 0.0);
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in rows.iter().enumerate() {
                if i != j {
                    sum += 1.0 - a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt());
                    pairs += 1.0;
                }
            }
        }
        per_group.push(sum / pairs);
    }
    let want = per_group.iter().sum::<f64>() / per_group.len() as f64;
    let div_err = (got - want).abs();
    ok &= div_err <= 1e-12;
    notes.push(format!("diversity err {div_err:.1e}"));
    Ok((ok, notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 4-6. desk-scale phenomenology on points2d

struct Lab {
    cfg: ExperimentConfig,
    schedule: NoiseSchedule,
    train: LabeledSet,
    base: DenoiserParams,
    reward: RewardModel,
    evaluator: Evaluator,
    finetuned: BTreeMap<&'static str, DenoiserParams>,
    sweeps: BTreeMap<&'static str, TradeoffCurve>,
}

impl Lab {
    fn new(seed: u64) -> Result<Self> {
        let cfg = template("points2d")?.with_seed(seed).resolve()?;
        let (train, heldout) = synthesize_dataset(&cfg.data, derive_seed(cfg.seed, "data", 0))?;
        let schedule = cfg.schedule.build()?;
        let (base, _) = pretrain_base(&cfg, &train, &schedule)?;
        let reward = RewardModel::new(&calibrate_reward(&cfg, &base, &schedule)?)?;
        let evaluator = build_evaluator(&cfg, &heldout)?;
        Ok(Self {
            cfg,
            schedule,
            train,
            base,
            reward,
            evaluator,
            finetuned: BTreeMap::new(),
            sweeps: BTreeMap::new(),
        })
    }

    fn finetuned(&mut self, alg: Algorithm) -> Result<&DenoiserParams> {
        if !self.finetuned.contains_key(alg.as_str()) {
            let tc = self.cfg.finetune_config(alg)?;
            let (p, _, _) = finetune(
                &self.cfg,
                tc,
                &self.base,
                &self.train,
                &self.schedule,
                &self.reward,
                &self.evaluator,
                None,
            )?;
            self.finetuned.insert(alg.as_str(), p);
        }
        Ok(&self.finetuned[alg.as_str()])
    }

    /// Switch-point sweep over the configured grid plus the 25% and 75%
    /// points; the curve always holds the base-only (T' = 0) and ft-only
    /// (T' = steps) endpoints.
    fn sweep(&mut self, alg: Algorithm) -> Result<&TradeoffCurve> {
        if !self.sweeps.contains_key(alg.as_str()) {
            self.finetuned(alg)?;
            let ft = &self.finetuned[alg.as_str()];
            let steps = self.cfg.trajectory.steps;
            let mut grid = self.cfg.sweep_grid.clone();
            grid.extend([steps / 4, 3 * steps / 4]);
            grid.sort_unstable();
            grid.dedup();
            let curve = sweep_switch_point(
                &self.cfg,
                &self.base,
                ft,
                &self.schedule,
                &self.reward,
                &self.evaluator,
                &grid,
                &format!("{}_combined", alg.as_str()),
            )?;
            self.sweeps.insert(alg.as_str(), curve);
        }
        Ok(&self.sweeps[alg.as_str()])
    }
}

fn row_at(curve: &TradeoffCurve, t_prime: usize) -> (f64, f64) {
    let r = curve
        .rows
        .iter()
        .find(|r| r.t_prime == t_prime)
        .unwrap_or_else(|| panic!("sweep has no row at T'={t_prime}"));
    (r.reward_mean, r.embedding_diversity)
}

struct Labs(BTreeMap<u64, Lab>);

impl Labs {
    fn get(&mut self, seed: u64) -> Result<&mut Lab> {
        if !self.0.contains_key(&seed) {
            self.0.insert(seed, Lab::new(seed)?);
        }
        Ok(self.0.get_mut(&seed).unwrap())
    }
}

fn criterion_collapse(labs: &mut Labs) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let lab = labs.get(seed)?;
        let steps = lab.cfg.trajectory.steps;
        let curve = lab.sweep(Algorithm::Refl)?;
        let (r0, d0) = row_at(curve, 0);
        let (r1, d1) = row_at(curve, steps);
        if r1 > r0 && d1 < d0 {
            wins += 1;
        }
        notes.push(format!("s{seed}: r {r0:.3}->{r1:.3} div {d0:.3}->{d1:.3}"));
    }
    Ok((wins >= 4, format!("{wins}/5 seeds (need 4); {}", notes.join("; "))))
}

fn criterion_monotone(labs: &mut Labs) -> Outcome {
    let (mut rho_r, mut rho_d) = (0.0, 0.0);
    for seed in 0..3 {
        let curve = labs.get(seed)?.sweep(Algorithm::Refl)?;
        let t: Vec<f64> = curve.rows.iter().map(|r| r.t_prime as f64).collect();
        let r: Vec<f64> = curve.rows.iter().map(|r| r.reward_mean).collect();
        let d: Vec<f64> = curve.rows.iter().map(|r| r.embedding_diversity).collect();
        rho_r += spearman(&t, &r)? / 3.0;
        rho_d += spearman(&t, &d)? / 3.0;
    }
    Ok((
        rho_r >= 0.8 && rho_d <= -0.8,
        format!("mean spearman reward {rho_r:+.3} (need >= 0.8), diversity {rho_d:+.3} (need <= -0.8)"),
    ))
}

fn criterion_few_step(labs: &mut Labs) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..3 {
        let lab = labs.get(seed)?;
        let steps = lab.cfg.trajectory.steps;
        let (quarter, three_quarters) = (steps / 4, 3 * steps / 4);
        let refl = lab.sweep(Algorithm::Refl)?;
        let (r_base, _) = row_at(refl, 0);
        let (r_refl, d_refl) = row_at(refl, three_quarters);
        let (r_img, d_img) = row_at(lab.sweep(Algorithm::Imagerefl)?, quarter);
        let ratio = (r_img - r_base) / (r_refl - r_base);
        if ratio >= 0.9 && d_img >= d_refl {
            wins += 1;
        }
        notes.push(format!("s{seed}: gain ratio {ratio:.3} div {d_img:.3} vs {d_refl:.3}"));
    }
    Ok((wins >= 2, format!("{wins}/3 seeds (need 2); {}", notes.join("; "))))
}

// ---------------------------------------------------------------------------
// 7. alternation accounting

fn criterion_alternation() -> Outcome {
    let s = build_schedule(ScheduleKind::Cosine, 100, 1e-4, 0.02)?;
    let arch = Arch::Mlp(MlpArch {
        input_dim: 2,
        hidden: vec![8],
        time_embed_dim: 4,
        class_embed_dim: 2,
        class_count: 3,
    });
    let n = 48;
    let x0 = standard_normal(n, 2, &mut rng_for(3, "alternation", 0));
    let conds: Vec<Condition> = (0..n).map(|i| Condition::Class(i % 3)).collect();
    let spec = RewardSpec::new(RewardKind::Brightness).with_bounds((-50.0, 50.0));
    let reward = RewardModel::new(&spec)?;
    let cfg = TrainConfig {
        algorithm: Algorithm::Imagerefl,
        batch_size: 8,
        epochs: 1000,
        max_steps: Some(400),
        inference_steps: 20,
        t_f_window: (1, 5),
        t_prime_window: (6, 8),
        ..TrainConfig::default()
    };
    let data = Dataset { x0: &x0, conds: &conds };
    let (_, log) = train_loop(&cfg, &data, &s, Some(&reward), init_denoiser(&arch, 1)?, |_, _| Ok(()))?;
    let refl = log.iter().filter(|r| r.branch == Branch::Refl).count();
    Ok((
        log.len() == 400 && refl == 100,
        format!("{} steps, {refl} refl-branch steps (need exactly 100 of 400)", log.len()),
    ))
}

// ---------------------------------------------------------------------------
// 8. sweep determinism through the CLI

fn tiny_config(out: &Path) -> Result<ExperimentConfig> {
    let mut cfg = template("points2d")?;
    if let DataConfig::Points2d(p) = &mut cfg.data {
        p.train_per_class = 300;
        p.heldout_per_class = 100;
    }
    cfg.pretrain.max_steps = Some(300);
    for tc in &mut cfg.finetune {
        tc.max_steps = Some(12);
        tc.batch_size = 16;
    }
    cfg.trajectory.steps = 20;
    cfg.trajectory.switch_point = 15;
    for tc in &mut cfg.finetune {
        tc.inference_steps = 20;
        tc.t_f_window = (1, 5);
        tc.t_prime_window = (6, 7);
    }
    cfg.sweep_grid = vec![15, 10, 5];
    cfg.eval.samples_per_condition = 40;
    cfg.eval.probe_samples = 30;
    cfg.eval.eval_every = 6;
    cfg.output_dir = out.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

fn cli(config: &Path, out: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_rewardtune"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("`{}` exited with {status}", args.join(" ")))
    }
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
        }
    }
    out
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        std::fs::create_dir_all(&out).unwrap();
        let config = tmp.path().join(format!("{name}.json"));
        tiny_config(&out)?.save(&config)?;
        let steps: [&[&str]; 3] = [&["pretrain"], &["finetune", "--algorithm", "refl"], &["sweep", "--algorithm", "refl"]];
        for args in steps {
            if let Err(e) = cli(&config, &out, args) {
                return Ok((false, e));
            }
        }
        runs.push(csv_files(&out));
    }
    let same = !runs[0].is_empty() && runs[0] == runs[1];
    Ok((same, format!("{} csv files compared byte-for-byte", runs[0].len())))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut labs = Labs(BTreeMap::new());
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = t0.elapsed().as_secs_f64();
        println!("criterion {n}: {} {name} [{secs:.1}s] {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed += 1;
        }
    };
    run(1, "gradient truncation", &mut criterion_truncation);
    run(2, "boundary equivalence", &mut criterion_boundaries);
    run(3, "metric oracles", &mut criterion_metrics);
    run(4, "diversity collapse", &mut || criterion_collapse(&mut labs));
    run(5, "trade-off monotonicity", &mut || criterion_monotone(&mut labs));
    run(6, "few-step refinement", &mut || criterion_few_step(&mut labs));
    run(7, "alternation accounting", &mut criterion_alternation);
    run(8, "sweep determinism", &mut criterion_determinism);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
