//! Base pretraining, ReFL, ImageReFL and the training loop.
//!
//! ReFL and ImageReFL run on the inference schedule obtained by respacing the
//! training schedule to `TrainConfig::inference_steps`, so `t_f` and `t'` are
//! inference-step indices, the same units as the switch point at sampling time.
//! The gradient functions (`diffusion_grad`, `refl_grad`, `imagerefl_grad`)
//! are pure; `Trainer` draws their random inputs and applies the optimizer.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_eps, Condition, DenoiserParams, GradMode};
use crate::error::{Error, Result};
use crate::params::{Gradients, WeightMap};
use crate::rewards::{rescale_reward, rescale_reward_grad, RewardModel, DEFAULT_REWARD_SCALE};
use crate::rng::{derive_seed, rng_for, standard_normal};
use crate::samplers::{partial_sample_rows, StepSettings};
use crate::schedule::{forward_noise_rows, NoiseSchedule, SamplerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pretrain,
    Refl,
    Imagerefl,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Refl => "refl",
            Self::Imagerefl => "imagerefl",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "refl" => Ok(Self::Refl),
            "imagerefl" => Ok(Self::Imagerefl),
            other => Err(Error::config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Which update a step applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Pretrain,
    Refl,
    Imagerefl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops the run early once this many optimizer steps were taken.
    pub max_steps: Option<usize>,
    pub inference_steps: usize,
    pub sampler_kind: SamplerKind,
    pub eta: f64,
    /// Guidance used by the trainable model inside reward trajectories.
    pub guidance_scale: f64,
    /// Inclusive `[T_min, T_max]` window for `t_f`, in inference steps.
    pub t_f_window: (usize, usize),
    /// Inclusive `[Tp_min, Tp_max]` window for `t'`, in inference steps.
    pub t_prime_window: (usize, usize),
    pub reward_scale: f64,
    pub diffusion_loss_weight: f64,
    /// ImageReFL steps per ReFL step.
    pub imagerefl_to_refl_ratio: usize,
    pub cfg_dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Refl,
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            epochs: 1,
            max_steps: None,
            inference_steps: 40,
            sampler_kind: SamplerKind::Deterministic,
            eta: 0.0,
            guidance_scale: 1.0,
            t_f_window: (1, 10),
            t_prime_window: (11, 14),
            reward_scale: DEFAULT_REWARD_SCALE,
            diffusion_loss_weight: 1e-5,
            imagerefl_to_refl_ratio: 3,
            cfg_dropout_prob: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) || o.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if !(self.reward_scale > 0.0) || !(self.diffusion_loss_weight >= 0.0) {
            return bad("loss weights must be >= 0 and the reward scale > 0".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_prob) {
            return bad(format!("cfg_dropout_prob {} outside [0, 1]", self.cfg_dropout_prob));
        }
        if self.imagerefl_to_refl_ratio == 0 {
            return bad("imagerefl_to_refl_ratio must be >= 1".into());
        }
        if self.algorithm == Algorithm::Pretrain {
            return Ok(());
        }
        let steps = self.inference_steps;
        if steps == 0 || steps > train_steps {
            return bad(format!("inference_steps {steps} outside [1, {train_steps}]"));
        }
        let (lo, hi) = self.t_f_window;
        if lo == 0 || lo > hi || hi >= steps {
            return bad(format!("t_f window [{lo}, {hi}] must satisfy 1 <= T_min <= T_max < {steps}"));
        }
        if self.algorithm == Algorithm::Imagerefl {
            let (plo, phi) = self.t_prime_window;
            if plo <= hi || plo > phi || phi > steps {
                return bad(format!(
                    "t' window [{plo}, {phi}] must satisfy T_max = {hi} < Tp_min <= Tp_max <= {steps}"
                ));
            }
        }
        if !(self.guidance_scale >= 0.0) || !(0.0..=1.0).contains(&self.eta) {
            return bad("guidance_scale must be >= 0 and eta in [0, 1]".into());
        }
        Ok(())
    }

    /// Branch taken at 0-based step `k`: ImageReFL runs `ratio` ImageReFL
    /// steps followed by one ReFL step, repeating.
    pub fn branch_at(&self, k: usize) -> Branch {
        match self.algorithm {
            Algorithm::Pretrain => Branch::Pretrain,
            Algorithm::Refl => Branch::Refl,
            Algorithm::Imagerefl => {
                if (k + 1) % (self.imagerefl_to_refl_ratio + 1) == 0 {
                    Branch::Refl
                } else {
                    Branch::Imagerefl
                }
            }
        }
    }

    fn settings(&self, rng_seed: u64) -> StepSettings {
        StepSettings {
            kind: self.sampler_kind,
            eta: self.eta,
            guidance_scale: self.guidance_scale,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub branch: Branch,
    pub diffusion: Option<f64>,
    pub reward: Option<f64>,
    pub total: f64,
    pub mean_raw_reward: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Option<Gradients>,
    v: Option<Gradients>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: None,
            v: None,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, weights: &mut WeightMap, grads: &Gradients) {
        let c = &self.cfg;
        let m = self.m.get_or_insert_with(|| Gradients::zeros_like(weights));
        let v = self.v.get_or_insert_with(|| Gradients::zeros_like(weights));
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let w = &mut weights.get_mut(name).expect("gradient for a known weight").data;
            let (m, v) = (m.get_mut(name), v.get_mut(name));
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                w[i] -= c.lr * (update + c.weight_decay * w[i]);
            }
        }
    }
}

/// Mean over rows of `||eps - eps_hat||^2`, with `d/d eps_hat`.
pub fn diffusion_loss(eps: &Array2<f64>, eps_hat: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = eps.nrows().max(1) as f64;
    let diff = eps_hat - eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Eq.-1 noise-prediction loss at training timesteps `times` and its parameter gradient.
pub fn diffusion_grad(
    p: &DenoiserParams,
    s: &NoiseSchedule,
    x0: &Array2<f64>,
    conds: &[Condition],
    times: &[usize],
    eps: &Array2<f64>,
) -> Result<(f64, Gradients)> {
    let x_t = forward_noise_rows(s, x0, times, eps)?;
    let eval = predict_eps(p, &x_t, times, conds, GradMode::Track)?;
    let (loss, g) = diffusion_loss(eps, &eval.eps);
    let (grads, _) = eval.backward(p, &g)?;
    Ok((loss, grads))
}

/// Reward loss `-mean_i rescale(R(x0_hat_i, c_i))` terms.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTerms {
    pub loss: f64,
    pub mean_raw: f64,
    pub x0_hat: Array2<f64>,
}

fn reward_loss(reward: &RewardModel, x0_hat: &Array2<f64>, conds: &[Condition]) -> Result<(RewardTerms, Array2<f64>)> {
    let eval = reward.evaluate(x0_hat, conds, true)?;
    let mut g = eval.grad.expect("gradient requested");
    let n = x0_hat.nrows() as f64;
    let spec = reward.spec();
    let mut loss = 0.0;
    for (i, &raw) in eval.raw.iter().enumerate() {
        loss -= rescale_reward(spec, raw) / n;
        let d = -rescale_reward_grad(spec, raw) / n;
        g.row_mut(i).mapv_inplace(|v| v * d);
    }
    if !loss.is_finite() {
        return Err(Error::numeric("reward loss is not finite"));
    }
    let mean_raw = eval.raw.iter().sum::<f64>() / n;
    Ok((
        RewardTerms {
            loss,
            mean_raw,
            x0_hat: x0_hat.clone(),
        },
        g,
    ))
}

/// ReFL: denoise `x_T` over the whole inference schedule `inf`, predict `x0`
/// at `t_f` and differentiate the reward through that final prediction only.
pub fn refl_grad(
    p: &DenoiserParams,
    inf: &NoiseSchedule,
    reward: &RewardModel,
    x_t: &Array2<f64>,
    conds: &[Condition],
    t_f: usize,
    settings: &StepSettings,
) -> Result<(RewardTerms, Gradients)> {
    let starts = vec![inf.len(); x_t.nrows()];
    let ps = partial_sample_rows(p, inf, x_t, &starts, t_f, conds, true, settings)?;
    let (terms, g_x0) = reward_loss(reward, &ps.x0_hat, conds)?;
    let (grads, _) = ps.backward(p, &g_x0)?;
    Ok((terms, grads))
}

/// Everything drawn at random by one ImageReFL step.
#[derive(Debug, Clone)]
pub struct ImageReflDraw {
    /// Per-row start steps `t'`, inference indices.
    pub t_primes: Vec<usize>,
    pub eps: Array2<f64>,
    pub t_f: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ImageReflTerms {
    pub reward: Option<RewardTerms>,
    pub diffusion: f64,
    pub total: f64,
}

/// ImageReFL: noise real `x0` to `x_{t'}`, continue to `t_f` with the
/// trainable model and score the final `x0` prediction; adds the weighted
/// noise-prediction loss at `(x_{t'}, t')`. `reward = None` drops the reward term.
#[allow(clippy::too_many_arguments)]
pub fn imagerefl_grad(
    p: &DenoiserParams,
    inf: &NoiseSchedule,
    reward: Option<&RewardModel>,
    x0: &Array2<f64>,
    conds: &[Condition],
    draw: &ImageReflDraw,
    diffusion_loss_weight: f64,
    settings: &StepSettings,
) -> Result<(ImageReflTerms, Gradients)> {
    let times: Vec<usize> = draw.t_primes.iter().map(|&t| inf.model_time(t)).collect();
    let x_tp = forward_noise_rows(inf, x0, &draw.t_primes, &draw.eps)?;
    let eval = predict_eps(p, &x_tp, &times, conds, GradMode::Track)?;
    let (diffusion, g) = diffusion_loss(&draw.eps, &eval.eps);
    let (mut grads, _) = eval.backward(p, &g)?;
    grads.scale(diffusion_loss_weight);
    let mut total = diffusion_loss_weight * diffusion;
    let reward_terms = match reward {
        None => None,
        Some(r) => {
            let ps = partial_sample_rows(p, inf, &x_tp, &draw.t_primes, draw.t_f, conds, true, settings)?;
            let (terms, g_x0) = reward_loss(r, &ps.x0_hat, conds)?;
            ps.backward_into(p, &g_x0, &mut grads)?;
            total += terms.loss;
            Some(terms)
        }
    };
    Ok((
        ImageReflTerms {
            reward: reward_terms,
            diffusion,
            total,
        },
        grads,
    ))
}

/// Owns the trainable parameters and optimizer state.
pub struct Trainer {
    cfg: TrainConfig,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    inference: NoiseSchedule,
    reward: Option<RewardModel>,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    /// `reward` is required for ReFL and ImageReFL; its scale is replaced by
    /// `cfg.reward_scale`.
    pub fn new(
        cfg: TrainConfig,
        params: DenoiserParams,
        schedule: &NoiseSchedule,
        reward: Option<&RewardModel>,
    ) -> Result<Self> {
        if params.is_frozen() {
            return Err(Error::State(format!(
                "cannot train frozen parameters `{}`",
                params.name()
            )));
        }
        cfg.validate(schedule.len())?;
        let reward = match (cfg.algorithm, reward) {
            (Algorithm::Pretrain, _) => None,
            (_, None) => return Err(Error::config("reward fine-tuning needs a reward spec")),
            (_, Some(r)) => {
                let mut spec = r.spec().clone();
                spec.scale = cfg.reward_scale;
                Some(RewardModel::new(&spec)?)
            }
        };
        let inference = if cfg.algorithm == Algorithm::Pretrain {
            schedule.clone()
        } else {
            schedule.respace(cfg.inference_steps)?
        };
        Ok(Self {
            opt: AdamW::new(cfg.optimizer.clone()),
            cfg,
            params,
            schedule: schedule.clone(),
            inference,
            reward,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn into_params(self) -> DenoiserParams {
        self.params
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn step_rng(&self, tag: &str) -> ChaCha8Rng {
        rng_for(self.cfg.seed, tag, self.step as u64)
    }

    fn reward(&self) -> Result<&RewardModel> {
        self.reward
            .as_ref()
            .ok_or_else(|| Error::config("this trainer has no reward model"))
    }

    fn apply(&mut self, mut grads: Gradients) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::numeric("non-finite gradient; step aborted"));
        }
        let norm = grads.global_norm();
        if let Some(clip) = self.cfg.optimizer.grad_clip {
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let weights = self.params.weights_mut()?;
        self.opt.step(weights, &grads);
        self.step += 1;
        Ok(norm)
    }

    fn draw_t_f(&self, rng: &mut ChaCha8Rng) -> usize {
        let (lo, hi) = self.cfg.t_f_window;
        rng.random_range(lo..=hi)
    }

    /// One Eq.-1 update with uniform `t` and condition dropout.
    pub fn pretrain_step(&mut self, x0: &Array2<f64>, conds: &[Condition]) -> Result<StepReport> {
        let mut rng = self.step_rng("pretrain");
        let t_max = self.schedule.len();
        let conds: Vec<Condition> = conds
            .iter()
            .map(|&c| {
                if rng.random::<f64>() < self.cfg.cfg_dropout_prob {
                    Condition::Null
                } else {
                    c
                }
            })
            .collect();
        let times: Vec<usize> = (0..x0.nrows()).map(|_| rng.random_range(1..=t_max)).collect();
        let eps = standard_normal(x0.nrows(), x0.ncols(), &mut rng);
        let (loss, grads) = diffusion_grad(&self.params, &self.schedule, x0, &conds, &times, &eps)?;
        let step = self.step;
        let grad_norm = self.apply(grads)?;
        Ok(StepReport {
            step,
            branch: Branch::Pretrain,
            diffusion: Some(loss),
            reward: None,
            total: loss,
            mean_raw_reward: None,
            grad_norm,
        })
    }

    /// One ReFL update from pure noise; only the conditions are used.
    pub fn refl_step(&mut self, conds: &[Condition]) -> Result<StepReport> {
        let mut rng = self.step_rng("refl");
        let t_f = self.draw_t_f(&mut rng);
        let x_t = standard_normal(conds.len(), self.params.arch().data_dim(), &mut rng);
        let settings = self.cfg.settings(derive_seed(self.cfg.seed, "refl-noise", self.step as u64));
        let (terms, grads) = refl_grad(&self.params, &self.inference, self.reward()?, &x_t, conds, t_f, &settings)?;
        let step = self.step;
        let grad_norm = self.apply(grads)?;
        Ok(StepReport {
            step,
            branch: Branch::Refl,
            diffusion: None,
            reward: Some(terms.loss),
            total: terms.loss,
            mean_raw_reward: Some(terms.mean_raw),
            grad_norm,
        })
    }

    /// The random inputs [`Trainer::imagerefl_step`] would use for a batch of `rows`.
    pub fn imagerefl_draw(&self, rows: usize) -> ImageReflDraw {
        let mut rng = self.step_rng("imagerefl");
        let (plo, phi) = self.cfg.t_prime_window;
        let t_primes = (0..rows).map(|_| rng.random_range(plo..=phi)).collect();
        let eps = standard_normal(rows, self.params.arch().data_dim(), &mut rng);
        let t_f = self.draw_t_f(&mut rng);
        ImageReflDraw {
            t_primes,
            eps,
            t_f,
            rng_seed: derive_seed(self.cfg.seed, "imagerefl-noise", self.step as u64),
        }
    }

    /// One ImageReFL update on real samples.
    pub fn imagerefl_step(&mut self, x0: &Array2<f64>, conds: &[Condition]) -> Result<StepReport> {
        let draw = self.imagerefl_draw(x0.nrows());
        let settings = self.cfg.settings(draw.rng_seed);
        let (terms, grads) = imagerefl_grad(
            &self.params,
            &self.inference,
            Some(self.reward()?),
            x0,
            conds,
            &draw,
            self.cfg.diffusion_loss_weight,
            &settings,
        )?;
        let step = self.step;
        let grad_norm = self.apply(grads)?;
        let reward = terms.reward.expect("reward term requested");
        Ok(StepReport {
            step,
            branch: Branch::Imagerefl,
            diffusion: Some(terms.diffusion),
            reward: Some(reward.loss),
            total: terms.total,
            mean_raw_reward: Some(reward.mean_raw),
            grad_norm,
        })
    }

    /// Runs the branch scheduled for the current step.
    pub fn step(&mut self, x0: &Array2<f64>, conds: &[Condition]) -> Result<StepReport> {
        match self.cfg.branch_at(self.step) {
            Branch::Pretrain => self.pretrain_step(x0, conds),
            Branch::Refl => self.refl_step(conds),
            Branch::Imagerefl => self.imagerefl_step(x0, conds),
        }
    }
}

/// Training data: one row of `x0` per condition.
pub struct Dataset<'a> {
    pub x0: &'a Array2<f64>,
    pub conds: &'a [Condition],
}

/// Runs `cfg.epochs` passes over `data` in shuffled minibatches (reshuffled
/// each epoch from an epoch-derived seed; a trailing partial batch is
/// dropped), stopping early at `cfg.max_steps`. `observer` sees the
/// parameters after every step.
pub fn train_loop(
    cfg: &TrainConfig,
    data: &Dataset<'_>,
    s: &NoiseSchedule,
    reward: Option<&RewardModel>,
    p_init: DenoiserParams,
    mut observer: impl FnMut(&DenoiserParams, &StepReport) -> Result<()>,
) -> Result<(DenoiserParams, Vec<StepReport>)> {
    let n = data.x0.nrows();
    if data.conds.len() != n {
        return Err(Error::argument("one condition per training sample is required"));
    }
    let mut trainer = Trainer::new(cfg.clone(), p_init, s, reward)?;
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok((trainer.into_params(), Vec::new()));
    }
    if n < cfg.batch_size {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {n} training samples",
            cfg.batch_size
        )));
    }
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, "epoch", epoch as u64));
        for batch in order.chunks_exact(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trainer.steps_taken() >= m) {
                break 'epochs;
            }
            let x0 = data.x0.select(ndarray::Axis(0), batch);
            let conds: Vec<Condition> = batch.iter().map(|&i| data.conds[i]).collect();
            let report = trainer.step(&x0, &conds)?;
            observer(trainer.params(), &report)?;
            log.push(report);
        }
    }
    Ok((trainer.into_params(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, Arch, MlpArch};
    use crate::rewards::{RewardKind, RewardSpec};
    use crate::samplers::partial_sample;
    use crate::schedule::build_schedule;
    use crate::schedule::ScheduleKind;

    fn arch() -> Arch {
        Arch::Mlp(MlpArch {
            input_dim: 2,
            hidden: vec![16, 16],
            time_embed_dim: 8,
            class_embed_dim: 4,
            class_count: 3,
        })
    }

    fn schedule() -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, 100, 1e-3, 0.2).unwrap()
    }

    fn reward() -> RewardModel {
        let spec = RewardSpec::new(RewardKind::RegionTarget {
            targets: vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
        })
        .with_bounds((-1e9, 0.0));
        RewardModel::new(&spec).unwrap()
    }

    fn conds(n: usize) -> Vec<Condition> {
        (0..n).map(|i| Condition::Class(i % 3)).collect()
    }

    fn data(n: usize, seed: u64) -> Array2<f64> {
        standard_normal(n, 2, &mut rng_for(seed, "data", 0))
    }

    fn cfg(algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let eps = data(6, 1);
        let (loss, g) = diffusion_loss(&eps, &eps);
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_init_loss_is_near_data_dimension() {
        // Untrained output is close to zero, so the loss is E||eps||^2 = D.
        let p = init_denoiser(&arch(), 3).unwrap();
        let s = schedule();
        let n = 4000;
        let x0 = data(n, 2);
        let mut rng = rng_for(9, "t", 0);
        let times: Vec<usize> = (0..n).map(|_| rng.random_range(1..=100)).collect();
        let eps = standard_normal(n, 2, &mut rng);
        let (loss, _) = diffusion_grad(&p, &s, &x0, &conds(n), &times, &eps).unwrap();
        assert!((loss - 2.0).abs() < 0.25, "loss {loss}");
    }

    #[test]
    fn steps_are_deterministic() {
        let s = schedule();
        let x0 = data(8, 1);
        let run = |alg| {
            let mut t = Trainer::new(cfg(alg), init_denoiser(&arch(), 1).unwrap(), &s, Some(&reward())).unwrap();
            let a = t.step(&x0, &conds(8)).unwrap();
            let b = t.step(&x0, &conds(8)).unwrap();
            (a, b, t.params().checksum())
        };
        for alg in [Algorithm::Pretrain, Algorithm::Refl, Algorithm::Imagerefl] {
            assert_eq!(run(alg), run(alg));
        }
    }

    #[test]
    fn frozen_params_are_rejected() {
        let p = init_denoiser(&arch(), 1).unwrap().freeze();
        let err = Trainer::new(cfg(Algorithm::Refl), p, &schedule(), Some(&reward()));
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn config_windows_are_checked() {
        let mut c = cfg(Algorithm::Imagerefl);
        assert!(c.validate(100).is_ok());
        c.t_prime_window = (10, 14);
        assert!(c.validate(100).is_err());
        c = cfg(Algorithm::Refl);
        c.t_f_window = (0, 10);
        assert!(c.validate(100).is_err());
        c.t_f_window = (5, 40);
        assert!(c.validate(100).is_err());
        assert!("dpo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn clamped_reward_gives_zero_gradient() {
        let s = schedule().respace(40).unwrap();
        let spec = RewardSpec::new(RewardKind::Brightness).with_bounds((1e9, 2e9));
        let r = RewardModel::new(&spec).unwrap();
        let p = init_denoiser(&arch(), 2).unwrap();
        let (terms, g) = refl_grad(&p, &s, &r, &data(5, 3), &conds(5), 4, &StepSettings::default()).unwrap();
        assert_eq!(terms.loss, 0.0);
        assert!(g.is_zero());

        let draw = ImageReflDraw {
            t_primes: vec![12; 5],
            eps: data(5, 4),
            t_f: 3,
            rng_seed: 0,
        };
        let (_, g) = imagerefl_grad(&p, &s, Some(&r), &data(5, 5), &conds(5), &draw, 0.0, &StepSettings::default()).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn refl_matches_hand_assembled_chain() {
        let s = schedule().respace(40).unwrap();
        let p = init_denoiser(&arch(), 4).unwrap();
        let r = reward();
        let (x, c) = (data(6, 7), conds(6));
        let settings = StepSettings::default();
        let (terms, g) = refl_grad(&p, &s, &r, &x, &c, 5, &settings).unwrap();

        let frozen = p.clone().freeze();
        let prefix = partial_sample(&frozen, &s, &x, 40, 5, &c, true, &settings).unwrap();
        let x_tf = prefix.x_tf;
        let eval = predict_eps(&p, &x_tf, &vec![s.model_time(5); 6], &c, GradMode::Track).unwrap();
        let x0 = crate::samplers::predict_x0(&s, &eval.eps, &x_tf, 5).unwrap();
        assert_eq!(x0, terms.x0_hat);
        let re = r.evaluate(&x0, &c, true).unwrap();
        let mut g_x0 = re.grad.unwrap();
        for i in 0..6 {
            let d = -rescale_reward_grad(r.spec(), re.raw[i]) / 6.0;
            g_x0.row_mut(i).mapv_inplace(|v| v * d);
        }
        let (_, g_eps) = crate::samplers::predict_x0_backward(&s, 5, &g_x0).unwrap();
        let (oracle, _) = eval.backward(&p, &g_eps).unwrap();
        assert!(g.max_abs_diff(&oracle) <= 1e-15, "{}", g.max_abs_diff(&oracle));
        assert!(!g.is_zero());
    }

    #[test]
    fn imagerefl_without_reward_is_weighted_pretraining() {
        let s = schedule();
        let inf = s.respace(40).unwrap();
        let p = init_denoiser(&arch(), 5).unwrap();
        let (x0, c) = (data(6, 1), conds(6));
        let draw = ImageReflDraw {
            t_primes: vec![11, 12, 13, 14, 11, 12],
            eps: data(6, 2),
            t_f: 4,
            rng_seed: 0,
        };
        let (terms, g) = imagerefl_grad(&p, &inf, None, &x0, &c, &draw, 1.0, &StepSettings::default()).unwrap();
        // The inference step t' is training step model_time(t') with the same alpha_bar.
        let times: Vec<usize> = draw.t_primes.iter().map(|&t| inf.model_time(t)).collect();
        let (loss, oracle) = diffusion_grad(&p, &s, &x0, &c, &times, &draw.eps).unwrap();
        assert!((terms.diffusion - loss).abs() < 1e-12);
        assert!(g.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn loss_accounting_is_exact() {
        let s = schedule();
        let mut t = Trainer::new(cfg(Algorithm::Imagerefl), init_denoiser(&arch(), 1).unwrap(), &s, Some(&reward())).unwrap();
        let x0 = data(8, 3);
        for _ in 0..4 {
            let r = t.step(&x0, &conds(8)).unwrap();
            match r.branch {
                Branch::Imagerefl => {
                    let expect = r.reward.unwrap() + 1e-5 * r.diffusion.unwrap();
                    assert!((r.total - expect).abs() <= 1e-12);
                }
                Branch::Refl => assert_eq!(r.total, r.reward.unwrap()),
                Branch::Pretrain => unreachable!(),
            }
        }
    }

    #[test]
    fn alternation_and_loop_behaviour() {
        let s = schedule();
        let x0 = data(64, 1);
        let c = conds(64);
        let mut c_cfg = cfg(Algorithm::Imagerefl);
        c_cfg.epochs = 2;
        let p0 = init_denoiser(&arch(), 1).unwrap();
        let mut seen = 0;
        let data = Dataset { x0: &x0, conds: &c };
        let (p, log) = train_loop(&c_cfg, &data, &s, Some(&reward()), p0.clone(), |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(log.len(), 16);
        assert_eq!(seen, 16);
        for w in log.windows(4) {
            assert_eq!(w.iter().filter(|r| r.branch == Branch::Refl).count(), 1);
        }
        assert_ne!(p.checksum(), p0.checksum());

        let (again, _) = train_loop(&c_cfg, &data, &s, Some(&reward()), p0.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(again.checksum(), p.checksum());

        c_cfg.epochs = 0;
        let (same, log) = train_loop(&c_cfg, &data, &s, Some(&reward()), p0.clone(), |_, _| Ok(())).unwrap();
        assert!(log.is_empty());
        assert_eq!(same.checksum(), p0.checksum());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let p = init_denoiser(&arch(), 1).unwrap();
        let mut w = p.weights().clone();
        let mut g = p.zero_grads();
        g.get_mut("mlp.0.bias")[0] = 0.5;
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        });
        opt.step(&mut w, &g);
        let moved = p.weights()["mlp.0.bias"].data[0] - w["mlp.0.bias"].data[0];
        assert!((moved - 3e-4).abs() < 1e-10);
        assert_eq!(w["mlp.0.bias"].data[1], p.weights()["mlp.0.bias"].data[1]);
    }
}
