//! Reverse-process generation.
//!
//! All samplers here take the training schedule and respace it to
//! `TrajectoryConfig::steps`; step indices (including the switch point) are
//! inference-step indices after respacing. Per-step noise comes from
//! [`NoiseStreams`] keyed by `rng_seed`, drawn at every step in a fixed
//! order, so base-only, fine-tuned-only and combined runs consume identical
//! noise.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_eps_cfg, Condition, DenoiserParams, EpsEval, GradMode};
use crate::error::{Error, Result};
use crate::params::Gradients;
use crate::rng::NoiseStreams;
use crate::schedule::{sampler_coeffs, NoiseSchedule, SamplerCoeffs, SamplerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub steps: usize,
    pub sampler_kind: SamplerKind,
    pub eta: f64,
    /// Classifier-free guidance scale for the base model.
    pub guidance_scale_base: f64,
    /// Guidance scale for the fine-tuned model; 1.0 is the plain conditional prediction.
    pub guidance_scale_ft: f64,
    /// Number of final steps taken by the fine-tuned model.
    pub switch_point: usize,
    pub rng_seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            sampler_kind: SamplerKind::Deterministic,
            eta: 0.0,
            guidance_scale_base: 7.5,
            guidance_scale_ft: 1.0,
            switch_point: 0,
            rng_seed: 0,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("trajectory needs at least one step"));
        }
        if self.switch_point > self.steps {
            return Err(Error::config(format!(
                "switch point {} outside [0, {}]",
                self.switch_point, self.steps
            )));
        }
        if !(self.guidance_scale_base >= 0.0 && self.guidance_scale_ft >= 0.0) {
            return Err(Error::config("guidance scales must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// `x_{t-1} = a * x_t + b * eps_hat + c * noise`.
pub fn reverse_step(
    coeffs: &SamplerCoeffs,
    x_t: &Array2<f64>,
    eps_hat: &Array2<f64>,
    noise: &Array2<f64>,
) -> Result<Array2<f64>> {
    if x_t.dim() != eps_hat.dim() || x_t.dim() != noise.dim() {
        return Err(Error::argument(format!(
            "reverse_step shapes differ: x {:?}, eps {:?}, noise {:?}",
            x_t.dim(),
            eps_hat.dim(),
            noise.dim()
        )));
    }
    let (a, b, c) = (coeffs.a, coeffs.b, coeffs.c);
    let mut out = Array2::zeros(x_t.dim());
    if c == 0.0 {
        Zip::from(&mut out)
            .and(x_t)
            .and(eps_hat)
            .for_each(|o, &x, &e| *o = a * x + b * e);
    } else {
        Zip::from(&mut out)
            .and(x_t)
            .and(eps_hat)
            .and(noise)
            .for_each(|o, &x, &e, &n| *o = a * x + b * e + c * n);
    }
    Ok(out)
}

fn check_alpha_bar(s: &NoiseSchedule, t: usize) -> Result<f64> {
    if t > s.len() {
        return Err(Error::argument(format!("step {t} outside [0, {}]", s.len())));
    }
    let ab = s.alpha_bar(t);
    if !(ab > 1e-12) {
        return Err(Error::numeric(format!("alpha_bar({t}) = {ab} underflows")));
    }
    Ok(ab)
}

/// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0(
    s: &NoiseSchedule,
    eps_hat: &Array2<f64>,
    x_t: &Array2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    if eps_hat.dim() != x_t.dim() {
        return Err(Error::argument("predict_x0: shape mismatch"));
    }
    let ab = check_alpha_bar(s, t)?;
    let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok((x_t - &(eps_hat * noise)) / sig)
}

/// Gradients of [`predict_x0`]: returns `(d/dx_t, d/deps_hat)` given `d/dx0_hat`.
pub fn predict_x0_backward(
    s: &NoiseSchedule,
    t: usize,
    g_x0: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let ab = check_alpha_bar(s, t)?;
    let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok((g_x0 / sig, g_x0 * (-noise / sig)))
}

fn eval_eps(
    p: &DenoiserParams,
    s: &NoiseSchedule,
    x: &Array2<f64>,
    t: usize,
    conds: &[Condition],
    guidance: f64,
    mode: GradMode,
) -> Result<EpsEval> {
    let times = vec![s.model_time(t); x.nrows()];
    predict_eps_cfg(p, x, &times, conds, guidance, mode)
}

fn check_batch(p: &DenoiserParams, x: &Array2<f64>, conds: &[Condition]) -> Result<()> {
    if x.ncols() != p.arch().data_dim() || x.nrows() != conds.len() {
        return Err(Error::argument(format!(
            "initial latent {:?} does not fit {} conditions of dimension {}",
            x.dim(),
            conds.len(),
            p.arch().data_dim()
        )));
    }
    Ok(())
}

/// Runs every inference step; `eps_at(t, x_t)` supplies the noise prediction.
fn denoise(
    s: &NoiseSchedule,
    x_start: &Array2<f64>,
    cfg: &TrajectoryConfig,
    mut eps_at: impl FnMut(&NoiseSchedule, usize, &Array2<f64>) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let inf = s.respace(cfg.steps)?;
    let mut streams = NoiseStreams::new(cfg.rng_seed, x_start.nrows(), x_start.ncols());
    let mut x = x_start.clone();
    for t in (1..=cfg.steps).rev() {
        let eps = eps_at(&inf, t, &x)?;
        let coeffs = sampler_coeffs(&inf, t, cfg.sampler_kind, cfg.eta)?;
        let noise = streams.draw();
        x = reverse_step(&coeffs, &x, &eps, &noise)?;
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("sampler produced non-finite values"));
    }
    Ok(x)
}

/// Full trajectory with one parameter set.
pub fn sample_trajectory(
    p: &DenoiserParams,
    s: &NoiseSchedule,
    x_t_start: &Array2<f64>,
    conds: &[Condition],
    guidance_scale: f64,
    cfg: &TrajectoryConfig,
) -> Result<Array2<f64>> {
    check_batch(p, x_t_start, conds)?;
    denoise(s, x_t_start, cfg, |inf, t, x| {
        Ok(eval_eps(p, inf, x, t, conds, guidance_scale, GradMode::Isolated)?.eps)
    })
}

/// Base model for steps `t > switch_point`, fine-tuned model for `t <= switch_point`.
pub fn combined_sample(
    p_base: &DenoiserParams,
    p_ft: &DenoiserParams,
    s: &NoiseSchedule,
    x_t_start: &Array2<f64>,
    conds: &[Condition],
    cfg: &TrajectoryConfig,
) -> Result<Array2<f64>> {
    if p_base.arch() != p_ft.arch() {
        return Err(Error::config("base and fine-tuned parameters have different architectures"));
    }
    check_batch(p_base, x_t_start, conds)?;
    denoise(s, x_t_start, cfg, |inf, t, x| {
        let eval = if t > cfg.switch_point {
            eval_eps(p_base, inf, x, t, conds, cfg.guidance_scale_base, GradMode::Isolated)?
        } else {
            eval_eps(p_ft, inf, x, t, conds, cfg.guidance_scale_ft, GradMode::Isolated)?
        };
        Ok(eval.eps)
    })
}

/// Interpolation-guidance baseline: every step uses
/// `(1 - lambda) * eps_base + lambda * eps_ft`.
pub fn interpolated_guidance_sample(
    p_base: &DenoiserParams,
    p_ft: &DenoiserParams,
    lambda: f64,
    s: &NoiseSchedule,
    x_t_start: &Array2<f64>,
    conds: &[Condition],
    cfg: &TrajectoryConfig,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::argument(format!("lambda {lambda} outside [0, 1]")));
    }
    if p_base.arch() != p_ft.arch() {
        return Err(Error::config("base and fine-tuned parameters have different architectures"));
    }
    check_batch(p_base, x_t_start, conds)?;
    denoise(s, x_t_start, cfg, |inf, t, x| {
        let b = eval_eps(p_base, inf, x, t, conds, cfg.guidance_scale_base, GradMode::Isolated)?;
        let f = eval_eps(p_ft, inf, x, t, conds, cfg.guidance_scale_ft, GradMode::Isolated)?;
        Ok(b.eps * (1.0 - lambda) + f.eps * lambda)
    })
}

/// Sampler settings used inside partial trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub kind: SamplerKind,
    pub eta: f64,
    pub guidance_scale: f64,
    pub rng_seed: u64,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Deterministic,
            eta: 0.0,
            guidance_scale: 1.0,
            rng_seed: 0,
        }
    }
}

struct StepRecord {
    coeffs: SamplerCoeffs,
    active: Vec<bool>,
    eval: EpsEval,
}

/// Result of a partial trajectory together with what is needed to backprop
/// a loss on `x0_hat` into the parameters.
pub struct PartialSample {
    pub x0_hat: Array2<f64>,
    /// The latent at the gradient-carrying step.
    pub x_tf: Array2<f64>,
    pub t_f: usize,
    truncated: bool,
    steps: Vec<StepRecord>,
    final_eval: EpsEval,
    schedule: NoiseSchedule,
}

impl PartialSample {
    /// Accumulates `d loss / d params` into `grads` given `g_x0 = d loss / d x0_hat`;
    /// returns the gradient w.r.t. the starting latent (zero when truncated).
    pub fn backward_into(
        &self,
        p: &DenoiserParams,
        g_x0: &Array2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let (mut g_x, g_eps) = predict_x0_backward(&self.schedule, self.t_f, g_x0)?;
        g_x += &self.final_eval.backward_into(p, &g_eps, grads)?;
        if self.truncated {
            return Ok(Array2::zeros(g_x.dim()));
        }
        for rec in self.steps.iter().rev() {
            let mut g_eps = Array2::zeros(g_x.dim());
            let mut g_prev = g_x.clone();
            for (i, &on) in rec.active.iter().enumerate() {
                if on {
                    g_eps.row_mut(i).assign(&(&g_x.row(i) * rec.coeffs.b));
                    g_prev.row_mut(i).assign(&(&g_x.row(i) * rec.coeffs.a));
                }
            }
            g_prev += &rec.eval.backward_into(p, &g_eps, grads)?;
            g_x = g_prev;
        }
        Ok(g_x)
    }

    pub fn backward(&self, p: &DenoiserParams, g_x0: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let mut grads = p.zero_grads();
        let g = self.backward_into(p, g_x0, &mut grads)?;
        Ok((grads, g))
    }
}

/// Continues denoising from `x_start` at step `t_start` down to `t_f`, then
/// predicts `x0` from `x_{t_f}`. `s` must already be the inference schedule.
///
/// With `truncate_grad`, every evaluation before `t_f` runs under gradient
/// isolation and only the final prediction carries gradient.
#[allow(clippy::too_many_arguments)]
pub fn partial_sample(
    p: &DenoiserParams,
    s: &NoiseSchedule,
    x_start: &Array2<f64>,
    t_start: usize,
    t_f: usize,
    conds: &[Condition],
    truncate_grad: bool,
    settings: &StepSettings,
) -> Result<PartialSample> {
    let starts = vec![t_start; x_start.nrows()];
    partial_sample_rows(p, s, x_start, &starts, t_f, conds, truncate_grad, settings)
}

/// [`partial_sample`] with a separate starting step per row. Rows join the
/// trajectory once the step counter reaches their own start.
#[allow(clippy::too_many_arguments)]
pub fn partial_sample_rows(
    p: &DenoiserParams,
    s: &NoiseSchedule,
    x_start: &Array2<f64>,
    starts: &[usize],
    t_f: usize,
    conds: &[Condition],
    truncate_grad: bool,
    settings: &StepSettings,
) -> Result<PartialSample> {
    check_batch(p, x_start, conds)?;
    if starts.len() != x_start.nrows() {
        return Err(Error::argument("one start step per row is required"));
    }
    if t_f == 0 {
        return Err(Error::argument("t_f must be >= 1"));
    }
    if let Some(&bad) = starts.iter().find(|&&t| t <= t_f || t > s.len()) {
        return Err(Error::argument(format!(
            "start step {bad} must lie in ({t_f}, {}]",
            s.len()
        )));
    }
    let prefix_mode = if truncate_grad {
        GradMode::Isolated
    } else {
        GradMode::Track
    };
    let top = *starts.iter().max().expect("non-empty batch");
    let mut streams = NoiseStreams::new(settings.rng_seed, x_start.nrows(), x_start.ncols());
    let mut x = x_start.clone();
    let mut steps = Vec::new();
    for t in (t_f + 1..=top).rev() {
        let eval = eval_eps(p, s, &x, t, conds, settings.guidance_scale, prefix_mode)?;
        let coeffs = sampler_coeffs(s, t, settings.kind, settings.eta)?;
        let noise = streams.draw();
        let stepped = reverse_step(&coeffs, &x, &eval.eps, &noise)?;
        let active: Vec<bool> = starts.iter().map(|&st| st >= t).collect();
        for (i, &on) in active.iter().enumerate() {
            if on {
                x.row_mut(i).assign(&stepped.row(i));
            }
        }
        if !truncate_grad {
            steps.push(StepRecord {
                coeffs,
                active,
                eval,
            });
        }
    }
    let final_eval = eval_eps(p, s, &x, t_f, conds, settings.guidance_scale, GradMode::Track)?;
    let x0_hat = predict_x0(s, &final_eval.eps, &x, t_f)?;
    Ok(PartialSample {
        x0_hat,
        x_tf: x,
        t_f,
        truncated: truncate_grad,
        steps,
        final_eval,
        schedule: s.clone(),
    })
}
