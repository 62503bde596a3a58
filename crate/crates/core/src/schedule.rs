//! Noise schedule, forward noising and reverse-step coefficients.
//!
//! Steps are indexed `t = 1..=T`; `t = 0` denotes the clean sample and
//! `alpha_bar(0) == 1`. A schedule may be a respaced subset of a longer
//! training schedule, in which case `model_time(t)` maps the step index back
//! to the training timestep the denoiser was conditioned on.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// DDPM ancestral sampling.
    Ancestral,
    /// The eta-parameterised DDIM family; `eta = 0` is fully deterministic.
    Deterministic,
}

/// Serialisable schedule parameters, as stored in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    /// 100 training steps with the betas of a 1000-step linear schedule
    /// on [1e-4, 0.02] scaled by ten, so the terminal signal level matches.
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
}

/// Reverse-step coefficients: `x_{t-1} = a * x_t + b * eps_hat + c * noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub kind: SamplerKind,
    pub eta: f64,
}

pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::config(format!(
            "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let offset = 0.008;
            let f = |t: f64| {
                ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, betas)
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit beta table.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let timesteps = (1..=betas.len()).collect();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            timesteps,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bars.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar` for `t = 1..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Training timesteps each step index maps to.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::argument(format!("step {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }

    /// `alpha_bar(t)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// The timestep passed to the denoiser for step index `t`.
    pub fn model_time(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    /// Uniform-stride subset of `steps` steps. Alpha-bars are copied from
    /// this schedule and the per-step alphas recomputed from their ratios.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps == total {
            return Ok(self.clone());
        }
        if steps == 0 || steps > total {
            return Err(Error::config(format!(
                "cannot respace a {total}-step schedule to {steps} steps"
            )));
        }
        let picked: Vec<usize> = (1..=steps).map(|i| i * total / steps).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut timesteps = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &picked {
            let ab = self.alpha_bar(t);
            alphas.push(ab / prev);
            alpha_bars.push(ab);
            timesteps.push(self.timesteps[t - 1]);
            prev = ab;
        }
        Ok(Self {
            kind: self.kind,
            betas: alphas.iter().map(|a| 1.0 - a).collect(),
            alphas,
            alpha_bars,
            timesteps,
        })
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(
    s: &NoiseSchedule,
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    s.check_step(t)?;
    check_same_shape(x0, eps, "forward_noise")?;
    let ab = s.alpha_bar(t);
    let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0 * sig + eps * noise)
}

/// Row-wise forward noising with a separate step per sample.
pub fn forward_noise_rows(
    s: &NoiseSchedule,
    x0: &Array2<f64>,
    ts: &[usize],
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_same_shape(x0, eps, "forward_noise")?;
    if ts.len() != x0.nrows() {
        return Err(Error::argument(format!(
            "forward_noise: {} steps for {} rows",
            ts.len(),
            x0.nrows()
        )));
    }
    let mut out = Array2::zeros(x0.dim());
    for (i, &t) in ts.iter().enumerate() {
        s.check_step(t)?;
        let ab = s.alpha_bar(t);
        let (sig, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut row = out.row_mut(i);
        row.assign(&(&x0.row(i) * sig + &eps.row(i) * noise));
    }
    Ok(out)
}

pub fn sampler_coeffs(
    s: &NoiseSchedule,
    t: usize,
    kind: SamplerKind,
    eta: f64,
) -> Result<SamplerCoeffs> {
    s.check_step(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::argument(format!("eta {eta} outside [0, 1]")));
    }
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t - 1);
    let coeffs = match kind {
        SamplerKind::Ancestral => {
            let alpha = ab / ab_prev;
            SamplerCoeffs {
                a: 1.0 / alpha.sqrt(),
                b: -(1.0 - alpha) / (alpha.sqrt() * (1.0 - ab).sqrt()),
                c: ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - alpha)).sqrt(),
                kind,
                eta,
            }
        }
        SamplerKind::Deterministic => {
            let sigma =
                eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let a = (ab_prev / ab).sqrt();
            SamplerCoeffs {
                a,
                b: dir - a * (1.0 - ab).sqrt(),
                c: sigma,
                kind,
                eta,
            }
        }
    };
    Ok(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn two_step() -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn two_step_products() {
        let s = two_step();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn forty_steps_strictly_decreasing() {
        let s = build_schedule(ScheduleKind::Linear, 40, 1e-4, 0.02).unwrap();
        for t in 1..=40 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(40) > 0.0);
    }

    #[test]
    fn thousand_step_terminal_alpha_bar() {
        // Independent cumulative product computed in log space with a
        // separately written beta grid: exp(sum ln(1 - beta_i)).
        let s = build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 999.0)).ln())
            .sum();
        let oracle = log_sum.exp();
        assert!((s.alpha_bar(1000) / oracle - 1.0).abs() < 1e-10);
        // Frozen value of the same product (Python float64 cumprod).
        assert!((s.alpha_bar(1000) - 4.035_829_765_375_676e-5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(matches!(
            build_schedule(ScheduleKind::Linear, 1, 0.1, 0.2),
            Err(Error::Config(_))
        ));
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s = build_schedule(ScheduleKind::Cosine, 50, 1e-4, 0.999).unwrap();
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn forward_noise_cases() {
        let s = two_step();
        let x0 = array![[1.0, -2.0]];
        let zero = Array2::zeros((1, 2));
        let eps = array![[0.5, 1.5]];
        let xt = forward_noise(&s, &x0, 2, &zero).unwrap();
        assert_eq!(xt, &x0 * s.alpha_bar(2).sqrt());
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let xt = forward_noise(&s, &zero, 2, &eps).unwrap();
        assert_eq!(xt, &eps * (1.0 - s.alpha_bar(2)).sqrt());
        let one = array![[1.0]];
        let xt = forward_noise(&s, &one, 2, &one).unwrap();
        assert!((xt[[0, 0]] - 1.377_678_399_636_775_2).abs() < 1e-12);
        assert!(matches!(
            forward_noise(&s, &x0, 2, &one),
            Err(Error::Argument(_))
        ));
        assert!(forward_noise(&s, &x0, 3, &eps).is_err());
    }

    #[test]
    fn deterministic_eta_zero_has_no_noise_term() {
        let s = build_schedule(ScheduleKind::Linear, 40, 1e-4, 0.02).unwrap();
        for t in 1..=40 {
            let c = sampler_coeffs(&s, t, SamplerKind::Deterministic, 0.0).unwrap();
            assert_eq!(c.c, 0.0);
        }
    }

    #[test]
    fn ancestral_first_step_has_no_noise_term() {
        let s = build_schedule(ScheduleKind::Linear, 40, 1e-4, 0.02).unwrap();
        let c = sampler_coeffs(&s, 1, SamplerKind::Ancestral, 0.0).unwrap();
        assert_eq!(c.c, 0.0);
    }

    #[test]
    fn ancestral_two_step_oracle() {
        // alpha_bar_1 = 0.9, alpha_bar_2 = 0.72, alpha_2 = 0.8
        let s = two_step();
        let c = sampler_coeffs(&s, 2, SamplerKind::Ancestral, 0.0).unwrap();
        let a = 1.0 / 0.8f64.sqrt();
        let b = -0.2 / (0.8f64.sqrt() * 0.28f64.sqrt());
        let var: f64 = (0.1 / 0.28) * 0.2;
        assert!((c.a - a).abs() < 1e-12);
        assert!((c.b - b).abs() < 1e-12);
        assert!((c.c - var.sqrt()).abs() < 1e-12);
        assert!((c.a - 1.118_033_988_749_895).abs() < 1e-12);
        assert!((c.b + 0.422_577_127_364_258_3).abs() < 1e-12);
        assert!((c.c - 0.267_261_241_912_424_4).abs() < 1e-12);
    }

    #[test]
    fn coeffs_reject_bad_step() {
        let s = two_step();
        assert!(matches!(
            sampler_coeffs(&s, 0, SamplerKind::Ancestral, 0.0),
            Err(Error::Argument(_))
        ));
        assert!(sampler_coeffs(&s, 3, SamplerKind::Deterministic, 0.0).is_err());
    }

    #[test]
    fn deterministic_step_walks_the_forward_marginals() {
        let s = build_schedule(ScheduleKind::Linear, 20, 1e-3, 0.2).unwrap();
        let x0 = array![[0.3, -1.2, 2.0]];
        let eps = array![[1.1, 0.4, -0.7]];
        for t in 1..=20 {
            let xt = forward_noise(&s, &x0, t, &eps).unwrap();
            let c = sampler_coeffs(&s, t, SamplerKind::Deterministic, 0.0).unwrap();
            let prev = &xt * c.a + &eps * c.b;
            let expected = if t == 1 {
                x0.clone()
            } else {
                forward_noise(&s, &x0, t - 1, &eps).unwrap()
            };
            for (p, e) in prev.iter().zip(expected.iter()) {
                assert!((p - e).abs() < 1e-10, "t={t}: {p} vs {e}");
            }
        }
    }

    #[test]
    fn respace_keeps_alpha_bars_and_maps_times() {
        let s = build_schedule(ScheduleKind::Linear, 100, 1e-3, 0.2).unwrap();
        let r = s.respace(40).unwrap();
        assert_eq!(r.len(), 40);
        assert_eq!(r.model_time(40), 100);
        assert_eq!(r.model_time(1), 2);
        for t in 1..=40 {
            assert_eq!(r.alpha_bar(t), s.alpha_bar(r.model_time(t)));
            assert!(r.alpha_bar(t) < r.alpha_bar(t - 1));
        }
        assert_eq!(s.respace(100).unwrap(), s);
        assert!(s.respace(0).is_err());
        assert!(s.respace(101).is_err());
    }

    proptest! {
        #[test]
        fn random_betas_satisfy_invariants(betas in prop::collection::vec(1e-6f64..0.5, 2..64)) {
            let s = NoiseSchedule::from_betas(ScheduleKind::Linear, betas).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=s.len() {
                prop_assert!(s.alpha(t) > 0.0 && s.alpha(t) <= 1.0);
                prop_assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            prop_assert!(s.alpha_bar(s.len()) > 0.0);
        }

        #[test]
        fn coefficient_noise_term_is_non_negative(t in 1usize..=30, eta in 0.0f64..=1.0) {
            let s = build_schedule(ScheduleKind::Linear, 30, 1e-3, 0.2).unwrap();
            for kind in [SamplerKind::Ancestral, SamplerKind::Deterministic] {
                let c = sampler_coeffs(&s, t, kind, eta).unwrap();
                prop_assert!(c.c >= 0.0);
            }
        }
    }
}
