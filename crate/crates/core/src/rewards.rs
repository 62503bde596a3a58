//! Differentiable toy reward models and the normalisation used during fine-tuning.
//!
//! Rewards are evaluated per sample on clean outputs `x0`. Raw scores are
//! mapped to `[0, 1]` with calibrated bounds and multiplied by `scale`
//! before they enter a loss.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::params::{
    decode_checkpoint, encode_checkpoint, read_text, write_text, CheckpointHeader, ParamLayout,
    ParamTensor, WeightMap,
};
use crate::rng::rng_for;

pub const DEFAULT_REWARD_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ParamLayout for ClassifierArch {
    fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        if self.input_dim == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(Error::config(format!("invalid classifier architecture {self:?}")));
        }
        Ok(vec![
            ("hidden.weight".into(), vec![self.input_dim, self.hidden]),
            ("hidden.bias".into(), vec![self.hidden]),
            ("logits.weight".into(), vec![self.hidden, self.classes]),
            ("logits.bias".into(), vec![self.classes]),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RewardKind {
    /// `-||x0 - target(c)||^2`, one target per class.
    RegionTarget { targets: Vec<Vec<f64>> },
    /// Cosine similarity between `tanh(W x0 + b)` and the same embedding of a class prototype.
    PrototypeSimilarity {
        prototypes: Vec<Vec<f64>>,
        embed_dim: usize,
        seed: u64,
    },
    /// Logit margin of the condition's class under a frozen seeded classifier.
    ClassifierMargin { arch: ClassifierArch, seed: u64 },
    /// Mean sample value.
    Brightness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub norm_lo: f64,
    pub norm_hi: f64,
    pub scale: f64,
}

impl RewardSpec {
    pub fn new(kind: RewardKind) -> Self {
        Self {
            kind,
            norm_lo: 0.0,
            norm_hi: 1.0,
            scale: DEFAULT_REWARD_SCALE,
        }
    }

    pub fn with_bounds(mut self, (lo, hi): (f64, f64)) -> Self {
        self.norm_lo = lo;
        self.norm_hi = hi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_lo < self.norm_hi) || !self.norm_lo.is_finite() || !self.norm_hi.is_finite() {
            return Err(Error::config(format!(
                "reward bounds must satisfy lo < hi, got [{}, {}]",
                self.norm_lo, self.norm_hi
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config(format!("reward scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }

    /// Parses a JSON reward spec; unknown kinds are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("reward spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Frozen two-layer tanh classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: ClassifierArch,
    seed: u64,
    weights: WeightMap,
}

impl Classifier {
    pub fn init(arch: &ClassifierArch, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "classifier", 0);
        let mut weights = WeightMap::new();
        for (name, shape) in arch.param_shapes()? {
            let mut t = ParamTensor::zeros(&shape);
            let std = if name.ends_with("bias") {
                0.5
            } else {
                (1.0 / shape[0] as f64).sqrt() * 2.0
            };
            for v in &mut t.data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
            weights.insert(name, t);
        }
        Ok(Self {
            arch: arch.clone(),
            seed,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            name: "reward_classifier".into(),
            arch: self.arch.clone(),
            seed: self.seed,
            frozen: true,
            metadata: None,
        };
        write_text(path, &encode_checkpoint(&header, &self.weights)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, weights) = decode_checkpoint::<ClassifierArch>(&read_text(path)?)?;
        Ok(Self {
            arch: h.arch,
            seed: h.seed,
            weights,
        })
    }

    /// Logits and hidden activations for one input.
    fn forward(&self, x: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let mut h = x.dot(&self.weights["hidden.weight"].view2());
        h += &self.weights["hidden.bias"].view1();
        h.mapv_inplace(f64::tanh);
        let mut logits = h.dot(&self.weights["logits.weight"].view2());
        logits += &self.weights["logits.bias"].view1();
        (logits, h)
    }

    /// Predicted class per row.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        x.rows()
            .into_iter()
            .map(|r| {
                let (l, _) = self.forward(&r.to_owned());
                argmax(l.iter().copied(), None)
            })
            .collect()
    }
}

fn argmax(values: impl Iterator<Item = f64>, skip: Option<usize>) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if Some(i) != skip && (best.0 == usize::MAX || v > best.1) {
            best = (i, v);
        }
    }
    best.0
}

enum Model {
    Region(Array2<f64>),
    Prototype {
        proj: Array2<f64>,
        bias: Array1<f64>,
        protos: Array2<f64>,
    },
    Classifier(Classifier),
    Brightness,
}

/// A reward spec instantiated into evaluable form.
pub struct RewardModel {
    spec: RewardSpec,
    model: Model,
}

/// Raw rewards and, when requested, `d raw_i / d x0_i` per row.
pub struct RewardEval {
    pub raw: Vec<f64>,
    pub grad: Option<Array2<f64>>,
}

fn table(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::config(format!("{what} must be a non-empty rectangular table")));
    }
    Ok(Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]))
}

fn tanh_embed(proj: &Array2<f64>, bias: &Array1<f64>, x: &Array1<f64>) -> Array1<f64> {
    (proj.dot(x) + bias).mapv(f64::tanh)
}

impl RewardModel {
    pub fn new(spec: &RewardSpec) -> Result<Self> {
        spec.validate()?;
        let model = match &spec.kind {
            RewardKind::RegionTarget { targets } => Model::Region(table(targets, "region targets")?),
            RewardKind::PrototypeSimilarity {
                prototypes,
                embed_dim,
                seed,
            } => {
                let protos = table(prototypes, "prototypes")?;
                if *embed_dim == 0 {
                    return Err(Error::config("prototype embedding dimension must be positive"));
                }
                let d = protos.ncols();
                let mut rng = rng_for(*seed, "prototype_embed", 0);
                let std = (1.0 / d as f64).sqrt();
                let proj = Array2::from_shape_simple_fn((*embed_dim, d), || {
                    std * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
                let bias = Array1::from_shape_simple_fn(*embed_dim, || {
                    0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
                let emb = Array2::from_shape_fn((protos.nrows(), *embed_dim), |(i, j)| {
                    tanh_embed(&proj, &bias, &protos.row(i).to_owned())[j]
                });
                Model::Prototype {
                    proj,
                    bias,
                    protos: emb,
                }
            }
            RewardKind::ClassifierMargin { arch, seed } => Model::Classifier(Classifier::init(arch, *seed)?),
            RewardKind::Brightness => Model::Brightness,
        };
        Ok(Self {
            spec: spec.clone(),
            model,
        })
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn classifier(&self) -> Option<&Classifier> {
        match &self.model {
            Model::Classifier(c) => Some(c),
            _ => None,
        }
    }

    fn class_of(&self, c: &Condition, classes: usize) -> Result<usize> {
        match c {
            Condition::Class(k) if *k < classes => Ok(*k),
            other => Err(Error::argument(format!(
                "reward needs a class label in [0, {classes}), got {other:?}"
            ))),
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let expected = match &self.model {
            Model::Region(t) => Some(t.ncols()),
            Model::Prototype { proj, .. } => Some(proj.ncols()),
            Model::Classifier(c) => Some(c.arch.input_dim),
            Model::Brightness => None,
        };
        match expected {
            Some(e) if e != dim => Err(Error::argument(format!(
                "reward expects samples of dimension {e}, got {dim}"
            ))),
            _ => Ok(()),
        }
    }

    /// Raw per-sample rewards; with `with_grad`, also their input gradients.
    pub fn evaluate(&self, x0: &Array2<f64>, conds: &[Condition], with_grad: bool) -> Result<RewardEval> {
        if conds.len() != x0.nrows() {
            return Err(Error::argument("one condition per sample is required"));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("reward input is not finite"));
        }
        self.check_dim(x0.ncols())?;
        let mut raw = Vec::with_capacity(x0.nrows());
        let mut grad = with_grad.then(|| Array2::zeros(x0.dim()));
        for (i, (row, c)) in x0.axis_iter(Axis(0)).zip(conds).enumerate() {
            let x = row.to_owned();
            let (value, g) = match &self.model {
                Model::Region(targets) => {
                    let k = self.class_of(c, targets.nrows())?;
                    let diff = &x - &targets.row(k);
                    (-diff.dot(&diff), diff * -2.0)
                }
                Model::Prototype { proj, bias, protos } => {
                    let k = self.class_of(c, protos.nrows())?;
                    let u = tanh_embed(proj, bias, &x);
                    let v = protos.row(k);
                    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
                    if nu == 0.0 || nv == 0.0 {
                        return Err(Error::numeric("zero-norm embedding in prototype reward"));
                    }
                    let cos = u.dot(&v) / (nu * nv);
                    let g_u = &v / (nu * nv) - &(&u * (cos / (nu * nu)));
                    let g_pre = g_u * u.mapv(|a| 1.0 - a * a);
                    (cos, proj.t().dot(&g_pre))
                }
                Model::Classifier(clf) => {
                    let k = self.class_of(c, clf.arch.classes)?;
                    let (logits, h) = clf.forward(&x);
                    let rival = argmax(logits.iter().copied(), Some(k));
                    let margin = logits[k] - logits[rival];
                    let w2 = clf.weights["logits.weight"].view2();
                    let g_h = &w2.column(k) - &w2.column(rival);
                    let g_pre = g_h * h.mapv(|a| 1.0 - a * a);
                    (margin, clf.weights["hidden.weight"].view2().dot(&g_pre))
                }
                Model::Brightness => {
                    let n = x.len() as f64;
                    (x.sum() / n, Array1::from_elem(x.len(), 1.0 / n))
                }
            };
            if !value.is_finite() {
                return Err(Error::numeric("reward is not finite"));
            }
            raw.push(value);
            if let Some(gr) = grad.as_mut() {
                gr.row_mut(i).assign(&g);
            }
        }
        Ok(RewardEval { raw, grad })
    }
}

pub fn eval_reward(r: &RewardModel, x0: &Array2<f64>, conds: &[Condition]) -> Result<Vec<f64>> {
    Ok(r.evaluate(x0, conds, false)?.raw)
}

/// `clamp((raw - lo) / (hi - lo), 0, 1) * scale`.
pub fn rescale_reward(r: &RewardSpec, raw: f64) -> f64 {
    ((raw - r.norm_lo) / (r.norm_hi - r.norm_lo)).clamp(0.0, 1.0) * r.scale
}

/// Derivative of [`rescale_reward`] w.r.t. `raw`; zero inside the clamped regions.
pub fn rescale_reward_grad(r: &RewardSpec, raw: f64) -> f64 {
    if raw > r.norm_lo && raw < r.norm_hi {
        r.scale / (r.norm_hi - r.norm_lo)
    } else {
        0.0
    }
}

/// Linear-interpolated percentile of already sorted values, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const MIN_CALIBRATION_SAMPLES: usize = 100;

/// 1st / 99th percentile bounds of raw rewards.
pub fn percentile_bounds(raw: &[f64]) -> Result<(f64, f64)> {
    if raw.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::config(format!(
            "reward calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {}",
            raw.len()
        )));
    }
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite raw reward during calibration"));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 1.0), percentile(&sorted, 99.0));
    if !(hi > lo) {
        return Err(Error::config(format!(
            "degenerate reward bounds [{lo}, {hi}]: raw rewards do not vary"
        )));
    }
    Ok((lo, hi))
}

/// Bounds from raw rewards of (base-model) samples.
pub fn calibrate_bounds(r: &RewardModel, x0: &Array2<f64>, conds: &[Condition]) -> Result<(f64, f64)> {
    percentile_bounds(&eval_reward(r, x0, conds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;
    use ndarray::array;
    use proptest::prelude::*;

    fn specs() -> Vec<(RewardSpec, usize)> {
        vec![
            (
                RewardSpec::new(RewardKind::RegionTarget {
                    targets: vec![vec![1.0, 0.5], vec![-1.0, 2.0]],
                }),
                2,
            ),
            (
                RewardSpec::new(RewardKind::PrototypeSimilarity {
                    prototypes: vec![vec![1.0, 0.0, 0.5], vec![0.0, -1.0, 0.2]],
                    embed_dim: 6,
                    seed: 3,
                }),
                3,
            ),
            (
                RewardSpec::new(RewardKind::ClassifierMargin {
                    arch: ClassifierArch {
                        input_dim: 4,
                        hidden: 7,
                        classes: 3,
                    },
                    seed: 1,
                }),
                4,
            ),
            (RewardSpec::new(RewardKind::Brightness), 5),
        ]
    }

    #[test]
    fn region_target_peaks_at_target() {
        let (spec, _) = &specs()[0];
        let m = RewardModel::new(spec).unwrap();
        let r = eval_reward(&m, &array![[1.0, 0.5], [0.0, 0.5]], &[Condition::Class(0); 2]).unwrap();
        assert_eq!(r, vec![0.0, -1.0]);
        assert!(eval_reward(&m, &array![[1.0, 0.5]], &[Condition::Null]).is_err());
        assert!(eval_reward(&m, &array![[1.0, 0.5, 1.0]], &[Condition::Class(0)]).is_err());
    }

    #[test]
    fn brightness_extremes() {
        let m = RewardModel::new(&RewardSpec::new(RewardKind::Brightness)).unwrap();
        let c = [Condition::Class(0); 2];
        let r = eval_reward(&m, &array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], &c).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (spec, dim) in specs() {
            let m = RewardModel::new(&spec).unwrap();
            let x = standard_normal(6, dim, &mut rng_for(11, "reward_fd", dim as u64));
            let conds: Vec<_> = (0..6).map(|i| Condition::Class(i % 2)).collect();
            let ev = m.evaluate(&x, &conds, true).unwrap();
            let grad = ev.grad.unwrap();
            let h = 1e-6;
            for i in 0..6 {
                for j in 0..dim {
                    let mut xp = x.clone();
                    xp[[i, j]] += h;
                    let mut xm = x.clone();
                    xm[[i, j]] -= h;
                    let fd = (eval_reward(&m, &xp, &conds).unwrap()[i] - eval_reward(&m, &xm, &conds).unwrap()[i])
                        / (2.0 * h);
                    let g = grad[[i, j]];
                    let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
                    assert!(rel <= 1e-4 || (fd - g).abs() < 1e-9, "{:?}: {fd} vs {g}", spec.kind);
                }
            }
        }
    }

    #[test]
    fn rescale_cases() {
        let spec = RewardSpec::new(RewardKind::Brightness).with_bounds((-2.0, 6.0));
        assert_eq!(rescale_reward(&spec, -2.0), 0.0);
        assert_eq!(rescale_reward(&spec, 6.0), 1e-3);
        assert!((rescale_reward(&spec, 2.0) - 0.5e-3).abs() < 1e-18);
        assert_eq!(rescale_reward(&spec, -10.0), 0.0);
        assert_eq!(rescale_reward(&spec, 60.0), 1e-3);
        assert_eq!(rescale_reward_grad(&spec, 60.0), 0.0);
        assert_eq!(rescale_reward_grad(&spec, 0.0), 1e-3 / 8.0);
    }

    proptest! {
        #[test]
        fn rescale_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let spec = RewardSpec::new(RewardKind::Brightness).with_bounds((-3.0, 4.0));
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(rescale_reward(&spec, lo) <= rescale_reward(&spec, hi));
        }

        #[test]
        fn argmax_survives_rescaling(raw in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let spec = RewardSpec::new(RewardKind::Brightness).with_bounds((-6.0, 6.0));
            let best_raw = argmax(raw.iter().copied(), None);
            let best_scaled = argmax(raw.iter().map(|r| rescale_reward(&spec, *r)), None);
            prop_assert_eq!(raw[best_raw], raw[best_scaled]);
        }
    }

    #[test]
    fn calibration_cases() {
        assert!(matches!(percentile_bounds(&[1.0; 200]), Err(Error::Config(_))));
        assert!(percentile_bounds(&[1.0; 50]).is_err());

        // 1-D samples spread uniformly over [-2, 2]; brightness is the identity.
        let n = 2001;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| -2.0 + 4.0 * i as f64 / (n - 1) as f64);
        let m = RewardModel::new(&RewardSpec::new(RewardKind::Brightness)).unwrap();
        let (lo, hi) = calibrate_bounds(&m, &x, &vec![Condition::Class(0); n]).unwrap();
        assert!((lo + 1.96).abs() < 1e-9 && (hi - 1.96).abs() < 1e-9, "{lo} {hi}");

        let spec = m.spec().clone().with_bounds((lo, hi));
        let med = rescale_reward(&spec, 0.0);
        assert!((med - 0.5 * spec.scale).abs() < 1e-12);
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        let text = r#"{"kind": {"type": "aesthetic"}, "norm_lo": 0, "norm_hi": 1, "scale": 0.001}"#;
        assert!(matches!(RewardSpec::from_json(text), Err(Error::Config(_))));
        let ok = r#"{"kind": {"type": "brightness"}, "norm_lo": 0, "norm_hi": 1, "scale": 0.001}"#;
        assert!(RewardSpec::from_json(ok).is_ok());
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ClassifierArch {
            input_dim: 3,
            hidden: 5,
            classes: 4,
        };
        let c = Classifier::init(&arch, 9).unwrap();
        c.save(&dir.path().join("clf.json")).unwrap();
        assert_eq!(Classifier::load(&dir.path().join("clf.json")).unwrap(), c);
    }
}
