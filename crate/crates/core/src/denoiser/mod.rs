//! Conditional noise predictor `eps(x_t, t, c)` with hand-written backprop.
//!
//! Two architectures are provided: an MLP for low-dimensional point data and
//! a small convolutional network for single-channel tiny images. Both take a
//! sinusoidal embedding of the training timestep and a learned class
//! embedding; the last row of the class table is the null (unconditional)
//! token used for classifier-free guidance.

mod conv;
mod mlp;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{
    decode_checkpoint, encode_checkpoint, read_text, validate_weights, weights_checksum,
    write_text, CheckpointHeader, Gradients, ParamLayout, ParamTensor, WeightMap,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvArch {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Arch {
    Mlp(MlpArch),
    Conv(ConvArch),
}

impl Arch {
    /// Flattened sample dimension.
    pub fn data_dim(&self) -> usize {
        match self {
            Arch::Mlp(m) => m.input_dim,
            Arch::Conv(c) => c.height * c.width,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Arch::Mlp(m) => m.class_count,
            Arch::Conv(c) => c.class_count,
        }
    }

    fn time_embed_dim(&self) -> usize {
        match self {
            Arch::Mlp(m) => m.time_embed_dim,
            Arch::Conv(c) => c.time_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (te, ce, classes) = match self {
            Arch::Mlp(m) => {
                if m.input_dim == 0 {
                    return Err(Error::config("mlp input_dim must be positive"));
                }
                if m.hidden.is_empty() || m.hidden.contains(&0) {
                    return Err(Error::config(format!(
                        "mlp hidden widths must be non-empty and positive, got {:?}",
                        m.hidden
                    )));
                }
                (m.time_embed_dim, m.class_embed_dim, m.class_count)
            }
            Arch::Conv(c) => {
                if c.height == 0 || c.width == 0 {
                    return Err(Error::config("conv image size must be positive"));
                }
                if c.channels.is_empty() || c.channels.contains(&0) {
                    return Err(Error::config(format!(
                        "conv channels must be non-empty and positive, got {:?}",
                        c.channels
                    )));
                }
                (c.time_embed_dim, c.class_embed_dim, c.class_count)
            }
        };
        if te == 0 || te % 2 != 0 {
            return Err(Error::config(format!(
                "time_embed_dim must be positive and even, got {te}"
            )));
        }
        if ce == 0 || classes == 0 {
            return Err(Error::config("class embedding size and class count must be positive"));
        }
        Ok(())
    }
}

impl ParamLayout for Arch {
    fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        Ok(match self {
            Arch::Mlp(m) => mlp::shapes(m),
            Arch::Conv(c) => conv::shapes(c),
        })
    }
}

/// Conditioning signal: a class label or the null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    pub fn class_id(&self) -> Option<usize> {
        match self {
            Condition::Class(c) => Some(*c),
            Condition::Null => None,
        }
    }

    fn table_row(&self, class_count: usize) -> Result<usize> {
        match *self {
            Condition::Class(c) if c < class_count => Ok(c),
            Condition::Class(c) => Err(Error::argument(format!(
                "class id {c} outside [0, {class_count})"
            ))),
            Condition::Null => Ok(class_count),
        }
    }

    /// The learned embedding vector for this condition.
    pub fn embedding(&self, p: &DenoiserParams) -> Result<Vec<f64>> {
        let row = self.table_row(p.arch.class_count())?;
        Ok(p.weights["class_embedding"].view2().row(row).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    name: String,
    arch: Arch,
    weights: WeightMap,
    frozen: bool,
    seed: u64,
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of integer timesteps, `[sin(t f_i) | cos(t f_i)]`.
pub fn time_embedding(times: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((times.len(), dim));
    for (r, &t) in times.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[r, i]] = arg.sin();
            out[[r, half + i]] = arg.cos();
        }
    }
    out
}

pub fn init_denoiser(arch: &Arch, seed: u64) -> Result<DenoiserParams> {
    let shapes = arch.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_layer = shapes
        .iter()
        .filter(|(n, _)| n.ends_with(".weight") || n.ends_with(".kernel"))
        .map(|(n, _)| n.clone())
        .next_back();
    let mut weights = WeightMap::new();
    for (name, shape) in shapes {
        let mut t = ParamTensor::zeros(&shape);
        let std = if name == "class_embedding" {
            1.0
        } else if name.ends_with(".bias") {
            0.0
        } else {
            let fan_in: usize = if name.ends_with(".kernel") {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let base = (1.0 / fan_in as f64).sqrt();
            if Some(&name) == last_layer.as_ref() {
                0.1 * base
            } else {
                base
            }
        };
        if std > 0.0 {
            for v in &mut t.data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        }
        weights.insert(name, t);
    }
    Ok(DenoiserParams {
        name: "denoiser".into(),
        arch: arch.clone(),
        weights,
        frozen: false,
        seed,
    })
}

impl DenoiserParams {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn weights(&self) -> &WeightMap {
        &self.weights
    }

    /// Mutable access to the weights; refused for frozen parameters.
    pub fn weights_mut(&mut self) -> Result<&mut WeightMap> {
        if self.frozen {
            return Err(Error::State(format!("parameters `{}` are frozen", self.name)));
        }
        Ok(&mut self.weights)
    }

    pub fn checksum(&self) -> String {
        weights_checksum(&self.weights)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros_like(&self.weights)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(|t| t.data.len()).sum()
    }

    /// Deep, trainable copy.
    pub fn clone_params(&self) -> Self {
        let mut c = self.clone();
        c.frozen = false;
        c
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }
}

/// Whether an evaluation records what backprop needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Track,
    /// Gradient isolation: the output is treated as a constant.
    Isolated,
}

enum Cache {
    Mlp(mlp::Cache),
    Conv(conv::Cache),
}

enum Trace {
    Single(Cache),
    Guided {
        uncond: Cache,
        cond: Cache,
        scale: f64,
    },
}

/// Output of one noise prediction, with the trace needed to backprop it.
pub struct EpsEval {
    pub eps: Array2<f64>,
    trace: Option<Trace>,
}

impl EpsEval {
    pub fn is_tracked(&self) -> bool {
        self.trace.is_some()
    }

    /// Accumulates `d loss / d params` into `grads` given `g_eps = d loss / d eps`
    /// and returns `d loss / d x_t`. Isolated evaluations contribute nothing.
    pub fn backward_into(
        &self,
        p: &DenoiserParams,
        g_eps: &Array2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        if g_eps.dim() != self.eps.dim() {
            return Err(Error::argument(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                g_eps.dim(),
                self.eps.dim()
            )));
        }
        let run = |cache: &Cache, g: &Array2<f64>, grads: &mut Gradients| match (&p.arch, cache) {
            (Arch::Mlp(a), Cache::Mlp(c)) => mlp::backward(a, &p.weights, c, g, grads),
            (Arch::Conv(a), Cache::Conv(c)) => conv::backward(a, &p.weights, c, g, grads),
            _ => unreachable!("trace recorded with a different architecture"),
        };
        Ok(match &self.trace {
            None => Array2::zeros(self.eps.dim()),
            Some(Trace::Single(c)) => run(c, g_eps, grads),
            Some(Trace::Guided {
                uncond,
                cond,
                scale,
            }) => {
                let gu = run(uncond, &(g_eps * (1.0 - scale)), grads);
                let gc = run(cond, &(g_eps * *scale), grads);
                gu + gc
            }
        })
    }

    pub fn backward(&self, p: &DenoiserParams, g_eps: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let mut grads = p.zero_grads();
        let gx = self.backward_into(p, g_eps, &mut grads)?;
        Ok((grads, gx))
    }
}

fn check_inputs(p: &DenoiserParams, x: &Array2<f64>, times: &[usize], conds: &[Condition]) -> Result<Vec<usize>> {
    if x.ncols() != p.arch.data_dim() {
        return Err(Error::argument(format!(
            "sample dimension {} does not match architecture ({})",
            x.ncols(),
            p.arch.data_dim()
        )));
    }
    if times.len() != x.nrows() || conds.len() != x.nrows() {
        return Err(Error::argument(format!(
            "batch of {} rows with {} timesteps and {} conditions",
            x.nrows(),
            times.len(),
            conds.len()
        )));
    }
    if times.contains(&0) {
        return Err(Error::argument("timesteps start at 1"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite denoiser input"));
    }
    conds
        .iter()
        .map(|c| c.table_row(p.arch.class_count()))
        .collect()
}

fn raw_forward(p: &DenoiserParams, x: &Array2<f64>, times: &[usize], rows: &[usize], keep: bool) -> (Array2<f64>, Option<Cache>) {
    let temb = time_embedding(times, p.arch.time_embed_dim());
    match &p.arch {
        Arch::Mlp(a) => {
            let (y, c) = mlp::forward(a, &p.weights, x, &temb, rows, keep);
            (y, c.map(Cache::Mlp))
        }
        Arch::Conv(a) => {
            let (y, c) = conv::forward(a, &p.weights, x, &temb, rows, keep);
            (y, c.map(Cache::Conv))
        }
    }
}

fn finite_output(eps: &Array2<f64>) -> Result<()> {
    if eps.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric("denoiser produced non-finite output"))
    }
}

/// Noise prediction for a batch; `times` are training timesteps, one per row.
pub fn predict_eps(
    p: &DenoiserParams,
    x_t: &Array2<f64>,
    times: &[usize],
    conds: &[Condition],
    mode: GradMode,
) -> Result<EpsEval> {
    let rows = check_inputs(p, x_t, times, conds)?;
    let (eps, cache) = raw_forward(p, x_t, times, &rows, mode == GradMode::Track);
    finite_output(&eps)?;
    Ok(EpsEval {
        eps,
        trace: cache.map(Trace::Single),
    })
}

/// Classifier-free guidance: `eps_u + scale * (eps_c - eps_u)`.
///
/// Scales 0 and 1 evaluate a single branch, so they reproduce the
/// unconditional and conditional predictions exactly.
pub fn predict_eps_cfg(
    p: &DenoiserParams,
    x_t: &Array2<f64>,
    times: &[usize],
    conds: &[Condition],
    guidance_scale: f64,
    mode: GradMode,
) -> Result<EpsEval> {
    if !(guidance_scale >= 0.0 && guidance_scale.is_finite()) {
        return Err(Error::argument(format!(
            "guidance scale must be finite and >= 0, got {guidance_scale}"
        )));
    }
    let nulls = vec![Condition::Null; conds.len()];
    if guidance_scale == 1.0 {
        return predict_eps(p, x_t, times, conds, mode);
    }
    if guidance_scale == 0.0 {
        return predict_eps(p, x_t, times, &nulls, mode);
    }
    let u = predict_eps(p, x_t, times, &nulls, mode)?;
    let c = predict_eps(p, x_t, times, conds, mode)?;
    let eps = &u.eps + &((&c.eps - &u.eps) * guidance_scale);
    finite_output(&eps)?;
    let trace = match (u.trace, c.trace) {
        (Some(Trace::Single(uncond)), Some(Trace::Single(cond))) => Some(Trace::Guided {
            uncond,
            cond,
            scale: guidance_scale,
        }),
        _ => None,
    };
    Ok(EpsEval { eps, trace })
}

pub fn save_checkpoint(p: &DenoiserParams, path: &Path, metadata: Option<serde_json::Value>) -> Result<()> {
    let header = CheckpointHeader {
        name: p.name.clone(),
        arch: p.arch.clone(),
        seed: p.seed,
        frozen: p.frozen,
        metadata,
    };
    write_text(path, &encode_checkpoint(&header, &p.weights)?)
}

/// Loads a checkpoint; fails if its weights do not match its architecture.
pub fn load_checkpoint(path: &Path) -> Result<(DenoiserParams, Option<serde_json::Value>)> {
    let text = read_text(path)?;
    let (h, weights) = decode_checkpoint::<Arch>(&text)?;
    validate_weights(&h.arch, &weights)?;
    Ok((
        DenoiserParams {
            name: h.name,
            arch: h.arch,
            weights,
            frozen: h.frozen,
            seed: h.seed,
        },
        h.metadata,
    ))
}
