//! Experiment configuration, end-to-end runs, switch-point sweeps and output files.

mod data;
mod output;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use data::{
    synthesize_dataset, DataConfig, LabeledSet, Points2dParams, TinyImagesParams, TINY_PATTERNS,
};
pub use output::{
    emit_curves, emit_outputs, plot_training_curves, plot_tradeoff, read_curves_json, write_manifest,
    CurvePoint, Manifest, TrainingCurve, CURVE_HEADER,
};
pub use run::{
    build_evaluator, calibrate_reward, default_grid, evaluation_conditions, finetune, generate,
    pretrain_base, run_experiment, sweep_switch_point, Route, RunArtifacts, TradeoffCurve,
};

use crate::denoiser::{Arch, ConvArch, MlpArch};
use crate::error::{Error, Result};
use crate::metrics::ExtractorSpec;
use crate::params::{read_text, write_text};
use crate::rewards::{ClassifierArch, RewardKind};
use crate::rng::derive_seed;
use crate::samplers::TrajectoryConfig;
use crate::schedule::{ScheduleConfig, ScheduleKind};
use crate::trainers::{Algorithm, OptimizerConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Switch-point grid for a 40-step schedule.
pub const REFERENCE_GRID: [usize; 9] = [37, 35, 33, 30, 25, 20, 15, 8, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// Fixed normalisation bounds; calibrated on base samples when absent.
    pub bounds: Option<(f64, f64)>,
    pub calibration_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Samples per condition for every sweep row.
    pub samples_per_condition: usize,
    /// Size of the probe set traced during fine-tuning.
    pub probe_samples: usize,
    /// Optimizer steps between probe evaluations; 0 disables the trace.
    pub eval_every: usize,
    /// Optimizer steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub extractor: ExtractorSpec,
    /// Interpolation-guidance weights evaluated as a baseline.
    pub interp_lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub arch: Arch,
    pub reward: RewardConfig,
    pub pretrain: TrainConfig,
    pub finetune: Vec<TrainConfig>,
    pub trajectory: TrajectoryConfig,
    pub eval: EvalConfig,
    /// Switch points `T'` (number of final steps taken by the fine-tuned model).
    pub sweep_grid: Vec<usize>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.data.validate()?;
        let schedule = self.schedule.build()?;
        self.arch.validate()?;
        if self.arch.data_dim() != self.data.data_dim() || self.arch.class_count() != self.data.classes() {
            return Err(Error::config(
                "architecture does not match the dataset dimension or class count",
            ));
        }
        if self.pretrain.algorithm != Algorithm::Pretrain {
            return Err(Error::config("the pretrain section must use algorithm `pretrain`"));
        }
        self.pretrain.validate(schedule.len())?;
        let mut seen = Vec::new();
        for tc in &self.finetune {
            if tc.algorithm == Algorithm::Pretrain || seen.contains(&tc.algorithm) {
                return Err(Error::config("finetune entries must be distinct refl/imagerefl configs"));
            }
            seen.push(tc.algorithm);
            tc.validate(schedule.len())?;
            if tc.inference_steps != self.trajectory.steps {
                return Err(Error::config(
                    "fine-tuning and sampling must use the same number of inference steps",
                ));
            }
        }
        self.trajectory.validate()?;
        if self.trajectory.steps > schedule.len() {
            return Err(Error::config("more inference steps than training steps"));
        }
        if let Some(&bad) = self.sweep_grid.iter().find(|&&t| t > self.trajectory.steps) {
            return Err(Error::config(format!(
                "sweep point {bad} outside [0, {}]",
                self.trajectory.steps
            )));
        }
        if self.eval.samples_per_condition < 2 || self.eval.probe_samples < 2 * self.data.classes() {
            return Err(Error::config("evaluation needs at least two samples per condition"));
        }
        if self.eval.interp_lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::config("interpolation lambdas must lie in [0, 1]"));
        }
        if let Some((lo, hi)) = self.reward.bounds {
            if !(lo < hi) {
                return Err(Error::config("reward bounds must satisfy lo < hi"));
            }
        } else if self.reward.calibration_samples < crate::rewards::MIN_CALIBRATION_SAMPLES {
            return Err(Error::config("reward calibration needs at least 100 samples"));
        }
        Ok(())
    }

    /// Copies derived per-stage seeds into the sub-configs; the master seed
    /// determines everything else.
    pub fn resolve(mut self) -> Result<Self> {
        self.pretrain.seed = derive_seed(self.seed, "pretrain", 0);
        for tc in &mut self.finetune {
            tc.seed = derive_seed(self.seed, tc.algorithm.as_str(), 0);
        }
        self.trajectory.rng_seed = derive_seed(self.seed, "sampling", 0);
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn finetune_config(&self, algorithm: Algorithm) -> Result<&TrainConfig> {
        self.finetune
            .iter()
            .find(|t| t.algorithm == algorithm)
            .ok_or_else(|| Error::config(format!("no `{}` fine-tuning config", algorithm.as_str())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical pretty-printed JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json())
    }
}

fn finetune_template(algorithm: Algorithm, max_steps: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        algorithm,
        batch_size,
        epochs: 1000,
        max_steps: Some(max_steps),
        ..TrainConfig::default()
    }
}

/// Region targets at the first ring mode of every class.
pub fn points2d_targets(p: &Points2dParams) -> Vec<Vec<f64>> {
    (0..p.classes).map(|k| p.mode(k, 0).to_vec()).collect()
}

/// Named configuration templates: `points2d` (ReFL and ImageReFL on 2-D
/// rings with a region reward), `tinyimages` (8x8 patterns with a brightness
/// reward), `refl-sd15` (ReFL with the 10 base / 30 fine-tuned split) and
/// `imagerefl-sd15` (ImageReFL with the 30 base / 10 fine-tuned split).
pub fn template(name: &str) -> Result<ExperimentConfig> {
    let points = Points2dParams::default();
    let base = ExperimentConfig {
        version: CONFIG_VERSION,
        name: name.to_string(),
        seed: 0,
        data: DataConfig::Points2d(points.clone()),
        schedule: ScheduleConfig {
            kind: ScheduleKind::Cosine,
            ..ScheduleConfig::default()
        },
        arch: Arch::Mlp(MlpArch {
            input_dim: 2,
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            class_embed_dim: 16,
            class_count: points.classes,
        }),
        reward: RewardConfig {
            kind: RewardKind::RegionTarget {
                targets: points2d_targets(&points),
            },
            bounds: None,
            calibration_samples: 1500,
        },
        pretrain: TrainConfig {
            algorithm: Algorithm::Pretrain,
            optimizer: OptimizerConfig {
                lr: 2e-3,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
            batch_size: 256,
            epochs: 1000,
            max_steps: Some(4000),
            ..TrainConfig::default()
        },
        finetune: vec![
            finetune_template(Algorithm::Refl, 500, 64),
            finetune_template(Algorithm::Imagerefl, 500, 64),
        ],
        trajectory: TrajectoryConfig {
            switch_point: 30,
            guidance_scale_base: 6.0,
            ..TrajectoryConfig::default()
        },
        eval: EvalConfig {
            samples_per_condition: 200,
            probe_samples: 512,
            eval_every: 100,
            checkpoint_every: 0,
            extractor: ExtractorSpec::RandomFourier {
                dim: 64,
                lengthscale: 0.5,
                seed: 17,
            },
            interp_lambdas: vec![1.0],
        },
        sweep_grid: default_grid(40),
        output_dir: PathBuf::from("runs").join(name),
    };
    match name {
        "points2d" => Ok(base),
        "refl-sd15" => Ok(ExperimentConfig {
            finetune: vec![finetune_template(Algorithm::Refl, 500, 64)],
            trajectory: TrajectoryConfig {
                switch_point: 30,
                guidance_scale_base: 7.5,
                ..base.trajectory.clone()
            },
            ..base
        }),
        "imagerefl-sd15" => Ok(ExperimentConfig {
            finetune: vec![finetune_template(Algorithm::Imagerefl, 500, 64)],
            trajectory: TrajectoryConfig {
                switch_point: 10,
                guidance_scale_base: 7.5,
                ..base.trajectory.clone()
            },
            ..base
        }),
        "tinyimages" => {
            let tiny = TinyImagesParams::default();
            Ok(ExperimentConfig {
                data: DataConfig::Tinyimages(tiny.clone()),
                arch: Arch::Conv(ConvArch {
                    height: tiny.height,
                    width: tiny.width,
                    channels: vec![16, 16],
                    time_embed_dim: 16,
                    class_embed_dim: 8,
                    class_count: tiny.classes,
                }),
                reward: RewardConfig {
                    kind: RewardKind::Brightness,
                    bounds: None,
                    calibration_samples: 400,
                },
                pretrain: TrainConfig {
                    batch_size: 32,
                    max_steps: Some(3000),
                    ..base.pretrain.clone()
                },
                finetune: vec![
                    finetune_template(Algorithm::Refl, 300, 32),
                    finetune_template(Algorithm::Imagerefl, 300, 32),
                ],
                eval: EvalConfig {
                    samples_per_condition: 50,
                    probe_samples: 128,
                    extractor: ExtractorSpec::RandomConv {
                        height: tiny.height,
                        width: tiny.width,
                        channels: 8,
                        seed: 17,
                    },
                    ..base.eval.clone()
                },
                ..base
            })
        }
        "classifier" => {
            let tiny = template("tinyimages")?;
            Ok(ExperimentConfig {
                name: name.to_string(),
                reward: RewardConfig {
                    kind: RewardKind::ClassifierMargin {
                        arch: ClassifierArch {
                            input_dim: tiny.data.data_dim(),
                            hidden: 32,
                            classes: tiny.data.classes(),
                        },
                        seed: 5,
                    },
                    ..tiny.reward.clone()
                },
                output_dir: PathBuf::from("runs").join(name),
                ..tiny
            })
        }
        other => Err(Error::config(format!(
            "unknown template `{other}` (expected one of {})",
            TEMPLATE_NAMES.join(", ")
        ))),
    }
}

pub const TEMPLATE_NAMES: [&str; 5] = ["points2d", "refl-sd15", "imagerefl-sd15", "tinyimages", "classifier"];
