//! Synthetic labelled datasets standing in for image-caption corpora.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Each class is a ring of equally weighted Gaussian modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points2dParams {
    pub classes: usize,
    pub modes_per_class: usize,
    /// Distance of each class centre from the origin.
    pub center_radius: f64,
    pub ring_radius: f64,
    pub mode_std: f64,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
}

impl Default for Points2dParams {
    fn default() -> Self {
        Self {
            classes: 3,
            modes_per_class: 6,
            center_radius: 1.5,
            ring_radius: 0.8,
            mode_std: 0.1,
            train_per_class: 2000,
            heldout_per_class: 1000,
        }
    }
}

impl Points2dParams {
    pub fn class_center(&self, k: usize) -> [f64; 2] {
        let a = 2.0 * PI * k as f64 / self.classes as f64;
        [self.center_radius * a.cos(), self.center_radius * a.sin()]
    }

    /// Location of mode `j` of class `k`.
    pub fn mode(&self, k: usize, j: usize) -> [f64; 2] {
        let c = self.class_center(k);
        let phase = PI * k as f64 / self.classes as f64;
        let a = phase + 2.0 * PI * j as f64 / self.modes_per_class as f64;
        [c[0] + self.ring_radius * a.cos(), c[1] + self.ring_radius * a.sin()]
    }

    /// Mean and (isotropic) per-coordinate variance of class `k`.
    pub fn class_moments(&self, k: usize) -> ([f64; 2], f64) {
        (
            self.class_center(k),
            self.ring_radius * self.ring_radius / 2.0 + self.mode_std * self.mode_std,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0
            || self.modes_per_class < 3
            || !(self.ring_radius > 0.0)
            || !(self.mode_std > 0.0)
            || !(self.center_radius >= 0.0)
            || self.train_per_class < 2
            || self.heldout_per_class < 2
        {
            return Err(Error::config(format!("invalid points2d parameters {self:?}")));
        }
        Ok(())
    }

    fn draw(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m = self.mode(k, rng.random_range(0..self.modes_per_class));
        m.iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(rng);
                c + self.mode_std * z
            })
            .collect()
    }
}

/// Procedural single-channel patterns in `[-1, 1]`: horizontal bar, vertical
/// bar, square blob and diagonal stroke, each at a random position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyImagesParams {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
}

impl Default for TinyImagesParams {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            classes: 4,
            noise_std: 0.05,
            train_per_class: 1000,
            heldout_per_class: 500,
        }
    }
}

pub const TINY_PATTERNS: usize = 4;

impl TinyImagesParams {
    fn validate(&self) -> Result<()> {
        if self.height < 4
            || self.width < 4
            || self.classes == 0
            || self.classes > TINY_PATTERNS
            || !(self.noise_std >= 0.0)
            || self.train_per_class < 2
            || self.heldout_per_class < 2
        {
            return Err(Error::config(format!("invalid tinyimages parameters {self:?}")));
        }
        Ok(())
    }

    fn draw(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let level = rng.random_range(0.5..1.0);
        let mut img = vec![-1.0; h * w];
        let mut on = |r: usize, c: usize| img[r * w + c] = level;
        match k {
            0 => {
                let r = rng.random_range(0..h);
                (0..w).for_each(|c| on(r, c));
            }
            1 => {
                let c = rng.random_range(0..w);
                (0..h).for_each(|r| on(r, c));
            }
            2 => {
                let (r0, c0) = (rng.random_range(0..h - 2), rng.random_range(0..w - 2));
                for r in r0..r0 + 3 {
                    for c in c0..c0 + 3 {
                        on(r, c);
                    }
                }
            }
            _ => {
                let off = rng.random_range(0..w) as isize - (w / 2) as isize;
                for r in 0..h {
                    let c = r as isize + off;
                    if (0..w as isize).contains(&c) {
                        on(r, c as usize);
                    }
                }
            }
        }
        for v in &mut img {
            let z: f64 = StandardNormal.sample(rng);
            *v += self.noise_std * z;
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum DataConfig {
    Points2d(Points2dParams),
    Tinyimages(TinyImagesParams),
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Points2d(p) => p.validate(),
            Self::Tinyimages(p) => p.validate(),
        }
    }

    pub fn task_name(&self) -> &'static str {
        match self {
            Self::Points2d(_) => "points2d",
            Self::Tinyimages(_) => "tinyimages",
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Points2d(p) => p.classes,
            Self::Tinyimages(p) => p.classes,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Self::Points2d(_) => 2,
            Self::Tinyimages(p) => p.height * p.width,
        }
    }

    fn split_sizes(&self) -> (usize, usize) {
        match self {
            Self::Points2d(p) => (p.train_per_class, p.heldout_per_class),
            Self::Tinyimages(p) => (p.train_per_class, p.heldout_per_class),
        }
    }

    fn draw(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Self::Points2d(p) => p.draw(k, rng),
            Self::Tinyimages(p) => p.draw(k, rng),
        }
    }
}

/// Samples with one condition per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x0: Array2<f64>,
    pub conds: Vec<Condition>,
    /// Generator draw index of each row.
    pub indices: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.x0 {
            h.update(v.to_le_bytes());
        }
        for c in &self.conds {
            h.update((c.class_id().map_or(u64::MAX, |k| k as u64)).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Train and held-out splits. Each class draws `train + heldout` samples
/// from its own stream; the first `train` draws form the training split.
pub fn synthesize_dataset(cfg: &DataConfig, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    cfg.validate()?;
    let (n_train, n_held) = cfg.split_sizes();
    let dim = cfg.data_dim();
    let mut train = (Vec::new(), Vec::new(), Vec::new());
    let mut held = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..cfg.classes() {
        let mut rng = rng_for(seed, cfg.task_name(), k as u64);
        for i in 0..n_train + n_held {
            let row = cfg.draw(k, &mut rng);
            let index = k * (n_train + n_held) + i;
            let dst = if i < n_train { &mut train } else { &mut held };
            dst.0.extend(row);
            dst.1.push(Condition::Class(k));
            dst.2.push(index);
        }
    }
    let pack = |(data, conds, indices): (Vec<f64>, Vec<Condition>, Vec<usize>)| LabeledSet {
        x0: Array2::from_shape_vec((conds.len(), dim), data).expect("rows have the data dimension"),
        conds,
        indices,
    };
    Ok((pack(train), pack(held)))
}
