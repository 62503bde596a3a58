//! Distribution, diversity and alignment metrics over frozen feature maps.
//!
//! Feature extractors are seeded random maps standing in for pretrained
//! embedding networks: random Fourier features for point data and a random
//! convolution bank for tiny images. Covariance distances are defined here
//! as Frobenius norms of covariance (or matrix-log covariance) differences
//! divided by the feature dimension.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const LOG_COV_EPS: f64 = 1e-6;
const EIG_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExtractorSpec {
    Identity,
    /// `sqrt(2/D) cos(W x / lengthscale + b)`, `W ~ N(0, I)`, `b ~ U[0, 2 pi)`.
    RandomFourier {
        dim: usize,
        lengthscale: f64,
        seed: u64,
    },
    /// Random 3x3 filter bank, tanh, 2x2 average pooling.
    RandomConv {
        height: usize,
        width: usize,
        channels: usize,
        seed: u64,
    },
}

impl ExtractorSpec {
    /// Stable identifier, accepted back by [`ExtractorSpec::parse`].
    pub fn id(&self) -> String {
        match self {
            ExtractorSpec::Identity => "identity".into(),
            ExtractorSpec::RandomFourier {
                dim,
                lengthscale,
                seed,
            } => format!("rff:{dim}:{lengthscale}:{seed}"),
            ExtractorSpec::RandomConv {
                height,
                width,
                channels,
                seed,
            } => format!("randconv:{height}x{width}:{channels}:{seed}"),
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown feature extractor `{id}`"));
        let parts: Vec<&str> = id.split(':').collect();
        match parts.as_slice() {
            ["identity"] => Ok(ExtractorSpec::Identity),
            ["rff", dim, ls, seed] => Ok(ExtractorSpec::RandomFourier {
                dim: dim.parse().map_err(|_| bad())?,
                lengthscale: ls.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            }),
            ["randconv", hw, ch, seed] => {
                let (h, w) = hw.split_once('x').ok_or_else(bad)?;
                Ok(ExtractorSpec::RandomConv {
                    height: h.parse().map_err(|_| bad())?,
                    width: w.parse().map_err(|_| bad())?,
                    channels: ch.parse().map_err(|_| bad())?,
                    seed: seed.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

enum ExtractorImpl {
    Identity,
    Fourier { w: Array2<f64>, b: Vec<f64>, input_dim: usize },
    Conv {
        height: usize,
        width: usize,
        kernels: Vec<f64>,
        bias: Vec<f64>,
    },
}

/// A frozen feature map.
pub struct Extractor {
    spec: ExtractorSpec,
    inner: ExtractorImpl,
}

impl Extractor {
    /// `input_dim` is the flattened sample dimension the extractor will see.
    pub fn new(spec: &ExtractorSpec, input_dim: usize) -> Result<Self> {
        let inner = match spec {
            ExtractorSpec::Identity => ExtractorImpl::Identity,
            ExtractorSpec::RandomFourier {
                dim,
                lengthscale,
                seed,
            } => {
                if *dim == 0 || !(*lengthscale > 0.0) {
                    return Err(Error::config(format!("invalid extractor {}", spec.id())));
                }
                let mut rng = rng_for(*seed, "rff", 0);
                let w = Array2::from_shape_simple_fn((input_dim, *dim), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z / lengthscale
                });
                let b = (0..*dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                ExtractorImpl::Fourier { w, b, input_dim }
            }
            ExtractorSpec::RandomConv {
                height,
                width,
                channels,
                seed,
            } => {
                if height * width != input_dim || *channels == 0 {
                    return Err(Error::config(format!(
                        "extractor {} does not fit samples of dimension {input_dim}",
                        spec.id()
                    )));
                }
                let mut rng = rng_for(*seed, "randconv", 0);
                let kernels = (0..channels * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z / 3.0
                    })
                    .collect();
                let bias = (0..*channels).map(|_| rng.random_range(0.2..1.0)).collect();
                ExtractorImpl::Conv {
                    height: *height,
                    width: *width,
                    kernels,
                    bias,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            inner,
        })
    }

    pub fn id(&self) -> String {
        self.spec.id()
    }

    fn features_of(&self, x: ArrayView1<f64>) -> Vec<f64> {
        match &self.inner {
            ExtractorImpl::Identity => x.to_vec(),
            ExtractorImpl::Fourier { w, b, .. } => {
                let norm = (2.0 / b.len() as f64).sqrt();
                let proj = x.dot(w);
                proj.iter().zip(b).map(|(p, o)| norm * (p + o).cos()).collect()
            }
            ExtractorImpl::Conv {
                height,
                width,
                kernels,
                bias,
            } => {
                let (h, w) = (*height, *width);
                let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
                let mut out = vec![0.0; bias.len() * ph * pw];
                let mut counts = vec![0.0; ph * pw];
                for y in 0..h {
                    for xx in 0..w {
                        counts[(y / 2) * pw + xx / 2] += 1.0;
                    }
                }
                for (c, &bc) in bias.iter().enumerate() {
                    let k = &kernels[c * 9..(c + 1) * 9];
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc = bc;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xs) = (y + ky, xx + kx);
                                    if yy >= 1 && yy <= h && xs >= 1 && xs <= w {
                                        acc += k[ky * 3 + kx] * x[(yy - 1) * w + xs - 1];
                                    }
                                }
                            }
                            out[c * ph * pw + (y / 2) * pw + xx / 2] += acc.tanh();
                        }
                    }
                }
                for (i, v) in out.iter_mut().enumerate() {
                    *v /= counts[i % (ph * pw)];
                }
                out
            }
        }
    }

    pub fn extract(&self, samples: &Array2<f64>) -> Result<FeatureSet> {
        if let ExtractorImpl::Fourier { input_dim, .. } = &self.inner {
            if samples.ncols() != *input_dim {
                return Err(Error::argument(format!(
                    "extractor built for dimension {input_dim}, got {}",
                    samples.ncols()
                )));
            }
        }
        let rows: Vec<Vec<f64>> = samples.axis_iter(Axis(0)).map(|r| self.features_of(r)).collect();
        let dim = rows.first().map_or(0, |r| r.len());
        let features = Array2::from_shape_vec((rows.len(), dim), rows.into_iter().flatten().collect())
            .expect("rectangular features");
        FeatureSet::new(features, self.id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite feature row"));
        }
        Ok(Self {
            features,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

pub fn extract_features(samples: &Array2<f64>, spec: &ExtractorSpec) -> Result<FeatureSet> {
    Extractor::new(spec, samples.ncols())?.extract(samples)
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(f: &FeatureSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = f.features.dim();
    if n < 2 {
        return Err(Error::argument(format!("need at least 2 feature rows, got {n}")));
    }
    let mean = f.features.mean_axis(Axis(0)).expect("non-empty");
    let centered = &f.features - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let mut sigma = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok((DVector::from_iterator(d, mean.iter().copied()), sigma))
}

fn same_dims(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Eigenvalues clipped at zero; values below `-tol * max(1, |lambda|_max)` are errors.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIG_TOLERANCE * scale {
            return Err(Error::numeric(format!("{what} is not positive semi-definite (eigenvalue {v})")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn map_eigen(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let vals = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    &eig.eigenvectors * vals * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})` for explicit moments.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    sigma_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    sigma_b: &DMatrix<f64>,
) -> Result<f64> {
    let sqrt_a = map_eigen(&psd_eigen(sigma_a, "covariance")?, f64::sqrt);
    let inner = &sqrt_a * sigma_b * &sqrt_a;
    let cross: f64 = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + sigma_a.trace() + sigma_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    same_dims(a, b)?;
    let (ma, sa) = fit_gaussian(a)?;
    let (mb, sb) = fit_gaussian(b)?;
    frechet_from_moments(&ma, &sa, &mb, &sb)
}

/// `||S_a - S_b||_F / D`.
pub fn cov_distance_from_cov(sigma_a: &DMatrix<f64>, sigma_b: &DMatrix<f64>) -> f64 {
    (sigma_a - sigma_b).norm() / sigma_a.nrows() as f64
}

/// `||logm(S_a + eps I) - logm(S_b + eps I)||_F / D`.
pub fn log_cov_distance_from_cov(sigma_a: &DMatrix<f64>, sigma_b: &DMatrix<f64>) -> Result<f64> {
    let d = sigma_a.nrows();
    let log = |s: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let eig = psd_eigen(s, "covariance")?;
        Ok(map_eigen(&eig, |v| (v + LOG_COV_EPS).ln()))
    };
    Ok((log(sigma_a)? - log(sigma_b)?).norm() / d as f64)
}

pub fn cov_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    same_dims(a, b)?;
    Ok(cov_distance_from_cov(&fit_gaussian(a)?.1, &fit_gaussian(b)?.1))
}

pub fn log_cov_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    same_dims(a, b)?;
    log_cov_distance_from_cov(&fit_gaussian(a)?.1, &fit_gaussian(b)?.1)
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("zero-norm feature row"));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Mean over groups of the mean pairwise cosine distance within the group.
pub fn embedding_diversity_features(groups: &[Array2<f64>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::argument("no sample groups"));
    }
    let mut total = 0.0;
    for g in groups {
        let n = g.nrows();
        if n < 2 {
            return Err(Error::argument("each condition needs at least 2 samples"));
        }
        let norms: Vec<f64> = g.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
        if norms.iter().any(|v| *v == 0.0) {
            return Err(Error::numeric("zero-norm feature row"));
        }
        let gram = g.dot(&g.t());
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += 1.0 - gram[[i, j]] / (norms[i] * norms[j]);
            }
        }
        total += acc / (n * (n - 1) / 2) as f64;
    }
    Ok(total / groups.len() as f64)
}

pub fn embedding_diversity(groups: &[Array2<f64>], extractor: &Extractor) -> Result<f64> {
    let feats = groups
        .iter()
        .map(|g| Ok(extractor.extract(g)?.features))
        .collect::<Result<Vec<_>>>()?;
    embedding_diversity_features(&feats)
}

/// Frozen per-class prototype feature vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prototypes(pub BTreeMap<usize, Vec<f64>>);

impl Prototypes {
    /// Mean feature of each class in a labelled sample set.
    pub fn from_class_means(samples: &Array2<f64>, conds: &[Condition], extractor: &Extractor) -> Result<Self> {
        let feats = extractor.extract(samples)?.features;
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (row, c) in feats.axis_iter(Axis(0)).zip(conds) {
            if let Some(k) = c.class_id() {
                let e = sums.entry(k).or_insert_with(|| (vec![0.0; row.len()], 0));
                for (a, b) in e.0.iter_mut().zip(row.iter()) {
                    *a += b;
                }
                e.1 += 1;
            }
        }
        Ok(Self(
            sums.into_iter()
                .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
                .collect(),
        ))
    }
}

/// Mean cosine similarity between sample features and their class prototypes.
pub fn alignment_score_features(features: &Array2<f64>, conds: &[Condition], prototypes: &Prototypes) -> Result<f64> {
    if features.nrows() != conds.len() || conds.is_empty() {
        return Err(Error::argument("one condition per sample is required"));
    }
    let mut acc = 0.0;
    for (row, c) in features.axis_iter(Axis(0)).zip(conds) {
        let proto = c
            .class_id()
            .and_then(|k| prototypes.0.get(&k))
            .ok_or_else(|| Error::config(format!("no prototype for condition {c:?}")))?;
        if proto.len() != row.len() {
            return Err(Error::argument("prototype dimension does not match features"));
        }
        acc += cosine(row, ArrayView1::from(&proto[..]))?;
    }
    Ok(acc / conds.len() as f64)
}

pub fn alignment_score(
    samples: &Array2<f64>,
    conds: &[Condition],
    extractor: &Extractor,
    prototypes: &Prototypes,
) -> Result<f64> {
    alignment_score_features(&extractor.extract(samples)?.features, conds, prototypes)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::argument("spearman needs two equally long series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub const METRIC_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str =
    "seed,algorithm,t_prime,reward_mean,frechet,cov_distance,log_cov_distance,embedding_diversity,alignment";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub algorithm: String,
    pub t_prime: usize,
    pub reward_mean: f64,
    pub frechet: f64,
    pub cov_distance: f64,
    pub log_cov_distance: f64,
    pub embedding_diversity: f64,
    pub alignment: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub extractor_id: String,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.algorithm,
            self.t_prime,
            self.reward_mean,
            self.frechet,
            self.cov_distance,
            self.log_cov_distance,
            self.embedding_diversity,
            self.alignment
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serialises");
        v["schema_version"] = METRIC_SCHEMA_VERSION.into();
        v
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.reward_mean,
            self.frechet,
            self.cov_distance,
            self.log_cov_distance,
            self.embedding_diversity,
            self.alignment,
        ];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("metric report has non-finite entries"));
        }
        let tol = 1e-12;
        if !(-tol..=2.0 + tol).contains(&self.embedding_diversity)
            || !(-1.0 - tol..=1.0 + tol).contains(&self.alignment)
        {
            return Err(Error::numeric("diversity or alignment out of range"));
        }
        Ok(())
    }
}

/// Everything needed to turn generated samples into a [`MetricReport`].
pub struct Evaluator {
    pub extractor: Extractor,
    pub reference: FeatureSet,
    pub prototypes: Prototypes,
}

impl Evaluator {
    pub fn new(extractor: Extractor, reference_samples: &Array2<f64>, reference_conds: &[Condition]) -> Result<Self> {
        let reference = extractor.extract(reference_samples)?;
        let prototypes = Prototypes::from_class_means(reference_samples, reference_conds, &extractor)?;
        Ok(Self {
            extractor,
            reference,
            prototypes,
        })
    }

    /// Scores `samples`; `raw_rewards` are per-sample raw reward values.
    pub fn report(
        &self,
        samples: &Array2<f64>,
        conds: &[Condition],
        raw_rewards: &[f64],
        seed: u64,
        algorithm: &str,
        t_prime: usize,
    ) -> Result<MetricReport> {
        let feats = self.extractor.extract(samples)?;
        let mut groups: BTreeMap<Condition, Vec<usize>> = BTreeMap::new();
        for (i, c) in conds.iter().enumerate() {
            groups.entry(*c).or_default().push(i);
        }
        let grouped: Vec<Array2<f64>> = groups
            .values()
            .map(|idx| feats.features.select(Axis(0), idx))
            .collect();
        let report = MetricReport {
            seed,
            algorithm: algorithm.to_string(),
            t_prime,
            reward_mean: raw_rewards.iter().sum::<f64>() / raw_rewards.len().max(1) as f64,
            frechet: frechet_distance(&feats, &self.reference)?,
            cov_distance: cov_distance(&feats, &self.reference)?,
            log_cov_distance: log_cov_distance(&feats, &self.reference)?,
            embedding_diversity: embedding_diversity_features(&grouped)?,
            alignment: alignment_score_features(&feats.features, conds, &self.prototypes)?,
            n_generated: samples.nrows(),
            n_reference: self.reference.len(),
            extractor_id: self.extractor.id(),
        };
        report.validate()?;
        Ok(report)
    }
}
