//! Synthetic prediction logs with analytically controlled local
//! miscalibration.
//!
//! Samples are drawn from Gaussian clusters on a unit grid. Every sample's
//! reported confidence is a smooth logistic function of its distance to the
//! cluster center, while its true correctness probability is shifted by
//! `±bias_amplitude` with the sign alternating across grid-adjacent clusters.
//! Confidences are therefore identically distributed across clusters: the
//! per-bin bias cancels globally while each cluster (and each spatial
//! neighborhood) stays over- or under-confident — the regime local metrics
//! exist to detect. `bias_amplitude = 0` gives a calibrated generator.
//!
//! Randomness is derived per (seed, stream, sample-index), so growing `n`
//! never perturbs earlier draws.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binning::BinningScheme;
use crate::dataset::{Dataset, FeatureMatrix, PredictionRecord};
use crate::error::{CalibError, Result};
use crate::kernel::{KernelFamily, KernelSpec};

const STREAM_FEATURES: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_MC: u64 = 3;

const CONF_FLOOR: f64 = 0.05;
const CONF_CEIL: f64 = 0.95;

/// Generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    pub seed: u64,
    /// Bias amplitude `b` in `[0, 0.3]`.
    pub bias_amplitude: f64,
    /// Length scale: cluster standard deviation is `0.15 * scale` and the
    /// confidence profile varies over distances of this order.
    pub bias_length_scale: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CalibError::Argument("sample count must be >= 1".into()));
        }
        if self.d == 0 {
            return Err(CalibError::Argument("feature dimension must be >= 1".into()));
        }
        if self.clusters == 0 {
            return Err(CalibError::Argument("cluster count must be >= 1".into()));
        }
        if !(0.0..=0.3).contains(&self.bias_amplitude) {
            return Err(CalibError::Argument(format!(
                "bias amplitude must be in [0, 0.3], got {}",
                self.bias_amplitude
            )));
        }
        if !(self.bias_length_scale > 0.0) {
            return Err(CalibError::Argument(format!(
                "length scale must be > 0, got {}",
                self.bias_length_scale
            )));
        }
        Ok(())
    }

    /// Distinct cluster means on a unit grid.
    pub fn cluster_means(&self) -> Vec<Vec<f64>> {
        let side = (self.clusters as f64).powf(1.0 / self.d as f64).ceil() as usize;
        let side = side.max(2).min(self.clusters.max(2));
        (0..self.clusters)
            .map(|j| {
                let mut mean = vec![0.0; self.d];
                let mut rest = j;
                for coord in mean.iter_mut() {
                    *coord = (rest % side) as f64;
                    rest /= side;
                }
                mean
            })
            .collect()
    }

    /// Over/under-confidence sign: alternates across grid-adjacent clusters
    /// (checkerboard parity of the grid coordinates).
    pub fn bias_sign(&self, cluster: usize) -> f64 {
        let mean = &self.cluster_means()[cluster];
        let parity: i64 = mean.iter().map(|c| *c as i64).sum();
        if parity % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    fn cluster_sigma(&self) -> f64 {
        0.15 * self.bias_length_scale
    }

    /// Reported confidence as a function of the distance to the cluster mean.
    fn conf_of_dist(&self, dist: f64) -> f64 {
        let r0 = self.cluster_sigma() * (self.d as f64).sqrt();
        let s = 0.1 * self.bias_length_scale;
        let logistic = 1.0 / (1.0 + (-(r0 - dist) / s).exp());
        (0.5 + 0.3 * logistic).clamp(CONF_FLOOR, CONF_CEIL)
    }

    fn conf_and_p_star(&self, x: &[f64], cluster: usize, means: &[Vec<f64>]) -> (f64, f64) {
        let dist = l2(x, &means[cluster]);
        let conf = self.conf_of_dist(dist);
        let p_star =
            (conf - self.bias_sign(cluster) * self.bias_amplitude).clamp(0.0, 1.0);
        (conf, p_star)
    }
}

/// Per-sample ground truth of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    /// True correctness probability per sample.
    pub p_star: Vec<f64>,
    /// `conf - p_star` per sample.
    pub bias: Vec<f64>,
    /// Cluster index per sample.
    pub cluster: Vec<usize>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one (seed, stream, index) triple.
fn child_rng(seed: u64, stream: u64, index: u64) -> ChaCha12Rng {
    let mut state = seed;
    splitmix64(&mut state);
    state ^= stream;
    splitmix64(&mut state);
    state ^= index;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Generates a dataset and its ground truth. Cluster membership is
/// round-robin, so cluster sizes differ by at most one; correctness is the
/// only binary draw and is encoded as `y_true = 0` iff correct with
/// `y_pred = 0` fixed.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, SynthTruth)> {
    spec.validate()?;
    let means = spec.cluster_means();
    let sigma = spec.cluster_sigma();

    let mut records = Vec::with_capacity(spec.n);
    let mut values = Vec::with_capacity(spec.n * spec.d);
    let mut p_star = Vec::with_capacity(spec.n);
    let mut bias = Vec::with_capacity(spec.n);
    let mut cluster_of = Vec::with_capacity(spec.n);

    for i in 0..spec.n {
        let cluster = i % spec.clusters;
        let mut rng = child_rng(spec.seed, STREAM_FEATURES, i as u64);
        let x: Vec<f64> = means[cluster]
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (conf, p) = spec.conf_and_p_star(&x, cluster, &means);

        let mut label_rng = child_rng(spec.seed, STREAM_LABELS, i as u64);
        let correct = label_rng.random::<f64>() < p;

        records.push(PredictionRecord {
            id: format!("s{i:06}"),
            y_true: if correct { 0 } else { 1 },
            y_pred: 0,
            conf,
            probs: None,
            group: Some(format!("c{cluster}")),
        });
        values.extend_from_slice(&x);
        p_star.push(p);
        bias.push(conf - p);
        cluster_of.push(cluster);
    }

    let features = FeatureMatrix::new(spec.n, spec.d, values)?;
    let dataset = Dataset::with_class_count(records, features, 2)?;
    Ok((
        dataset,
        SynthTruth {
            spec: *spec,
            p_star,
            bias,
            cluster: cluster_of,
        },
    ))
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Number of draws that landed in the query's confidence bin.
    pub in_bin: usize,
}

/// Population signed local calibration error at a query point, estimated by
/// Monte Carlo over fresh draws from the generator distribution.
///
/// The correctness draw is integrated out analytically: each draw contributes
/// `(conf - p_star) * k` to the numerator and `k` to the denominator, both
/// masked by the query's confidence bin. The standard error of the ratio
/// comes from the delta method.
pub fn true_slce(
    truth: &SynthTruth,
    query_features: &[f64],
    query_conf: f64,
    spec: &KernelSpec,
    scheme: &BinningScheme,
    mc_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if mc_samples < 10_000 {
        return Err(CalibError::Argument(format!(
            "Monte-Carlo oracle needs >= 10000 draws, got {mc_samples}"
        )));
    }
    if spec.family == KernelFamily::GroupIndicator {
        return Err(CalibError::Capability(
            "the Monte-Carlo oracle supports feature-space kernels only".into(),
        ));
    }
    let gen = &truth.spec;
    if query_features.len() != gen.d || spec.dim != gen.d {
        return Err(CalibError::Argument(format!(
            "query/kernel dimension must match the generator dimension {}",
            gen.d
        )));
    }
    let query_bin = scheme.bin_index(query_conf)?;
    let means = gen.cluster_means();
    let sigma = gen.cluster_sigma();

    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut sum_aa = 0.0;
    let mut sum_bb = 0.0;
    let mut sum_ab = 0.0;
    let mut in_bin = 0usize;
    let mut x = vec![0.0; gen.d];
    for j in 0..mc_samples {
        let mut rng = child_rng(seed, STREAM_MC, j as u64);
        let cluster = rng.random_range(0..gen.clusters);
        for (xi, m) in x.iter_mut().zip(&means[cluster]) {
            *xi = m + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let (conf, p) = gen.conf_and_p_star(&x, cluster, &means);
        let (a, b) = if scheme.bin_index(conf)? == query_bin {
            in_bin += 1;
            let k = spec.eval(&x, query_features)?;
            ((conf - p) * k, k)
        } else {
            (0.0, 0.0)
        };
        sum_a += a;
        sum_b += b;
        sum_aa += a * a;
        sum_bb += b * b;
        sum_ab += a * b;
    }

    if in_bin == 0 || sum_b <= 0.0 {
        return Err(CalibError::InsufficientSupport(format!(
            "no Monte-Carlo draw landed in the query's bin {query_bin}"
        )));
    }
    let n = mc_samples as f64;
    let mean_a = sum_a / n;
    let mean_b = sum_b / n;
    let value = mean_a / mean_b;
    let var_a = (sum_aa / n - mean_a * mean_a).max(0.0);
    let var_b = (sum_bb / n - mean_b * mean_b).max(0.0);
    let cov_ab = sum_ab / n - mean_a * mean_b;
    let var_ratio =
        ((var_a - 2.0 * value * cov_ab + value * value * var_b) / (mean_b * mean_b) / n).max(0.0);
    Ok(McEstimate {
        value,
        std_error: var_ratio.sqrt(),
        in_bin,
    })
}
