//! Global, local, and group-wise calibration metrics.
//!
//! The local metrics weight each sample's confidence-accuracy residual by a
//! kernel similarity to the query and restrict the sum to the query's
//! confidence bin. Weights are computed as `exp(e_j - max e)` so the ratio is
//! exact in the wide-bandwidth limit and degrades gracefully to the nearest
//! neighbor as the bandwidth shrinks, instead of underflowing to 0/0.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::binning::BinningScheme;
use crate::dataset::{Dataset, FeatureMatrix};
use crate::error::{CalibError, Result};
use crate::kernel::{KernelFamily, KernelSpec};

/// Per-bin membership count and mean confidence/accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_conf: f64,
    pub mean_acc: f64,
}

/// Bin statistics over a dataset; empty bins have count 0 and are excluded
/// from ECE/MCE aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinStats {
    pub bins: Vec<BinStat>,
}

pub fn bin_stats(d: &Dataset, scheme: &BinningScheme) -> Result<BinStats> {
    let k = scheme.bins();
    let mut count = vec![0usize; k];
    let mut conf_sum = vec![0.0; k];
    let mut acc_sum = vec![0.0; k];
    for r in d.records() {
        let b = scheme.bin_index(r.conf)?;
        count[b] += 1;
        conf_sum[b] += r.conf;
        acc_sum[b] += if r.is_correct() { 1.0 } else { 0.0 };
    }
    let bins = (0..k)
        .map(|b| BinStat {
            count: count[b],
            mean_conf: if count[b] > 0 {
                conf_sum[b] / count[b] as f64
            } else {
                0.0
            },
            mean_acc: if count[b] > 0 {
                acc_sum[b] / count[b] as f64
            } else {
                0.0
            },
        })
        .collect();
    Ok(BinStats { bins })
}

/// Expected calibration error: bin-count-weighted mean absolute
/// confidence-accuracy gap over non-empty bins.
pub fn ece(d: &Dataset, scheme: &BinningScheme) -> Result<f64> {
    if d.is_empty() {
        return Err(CalibError::Argument("ECE of an empty dataset".into()));
    }
    let stats = bin_stats(d, scheme)?;
    let n = d.len() as f64;
    Ok(stats
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n) * (b.mean_conf - b.mean_acc).abs())
        .sum())
}

/// Maximum calibration error: the largest absolute confidence-accuracy gap
/// over non-empty bins.
pub fn mce(d: &Dataset, scheme: &BinningScheme) -> Result<f64> {
    if d.is_empty() {
        return Err(CalibError::Argument("MCE of an empty dataset".into()));
    }
    let stats = bin_stats(d, scheme)?;
    Ok(stats
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.mean_conf - b.mean_acc).abs())
        .fold(0.0, f64::max))
}

/// Floor applied to probabilities inside logarithms.
const LOG_CLAMP: f64 = 1e-12;

/// NLL and Brier score. When every record carries a full probability vector
/// the multiclass forms are used; otherwise both fall back to their binary
/// top-label versions on `(conf, correctness)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbMetrics {
    pub nll: f64,
    pub brier: f64,
    /// Number of samples whose probability was clamped before the logarithm.
    pub clamped: usize,
    /// Whether the binary top-label fallback was used.
    pub binary_fallback: bool,
}

pub fn prob_metrics(d: &Dataset) -> Result<ProbMetrics> {
    if d.is_empty() {
        return Err(CalibError::Argument("NLL/Brier of an empty dataset".into()));
    }
    let n = d.len() as f64;
    let multiclass = d.records().iter().all(|r| r.probs.is_some());
    let mut nll = 0.0;
    let mut brier = 0.0;
    let mut clamped = 0;
    for r in d.records() {
        if multiclass {
            let probs = r.probs.as_ref().unwrap();
            let p = probs[r.y_true];
            if p < LOG_CLAMP {
                clamped += 1;
            }
            nll -= p.max(LOG_CLAMP).ln();
            for (c, q) in probs.iter().enumerate() {
                let target = if c == r.y_true { 1.0 } else { 0.0 };
                brier += (q - target) * (q - target);
            }
        } else {
            let p = if r.is_correct() { r.conf } else { 1.0 - r.conf };
            if p < LOG_CLAMP {
                clamped += 1;
            }
            nll -= p.max(LOG_CLAMP).ln();
            let a = if r.is_correct() { 1.0 } else { 0.0 };
            brier += (r.conf - a) * (r.conf - a);
        }
    }
    Ok(ProbMetrics {
        nll: nll / n,
        brier: brier / n,
        clamped,
        binary_fallback: !multiclass,
    })
}

pub fn nll(d: &Dataset) -> Result<f64> {
    Ok(prob_metrics(d)?.nll)
}

pub fn brier(d: &Dataset) -> Result<f64> {
    Ok(prob_metrics(d)?.brier)
}

/// An evaluation point for the local metrics: a confidence (which selects the
/// bin) plus the feature vector or group label the kernel needs.
#[derive(Debug, Clone, Copy)]
pub struct QueryPoint<'a> {
    pub conf: f64,
    pub features: Option<&'a [f64]>,
    pub group: Option<&'a str>,
}

/// Shared state for batch local-metric evaluation.
struct LocalCtx<'a> {
    d: &'a Dataset,
    spec: &'a KernelSpec,
    residuals: Vec<f64>,
    members_by_bin: Vec<Vec<usize>>,
}

impl<'a> LocalCtx<'a> {
    fn new(d: &'a Dataset, spec: &'a KernelSpec, scheme: &BinningScheme) -> Result<Self> {
        if spec.family != KernelFamily::GroupIndicator && spec.dim != d.dim() {
            return Err(CalibError::Argument(format!(
                "kernel dimension {} does not match dataset feature dimension {}",
                spec.dim,
                d.dim()
            )));
        }
        let mut members_by_bin = vec![Vec::new(); scheme.bins()];
        for (i, r) in d.records().iter().enumerate() {
            members_by_bin[scheme.bin_index(r.conf)?].push(i);
        }
        let residuals = d
            .records()
            .iter()
            .map(|r| r.conf - if r.is_correct() { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            d,
            spec,
            residuals,
            members_by_bin,
        })
    }

    /// Signed kernel-weighted residual over the bin members; `None` when no
    /// member carries positive weight. `self_index` marks the query as a
    /// dataset member so its own weight is exactly 1 for every family.
    fn signed_gap(
        &self,
        members: &[usize],
        query: &QueryPoint<'_>,
        self_index: Option<usize>,
    ) -> Result<Option<f64>> {
        if members.is_empty() {
            return Ok(None);
        }
        match self.spec.family {
            KernelFamily::GroupIndicator => {
                let mut num = 0.0;
                let mut den = 0.0;
                for &j in members {
                    let w = if Some(j) == self_index {
                        1.0
                    } else {
                        self.spec
                            .eval_groups(query.group, self.d.records()[j].group.as_deref())
                    };
                    num += w * self.residuals[j];
                    den += w;
                }
                if den > 0.0 {
                    Ok(Some(num / den))
                } else {
                    Ok(None)
                }
            }
            _ => {
                let qf = query.features.ok_or_else(|| {
                    CalibError::Argument(
                        "feature-space kernel query needs a feature vector".into(),
                    )
                })?;
                let mut exps = Vec::with_capacity(members.len());
                let mut max_exp = f64::NEG_INFINITY;
                for &j in members {
                    let e = if Some(j) == self_index {
                        0.0
                    } else {
                        self.spec.log_weight(qf, self.d.features().row(j))?
                    };
                    if e > max_exp {
                        max_exp = e;
                    }
                    exps.push(e);
                }
                let mut num = 0.0;
                let mut den = 0.0;
                for (&j, &e) in members.iter().zip(&exps) {
                    let w = (e - max_exp).exp();
                    num += w * self.residuals[j];
                    den += w;
                }
                Ok(Some(num / den))
            }
        }
    }
}

/// Signed local calibration error of an external query against `d`.
pub fn slce_for_query(
    d: &Dataset,
    query: &QueryPoint<'_>,
    spec: &KernelSpec,
    scheme: &BinningScheme,
) -> Result<f64> {
    let ctx = LocalCtx::new(d, spec, scheme)?;
    let bin = scheme.bin_index(query.conf)?;
    ctx.signed_gap(&ctx.members_by_bin[bin], query, None)?
        .ok_or_else(|| {
            CalibError::InsufficientSupport(format!(
                "no dataset member supports the query (bin {bin})"
            ))
        })
}

/// Signed local calibration error at dataset member `i`.
pub fn slce_at(
    d: &Dataset,
    i: usize,
    spec: &KernelSpec,
    scheme: &BinningScheme,
) -> Result<f64> {
    if i >= d.len() {
        return Err(CalibError::Argument(format!(
            "index {i} outside dataset of length {}",
            d.len()
        )));
    }
    let ctx = LocalCtx::new(d, spec, scheme)?;
    let r = &d.records()[i];
    let bin = scheme.bin_index(r.conf)?;
    let query = QueryPoint {
        conf: r.conf,
        features: if d.dim() > 0 {
            Some(d.features().row(i))
        } else {
            None
        },
        group: r.group.as_deref(),
    };
    ctx.signed_gap(&ctx.members_by_bin[bin], &query, Some(i))?
        .ok_or_else(|| {
            CalibError::InsufficientSupport(format!("no support at dataset member {i}"))
        })
}

/// Local calibration error at dataset member `i` (absolute SLCE).
pub fn lce_at(d: &Dataset, i: usize, spec: &KernelSpec, scheme: &BinningScheme) -> Result<f64> {
    Ok(slce_at(d, i, spec, scheme)?.abs())
}

/// Per-sample local calibration errors with their maximum and mean.
#[derive(Debug, Clone, Serialize)]
pub struct LceReport {
    /// Per-sample LCE, aligned to record order.
    pub values: Vec<f64>,
    /// Per-sample signed LCE; `values[i] == signed[i].abs()`.
    pub signed: Vec<f64>,
    pub spec: KernelSpec,
    pub scheme: BinningScheme,
    /// Maximum LCE over the evaluation set.
    pub max: f64,
    pub mean: f64,
}

/// Computes the LCE at every record and summarizes the maximum (MLCE) and
/// mean. Queries run in parallel; the per-query summation order is fixed, so
/// results do not depend on the thread count.
pub fn mlce(d: &Dataset, spec: &KernelSpec, scheme: &BinningScheme) -> Result<LceReport> {
    if d.is_empty() {
        return Err(CalibError::Argument("MLCE of an empty dataset".into()));
    }
    let ctx = LocalCtx::new(d, spec, scheme)?;
    let bin_of: Vec<usize> = d
        .records()
        .iter()
        .map(|r| scheme.bin_index(r.conf))
        .collect::<Result<_>>()?;
    let signed: Vec<f64> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let r = &d.records()[i];
            let query = QueryPoint {
                conf: r.conf,
                features: if d.dim() > 0 {
                    Some(d.features().row(i))
                } else {
                    None
                },
                group: r.group.as_deref(),
            };
            Ok(ctx
                .signed_gap(&ctx.members_by_bin[bin_of[i]], &query, Some(i))?
                .expect("a record always supports itself"))
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = signed.iter().map(|s| s.abs()).collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(LceReport {
        values,
        signed,
        spec: spec.clone(),
        scheme: scheme.clone(),
        max,
        mean,
    })
}

/// Per-group MCE plus the maximum over groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMce {
    pub per_group: BTreeMap<String, f64>,
    pub max: f64,
}

/// MCE restricted to each group's records (bin statistics recomputed per
/// group under the same scheme). Records without a group are excluded.
pub fn group_mce(d: &Dataset, scheme: &BinningScheme) -> Result<GroupMce> {
    let mut grouped: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in d.records().iter().enumerate() {
        if let Some(g) = &r.group {
            grouped.entry(g.clone()).or_default().push(i);
        }
    }
    if grouped.is_empty() {
        return Err(CalibError::Argument(
            "group MCE needs at least one record with a group label".into(),
        ));
    }
    let k = scheme.bins();
    let mut per_group = BTreeMap::new();
    let mut max = 0.0f64;
    for (g, indices) in grouped {
        let mut count = vec![0usize; k];
        let mut conf_sum = vec![0.0; k];
        let mut acc_sum = vec![0.0; k];
        for &i in &indices {
            let r = &d.records()[i];
            let b = scheme.bin_index(r.conf)?;
            count[b] += 1;
            conf_sum[b] += r.conf;
            acc_sum[b] += if r.is_correct() { 1.0 } else { 0.0 };
        }
        let gap = (0..k)
            .filter(|&b| count[b] > 0)
            .map(|b| ((conf_sum[b] - acc_sum[b]) / count[b] as f64).abs())
            .fold(0.0, f64::max);
        max = max.max(gap);
        per_group.insert(g, gap);
    }
    Ok(GroupMce { per_group, max })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(CalibError::Argument(format!(
            "Pearson needs two equal-length series of >= 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CalibError::UndefinedCorrelation(
            "a series has zero variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One exported row of the LCE landscape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeRow {
    pub id: String,
    pub ex: f64,
    pub ey: f64,
    pub conf: f64,
    pub bin: usize,
    pub lce: f64,
    pub slce: f64,
}

/// Exports per-record LCE/SLCE values alongside 2-D plotting coordinates.
/// The kernel runs on the dataset's own features; `embed2d` only supplies the
/// coordinates.
pub fn lce_landscape(
    d: &Dataset,
    spec: &KernelSpec,
    scheme: &BinningScheme,
    embed2d: &FeatureMatrix,
) -> Result<Vec<LandscapeRow>> {
    if embed2d.d() != 2 {
        return Err(CalibError::Argument(format!(
            "landscape embedding must have 2 columns, got {}",
            embed2d.d()
        )));
    }
    if embed2d.n() != d.len() {
        return Err(CalibError::Argument(format!(
            "landscape embedding has {} rows but the dataset has {}",
            embed2d.n(),
            d.len()
        )));
    }
    let report = mlce(d, spec, scheme)?;
    d.records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(LandscapeRow {
                id: r.id.clone(),
                ex: embed2d.row(i)[0],
                ey: embed2d.row(i)[1],
                conf: r.conf,
                bin: scheme.bin_index(r.conf)?,
                lce: report.values[i],
                slce: report.signed[i],
            })
        })
        .collect()
}
