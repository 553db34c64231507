//! Post-hoc recalibration: the kernel-weighted local rule plus histogram
//! binning, temperature scaling, isotonic regression, and group-wise wrappers.
//!
//! The local rule resets a confidence to the kernel-weighted accuracy of the
//! reference points sharing its confidence bin. With a very wide bandwidth it
//! reproduces histogram binning; with a very narrow one it returns the
//! correctness bit of the most similar in-bin reference.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::BinningScheme;
use crate::dataset::{argmax_first, Dataset, FeatureMatrix, PredictionRecord};
use crate::error::{CalibError, Result};
use crate::kernel::{apply_pca, fit_pca, KernelFamily, KernelSpec, PcaTransform};

/// Default bandwidth when features go through the in-tool PCA reduction.
pub const DEFAULT_GAMMA_PCA: f64 = 0.4;
/// Default bandwidth for externally reduced (e.g. t-SNE) embeddings.
pub const DEFAULT_GAMMA_EXTERNAL: f64 = 0.2;

/// A recalibrated confidence plus whether a fallback path produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recalibrated {
    pub value: f64,
    /// True when the query had no in-bin support (or an unseen group) and the
    /// recalibration-set global accuracy was used instead.
    pub fallback: bool,
}

// ---------------------------------------------------------------------------
// LoRe

/// Fitted state of the local recalibration rule: the reference set verbatim,
/// the kernel and binning configuration, and the PCA transform when one is
/// used (so queries are projected identically to the references).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoReState {
    ref_confs: Vec<f64>,
    ref_correct: Vec<bool>,
    ref_groups: Vec<Option<String>>,
    ref_features: FeatureMatrix,
    spec: KernelSpec,
    scheme: BinningScheme,
    pca: Option<PcaTransform>,
    global_acc: f64,
}

impl LoReState {
    pub fn len(&self) -> usize {
        self.ref_confs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_confs.is_empty()
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn scheme(&self) -> &BinningScheme {
        &self.scheme
    }

    pub fn pca(&self) -> Option<&PcaTransform> {
        self.pca.as_ref()
    }

    fn members_by_bin(&self) -> Result<Vec<Vec<usize>>> {
        let mut members = vec![Vec::new(); self.scheme.bins()];
        for (i, c) in self.ref_confs.iter().enumerate() {
            members[self.scheme.bin_index(*c)?].push(i);
        }
        Ok(members)
    }

    /// Projects a query feature vector through the stored PCA transform, if any.
    fn query_features(&self, features: Option<&[f64]>) -> Result<Option<Vec<f64>>> {
        if self.spec.family == KernelFamily::GroupIndicator {
            return Ok(None);
        }
        let raw = features.ok_or_else(|| {
            CalibError::Argument("this recalibrator needs query features".into())
        })?;
        match &self.pca {
            Some(t) => Ok(Some(t.project_row(raw)?)),
            None => {
                if raw.len() != self.ref_features.d() {
                    return Err(CalibError::Argument(format!(
                        "query feature length {} does not match reference dimension {}",
                        raw.len(),
                        self.ref_features.d()
                    )));
                }
                Ok(Some(raw.to_vec()))
            }
        }
    }

    fn apply_with_members(
        &self,
        members: &[usize],
        features: Option<&[f64]>,
        group: Option<&str>,
    ) -> Result<Recalibrated> {
        if members.is_empty() {
            return Ok(Recalibrated {
                value: self.global_acc,
                fallback: true,
            });
        }
        match self.spec.family {
            KernelFamily::GroupIndicator => {
                let mut num = 0.0;
                let mut den = 0.0;
                for &j in members {
                    let w = self
                        .spec
                        .eval_groups(group, self.ref_groups[j].as_deref());
                    if self.ref_correct[j] {
                        num += w;
                    }
                    den += w;
                }
                if den > 0.0 {
                    Ok(Recalibrated {
                        value: num / den,
                        fallback: false,
                    })
                } else {
                    Ok(Recalibrated {
                        value: self.global_acc,
                        fallback: true,
                    })
                }
            }
            _ => {
                let qf = self.query_features(features)?.unwrap();
                let mut exps = Vec::with_capacity(members.len());
                let mut max_exp = f64::NEG_INFINITY;
                for &j in members {
                    let e = self.spec.log_weight(&qf, self.ref_features.row(j))?;
                    if e > max_exp {
                        max_exp = e;
                    }
                    exps.push(e);
                }
                let mut num = 0.0;
                let mut den = 0.0;
                for (&j, &e) in members.iter().zip(&exps) {
                    let w = (e - max_exp).exp();
                    if self.ref_correct[j] {
                        num += w;
                    }
                    den += w;
                }
                Ok(Recalibrated {
                    value: num / den,
                    fallback: false,
                })
            }
        }
    }

    /// Recalibrates one confidence. `features` are raw (pre-PCA) query
    /// features for the Laplacian/Gaussian families; `group` is the query's
    /// group for the group-indicator family.
    pub fn apply(
        &self,
        conf: f64,
        features: Option<&[f64]>,
        group: Option<&str>,
    ) -> Result<Recalibrated> {
        let bin = self.scheme.bin_index(conf)?;
        let members = self.members_by_bin()?;
        self.apply_with_members(&members[bin], features, group)
    }
}

/// Stores the recalibration set for the local rule. When `pca_dim` is set, a
/// PCA transform is fitted on the recalibration features and applied to both
/// references and (later) queries; the kernel dimension follows the stored
/// feature dimension.
pub fn fit_lore(
    recal: &Dataset,
    spec: &KernelSpec,
    scheme: &BinningScheme,
    pca_dim: Option<usize>,
) -> Result<LoReState> {
    if recal.is_empty() {
        return Err(CalibError::Argument(
            "local recalibration needs a non-empty reference set".into(),
        ));
    }
    let (ref_features, pca, dim) = match (spec.family, pca_dim) {
        (KernelFamily::GroupIndicator, _) => (FeatureMatrix::empty(recal.len()), None, 0),
        (_, Some(k)) => {
            let t = fit_pca(recal.features(), k)?;
            let projected = apply_pca(&t, recal.features())?;
            (projected, Some(t), k)
        }
        (_, None) => {
            if recal.dim() == 0 {
                return Err(CalibError::Argument(
                    "feature-space recalibration needs a feature matrix".into(),
                ));
            }
            (recal.features().clone(), None, recal.dim())
        }
    };
    let spec = if spec.family == KernelFamily::GroupIndicator {
        spec.clone()
    } else {
        KernelSpec::new(spec.family, spec.gamma, dim)?
    };
    let n_correct = recal.records().iter().filter(|r| r.is_correct()).count();
    Ok(LoReState {
        ref_confs: recal.records().iter().map(|r| r.conf).collect(),
        ref_correct: recal.records().iter().map(|r| r.is_correct()).collect(),
        ref_groups: recal.records().iter().map(|r| r.group.clone()).collect(),
        ref_features,
        spec,
        scheme: scheme.clone(),
        pca,
        global_acc: n_correct as f64 / recal.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Histogram binning

/// Per-bin accuracies; empty bins are `None` and fall back to the global
/// accuracy at apply time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HbState {
    scheme: BinningScheme,
    bin_acc: Vec<Option<f64>>,
    global_acc: f64,
}

impl HbState {
    pub fn scheme(&self) -> &BinningScheme {
        &self.scheme
    }

    pub fn bin_accuracies(&self) -> &[Option<f64>] {
        &self.bin_acc
    }

    pub fn apply(&self, conf: f64) -> Result<Recalibrated> {
        let bin = self.scheme.bin_index(conf)?;
        Ok(match self.bin_acc[bin] {
            Some(acc) => Recalibrated {
                value: acc,
                fallback: false,
            },
            None => Recalibrated {
                value: self.global_acc,
                fallback: true,
            },
        })
    }
}

pub fn fit_hb(recal: &Dataset, scheme: &BinningScheme) -> Result<HbState> {
    if recal.is_empty() {
        return Err(CalibError::Argument(
            "histogram binning needs a non-empty reference set".into(),
        ));
    }
    let k = scheme.bins();
    let mut count = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for r in recal.records() {
        let b = scheme.bin_index(r.conf)?;
        count[b] += 1;
        if r.is_correct() {
            correct[b] += 1;
        }
    }
    let bin_acc = (0..k)
        .map(|b| {
            if count[b] > 0 {
                Some(correct[b] as f64 / count[b] as f64)
            } else {
                None
            }
        })
        .collect();
    let n_correct = recal.records().iter().filter(|r| r.is_correct()).count();
    Ok(HbState {
        scheme: scheme.clone(),
        bin_acc,
        global_acc: n_correct as f64 / recal.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Temperature scaling

/// A single fitted temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsState {
    pub temperature: f64,
}

const TS_BRACKET: (f64, f64) = (0.05, 20.0);
const TS_TOL: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-12;

impl TsState {
    /// Rescales a probability vector: softmax of `ln(p) / T`.
    pub fn apply(&self, probs: &[f64]) -> Vec<f64> {
        scaled_softmax(probs, self.temperature)
    }
}

fn scaled_softmax(probs: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = probs.iter().map(|p| p.max(PROB_FLOOR).ln() / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Fits the temperature by minimizing NLL on the recalibration set with a
/// golden-section search over `[0.05, 20]`.
pub fn fit_ts(recal: &Dataset) -> Result<TsState> {
    if recal.is_empty() {
        return Err(CalibError::Argument(
            "temperature scaling needs a non-empty reference set".into(),
        ));
    }
    if recal.records().iter().any(|r| r.probs.is_none()) {
        return Err(CalibError::Capability(
            "temperature scaling needs full probability vectors on every record".into(),
        ));
    }
    let log_probs: Vec<(Vec<f64>, usize)> = recal
        .records()
        .iter()
        .map(|r| {
            let lp = r
                .probs
                .as_ref()
                .unwrap()
                .iter()
                .map(|p| p.max(PROB_FLOOR).ln())
                .collect();
            (lp, r.y_true)
        })
        .collect();

    let nll_at = |t: f64| -> f64 {
        let mut total = 0.0;
        for (lp, y) in &log_probs {
            let max = lp.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
            let log_z = lp.iter().map(|v| (v / t - max).exp()).sum::<f64>().ln() + max;
            total -= lp[*y] / t - log_z;
        }
        total / log_probs.len() as f64
    };

    let (mut lo, mut hi) = TS_BRACKET;
    log::debug!("temperature search bracket [{lo}, {hi}]");
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = nll_at(c);
    let mut fd = nll_at(d);
    while hi - lo > TS_TOL {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = nll_at(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = nll_at(d);
        }
    }
    Ok(TsState {
        temperature: (lo + hi) / 2.0,
    })
}

// ---------------------------------------------------------------------------
// Isotonic regression

/// A monotone step function fitted by pool-adjacent-violators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrState {
    /// Breakpoints (reference confidences, ascending).
    xs: Vec<f64>,
    /// Pooled values; non-decreasing, in `[0, 1]`.
    vs: Vec<f64>,
}

impl IrState {
    pub fn breakpoints(&self) -> (&[f64], &[f64]) {
        (&self.xs, &self.vs)
    }

    /// Value of the step containing `conf`, extrapolating flat beyond the
    /// fitted range.
    pub fn apply(&self, conf: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&conf) {
            return Err(CalibError::Argument(format!(
                "confidence {conf} outside [0, 1]"
            )));
        }
        let idx = self.xs.partition_point(|x| *x <= conf);
        Ok(if idx == 0 { self.vs[0] } else { self.vs[idx - 1] })
    }
}

/// Pool-adjacent-violators on (confidence ascending, correctness) pairs.
pub fn fit_ir(recal: &Dataset) -> Result<IrState> {
    if recal.is_empty() {
        return Err(CalibError::Argument(
            "isotonic regression needs a non-empty reference set".into(),
        ));
    }
    let mut pairs: Vec<(f64, f64)> = recal
        .records()
        .iter()
        .map(|r| (r.conf, if r.is_correct() { 1.0 } else { 0.0 }))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Blocks of (pooled mean, count); a new point that breaks monotonicity is
    // merged backwards until the sequence is non-decreasing.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(pairs.len());
    for &(_, y) in &pairs {
        blocks.push((y, 1));
        while blocks.len() >= 2 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 > m2 {
                blocks.pop();
                blocks.pop();
                let merged = (m1 * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64;
                blocks.push((merged, c1 + c2));
            } else {
                break;
            }
        }
    }

    let mut vs = Vec::with_capacity(pairs.len());
    for (mean, count) in blocks {
        vs.extend(std::iter::repeat(mean).take(count));
    }
    Ok(IrState {
        xs: pairs.into_iter().map(|(x, _)| x).collect(),
        vs,
    })
}

// ---------------------------------------------------------------------------
// Group-wise wrappers

/// Independent histogram binning per group, with a global fit as the fallback
/// for unseen groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHbState {
    per_group: BTreeMap<String, HbState>,
    global: HbState,
}

impl GroupHbState {
    pub fn groups(&self) -> impl Iterator<Item = &str> {
        self.per_group.keys().map(|s| s.as_str())
    }

    pub fn apply(&self, conf: f64, group: Option<&str>) -> Result<Recalibrated> {
        match group.and_then(|g| self.per_group.get(g)) {
            Some(state) => state.apply(conf),
            None => {
                let r = self.global.apply(conf)?;
                Ok(Recalibrated {
                    value: r.value,
                    fallback: true,
                })
            }
        }
    }
}

/// Independent temperature per group, with a global temperature for unseen
/// groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTsState {
    per_group: BTreeMap<String, TsState>,
    global: TsState,
}

impl GroupTsState {
    pub fn apply(&self, probs: &[f64], group: Option<&str>) -> (Vec<f64>, bool) {
        match group.and_then(|g| self.per_group.get(g)) {
            Some(state) => (state.apply(probs), false),
            None => (self.global.apply(probs), true),
        }
    }
}

fn split_by_group(recal: &Dataset) -> Result<BTreeMap<String, Vec<PredictionRecord>>> {
    let mut grouped: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for r in recal.records() {
        if let Some(g) = &r.group {
            grouped.entry(g.clone()).or_default().push(r.clone());
        }
    }
    if grouped.is_empty() {
        return Err(CalibError::Argument(
            "group-wise recalibration needs group labels on the reference set".into(),
        ));
    }
    Ok(grouped)
}

pub fn fit_group_hb(recal: &Dataset, scheme: &BinningScheme) -> Result<GroupHbState> {
    let mut per_group = BTreeMap::new();
    for (g, records) in split_by_group(recal)? {
        let n = records.len();
        let sub = Dataset::with_class_count(records, FeatureMatrix::empty(n), recal.class_count())?;
        per_group.insert(g, fit_hb(&sub, scheme)?);
    }
    Ok(GroupHbState {
        per_group,
        global: fit_hb(recal, scheme)?,
    })
}

pub fn fit_group_ts(recal: &Dataset) -> Result<GroupTsState> {
    let mut per_group = BTreeMap::new();
    for (g, records) in split_by_group(recal)? {
        let n = records.len();
        let sub = Dataset::with_class_count(records, FeatureMatrix::empty(n), recal.class_count())?;
        per_group.insert(g, fit_ts(&sub)?);
    }
    Ok(GroupTsState {
        per_group,
        global: fit_ts(recal)?,
    })
}

// ---------------------------------------------------------------------------
// Unified recalibrator, batch application, persistence

/// Any fitted recalibration method, tagged for persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Recalibrator {
    Lore(LoReState),
    Hb(HbState),
    Ts(TsState),
    Ir(IrState),
    GroupHb(GroupHbState),
    GroupTs(GroupTsState),
}

impl Recalibrator {
    pub fn method_name(&self) -> &'static str {
        match self {
            Recalibrator::Lore(_) => "lore",
            Recalibrator::Hb(_) => "hb",
            Recalibrator::Ts(_) => "ts",
            Recalibrator::Ir(_) => "ir",
            Recalibrator::GroupHb(_) => "group-hb",
            Recalibrator::GroupTs(_) => "group-ts",
        }
    }
}

/// A recalibrated dataset plus per-record fallback flags.
#[derive(Debug, Clone)]
pub struct RecalibratedDataset {
    pub dataset: Dataset,
    pub fallbacks: Vec<bool>,
}

/// Applies a fitted method to every record of `eval`. Record order, labels,
/// ids, and groups are preserved. Confidence-only methods drop stale
/// probability vectors so the record invariants keep holding; temperature
/// scaling rewrites them and keeps `conf = max(probs)`.
pub fn recalibrate_dataset(r: &Recalibrator, eval: &Dataset) -> Result<RecalibratedDataset> {
    let lore_members = match r {
        Recalibrator::Lore(state) => Some(state.members_by_bin()?),
        _ => None,
    };
    let results: Vec<(PredictionRecord, bool)> = eval
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, record)| -> Result<(PredictionRecord, bool)> {
            let mut out = record.clone();
            let fallback = match r {
                Recalibrator::Lore(state) => {
                    let members = lore_members.as_ref().unwrap();
                    let bin = state.scheme.bin_index(record.conf)?;
                    let features = if eval.dim() > 0 {
                        Some(eval.features().row(i))
                    } else {
                        None
                    };
                    let res = state.apply_with_members(
                        &members[bin],
                        features,
                        record.group.as_deref(),
                    )?;
                    out.conf = res.value;
                    out.probs = None;
                    res.fallback
                }
                Recalibrator::Hb(state) => {
                    let res = state.apply(record.conf)?;
                    out.conf = res.value;
                    out.probs = None;
                    res.fallback
                }
                Recalibrator::Ir(state) => {
                    out.conf = state.apply(record.conf)?;
                    out.probs = None;
                    false
                }
                Recalibrator::Ts(state) => {
                    let probs = record.probs.as_ref().ok_or_else(|| {
                        CalibError::Capability(format!(
                            "row `{}`: temperature scaling needs probability vectors",
                            record.id
                        ))
                    })?;
                    let scaled = state.apply(probs);
                    let argmax = argmax_first(&scaled);
                    out.conf = scaled[argmax];
                    out.y_pred = argmax;
                    out.probs = Some(scaled);
                    false
                }
                Recalibrator::GroupTs(state) => {
                    let probs = record.probs.as_ref().ok_or_else(|| {
                        CalibError::Capability(format!(
                            "row `{}`: temperature scaling needs probability vectors",
                            record.id
                        ))
                    })?;
                    let (scaled, fallback) = state.apply(probs, record.group.as_deref());
                    let argmax = argmax_first(&scaled);
                    out.conf = scaled[argmax];
                    out.y_pred = argmax;
                    out.probs = Some(scaled);
                    fallback
                }
                Recalibrator::GroupHb(state) => {
                    let res = state.apply(record.conf, record.group.as_deref())?;
                    out.conf = res.value;
                    out.probs = None;
                    res.fallback
                }
            };
            Ok((out, fallback))
        })
        .collect::<Result<_>>()?;

    let (records, fallbacks): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(RecalibratedDataset {
        dataset: Dataset::with_class_count(records, eval.features().clone(), eval.class_count())?,
        fallbacks,
    })
}

const STATE_VERSION: u64 = 1;
const KNOWN_METHODS: [&str; 6] = ["lore", "hb", "ts", "ir", "group-hb", "group-ts"];

/// Saves a fitted recalibrator as versioned JSON with a method tag.
pub fn save_recalibrator(r: &Recalibrator, path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Versioned<'a> {
        version: u64,
        #[serde(flatten)]
        state: &'a Recalibrator,
    }
    let text = serde_json::to_string_pretty(&Versioned {
        version: STATE_VERSION,
        state: r,
    })?;
    std::fs::write(path.as_ref(), text + "\n")?;
    Ok(())
}

/// Loads a recalibrator, rejecting unknown versions and method tags.
pub fn load_recalibrator(path: impl AsRef<Path>) -> Result<Recalibrator> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(STATE_VERSION) => {}
        Some(v) => {
            return Err(CalibError::Format(format!(
                "unsupported state version {v}, expected {STATE_VERSION}"
            )))
        }
        None => return Err(CalibError::Format("missing state version".into())),
    }
    match value.get("method").and_then(|v| v.as_str()) {
        Some(m) if KNOWN_METHODS.contains(&m) => {}
        Some(m) => {
            return Err(CalibError::Format(format!("unknown method tag `{m}`")));
        }
        None => return Err(CalibError::Format("missing method tag".into())),
    }
    Ok(serde_json::from_value(value)?)
}
