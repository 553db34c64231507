//! Selective-prediction simulation: threshold policy, total cost, and the
//! prediction rejection area ratio (PRR).
//!
//! Costs are positive: answering "unsure" costs `u`, a wrong prediction costs
//! `w > u`, and a correct prediction costs 0. A calibrated agent answers
//! exactly when its confidence reaches the threshold `1 - u/w`.

use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{CalibError, Result};

/// Abstention/error cost pair with `w > u > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSpec {
    unsure: f64,
    wrong: f64,
}

impl CostSpec {
    pub fn new(unsure: f64, wrong: f64) -> Result<Self> {
        if !(unsure > 0.0) || !(wrong > unsure) {
            return Err(CalibError::Argument(format!(
                "costs must satisfy w > u > 0, got u={unsure}, w={wrong}"
            )));
        }
        Ok(Self { unsure, wrong })
    }

    pub fn unsure(&self) -> f64 {
        self.unsure
    }

    pub fn wrong(&self) -> f64 {
        self.wrong
    }

    /// The confidence threshold `1 - u/w`, always in (0, 1).
    pub fn threshold(&self) -> f64 {
        1.0 - self.unsure / self.wrong
    }
}

/// Totals of one policy run; the counts partition the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyOutcome {
    pub total_cost: f64,
    pub n_unsure: usize,
    pub n_wrong: usize,
    pub n_correct: usize,
}

/// Answers when `conf >= 1 - u/w`, abstains below.
pub fn run_policy(d: &Dataset, costs: &CostSpec) -> PolicyOutcome {
    let threshold = costs.threshold();
    let mut outcome = PolicyOutcome {
        total_cost: 0.0,
        n_unsure: 0,
        n_wrong: 0,
        n_correct: 0,
    };
    for r in d.records() {
        if r.conf < threshold {
            outcome.n_unsure += 1;
            outcome.total_cost += costs.unsure;
        } else if r.is_correct() {
            outcome.n_correct += 1;
        } else {
            outcome.n_wrong += 1;
            outcome.total_cost += costs.wrong;
        }
    }
    outcome
}

/// Retained-error counts as samples are rejected in ascending-confidence
/// order, plus the trapezoid areas of the model, random, and oracle curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionCurve {
    /// `errors[r]` = wrong predictions among the `N - r` most confident.
    pub errors: Vec<usize>,
    pub area_model: f64,
    pub area_random: f64,
    pub area_oracle: f64,
}

/// Builds the rejection curve. Ties in confidence are broken by record order.
pub fn rejection_curve(d: &Dataset) -> Result<RejectionCurve> {
    let n = d.len();
    if n < 2 {
        return Err(CalibError::Argument(
            "rejection curve needs at least 2 records".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        d.records()[a]
            .conf
            .partial_cmp(&d.records()[b].conf)
            .unwrap()
            .then(a.cmp(&b))
    });
    let total_errors: usize = d.records().iter().filter(|r| !r.is_correct()).count();

    // errors[r]: total errors minus the errors already rejected.
    let mut errors = Vec::with_capacity(n + 1);
    let mut rejected_errors = 0usize;
    errors.push(total_errors);
    for &i in &order {
        if !d.records()[i].is_correct() {
            rejected_errors += 1;
        }
        errors.push(total_errors - rejected_errors);
    }

    let nf = n as f64;
    let e = total_errors as f64;
    let area_model = errors
        .windows(2)
        .map(|w| (w[0] + w[1]) as f64 / 2.0 / nf)
        .sum();
    let area_random = e / 2.0;
    let area_oracle = e * e / (2.0 * nf);
    Ok(RejectionCurve {
        errors,
        area_model,
        area_random,
        area_oracle,
    })
}

/// Prediction rejection area ratio: 1 for oracle ranking, 0 for the random
/// baseline, negative for worse-than-random ranking (returned unclamped).
pub fn prr(d: &Dataset) -> Result<f64> {
    let curve = rejection_curve(d)?;
    if curve.errors[0] == 0 {
        return Err(CalibError::UndefinedPrr(
            "the dataset contains no errors".into(),
        ));
    }
    Ok((curve.area_random - curve.area_model) / (curve.area_random - curve.area_oracle))
}

/// One row of a cost sweep at ratio `w/u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSweepRow {
    pub ratio: f64,
    pub cost_orig: f64,
    pub cost_recal: f64,
    pub improvement: f64,
}

/// Runs the threshold policy on the original and recalibrated logs at each
/// ratio `w/u` with `u` fixed. The two datasets must list the same ids in the
/// same order.
pub fn cost_sweep(
    orig: &Dataset,
    recal: &Dataset,
    ratios: &[f64],
    unsure_cost: f64,
) -> Result<Vec<CostSweepRow>> {
    if orig.len() != recal.len()
        || orig
            .records()
            .iter()
            .zip(recal.records())
            .any(|(a, b)| a.id != b.id)
    {
        return Err(CalibError::Argument(
            "cost sweep inputs must list the same ids in the same order".into(),
        ));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let costs = CostSpec::new(unsure_cost, unsure_cost * ratio)?;
            let cost_orig = run_policy(orig, &costs).total_cost;
            let cost_recal = run_policy(recal, &costs).total_cost;
            Ok(CostSweepRow {
                ratio,
                cost_orig,
                cost_recal,
                improvement: cost_orig - cost_recal,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PredictionRecord;
    use approx::assert_abs_diff_eq;

    fn record(id: &str, conf: f64, correct: bool) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            y_true: if correct { 0 } else { 1 },
            y_pred: 0,
            conf,
            probs: None,
            group: None,
        }
    }

    fn dataset(confs: &[f64], correct: &[bool]) -> Dataset {
        let records = confs
            .iter()
            .zip(correct)
            .enumerate()
            .map(|(i, (c, ok))| record(&format!("r{i}"), *c, *ok))
            .collect();
        Dataset::without_features(records).unwrap()
    }

    #[test]
    fn policy_threshold_cases() {
        let costs = CostSpec::new(1.0, 10.0).unwrap();
        assert_abs_diff_eq!(costs.threshold(), 0.9, epsilon = 1e-12);

        let d = dataset(&[0.95], &[true]);
        assert_abs_diff_eq!(run_policy(&d, &costs).total_cost, 0.0);

        let d = dataset(&[0.95], &[false]);
        assert_abs_diff_eq!(run_policy(&d, &costs).total_cost, 10.0);

        let d = dataset(&[0.5], &[false]);
        let out = run_policy(&d, &costs);
        assert_abs_diff_eq!(out.total_cost, 1.0);
        assert_eq!(out.n_unsure, 1);
    }

    #[test]
    fn policy_all_confident_correct() {
        let costs = CostSpec::new(1.0, 10.0).unwrap();
        let d = dataset(&[1.0, 1.0, 1.0], &[true, true, true]);
        let out = run_policy(&d, &costs);
        assert_abs_diff_eq!(out.total_cost, 0.0);
        assert_eq!(out.n_correct, 3);
    }

    #[test]
    fn policy_all_unsure() {
        let costs = CostSpec::new(1.0, 10.0).unwrap();
        let d = dataset(&[0.0, 0.0, 0.0, 0.0], &[true, false, true, false]);
        let out = run_policy(&d, &costs);
        assert_abs_diff_eq!(out.total_cost, 4.0);
        assert_eq!(out.n_unsure, 4);
    }

    #[test]
    fn policy_cost_decomposition() {
        let costs = CostSpec::new(2.0, 7.0).unwrap();
        let d = dataset(
            &[0.9, 0.8, 0.2, 0.95, 0.75],
            &[true, false, true, false, true],
        );
        let out = run_policy(&d, &costs);
        assert_abs_diff_eq!(
            out.total_cost,
            2.0 * out.n_unsure as f64 + 7.0 * out.n_wrong as f64,
            epsilon = 1e-12
        );
        assert_eq!(out.n_unsure + out.n_wrong + out.n_correct, d.len());
    }

    #[test]
    fn invalid_costs_rejected() {
        assert!(CostSpec::new(0.0, 1.0).is_err());
        assert!(CostSpec::new(2.0, 1.0).is_err());
        assert!(CostSpec::new(1.0, 1.0).is_err());
        assert!(CostSpec::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn prr_oracle_ranking_is_one() {
        // Errors carry the lowest confidences.
        let d = dataset(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_abs_diff_eq!(prr(&d).unwrap(), 1.0, epsilon = 0.0);
    }

    #[test]
    fn prr_reversed_ranking_matches_enumeration() {
        // Errors are the most confident: brute-force the areas over all
        // rejection counts.
        let d = dataset(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]);
        let curve = rejection_curve(&d).unwrap();
        assert_eq!(curve.errors, vec![2, 2, 2, 1, 0]);
        let expected_model = (2.0 + 2.0) / 2.0 / 4.0
            + (2.0 + 2.0) / 2.0 / 4.0
            + (2.0 + 1.0) / 2.0 / 4.0
            + (1.0 + 0.0) / 2.0 / 4.0;
        assert_abs_diff_eq!(curve.area_model, expected_model, epsilon = 1e-12);
        let v = prr(&d).unwrap();
        let expected = (1.0 - expected_model) / (1.0 - 0.5);
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        assert!(v < 0.0);
    }

    #[test]
    fn prr_random_like_ranking_is_zero() {
        // Rejection order: correct, error, error, correct gives a curve whose
        // area equals the random baseline.
        let d = dataset(&[0.1, 0.2, 0.3, 0.4], &[true, false, false, true]);
        assert_abs_diff_eq!(prr(&d).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn prr_undefined_without_errors() {
        let d = dataset(&[0.2, 0.9], &[true, true]);
        assert!(matches!(prr(&d), Err(CalibError::UndefinedPrr(_))));
    }

    #[test]
    fn cost_sweep_identity_recalibration() {
        let d = dataset(&[0.9, 0.4, 0.99], &[true, false, true]);
        let rows = cost_sweep(&d, &d, &[2.0, 5.0, 10.0, 20.0, 50.0], 1.0).unwrap();
        assert_eq!(rows.len(), 5);
        for row in rows {
            assert_abs_diff_eq!(row.improvement, 0.0);
        }
    }

    #[test]
    fn cost_sweep_composes_run_policy() {
        let orig = dataset(&[0.95, 0.5, 0.85], &[false, true, true]);
        let recal = dataset(&[0.5, 0.95, 0.85], &[false, true, true]);
        let rows = cost_sweep(&orig, &recal, &[10.0], 1.0).unwrap();
        let costs = CostSpec::new(1.0, 10.0).unwrap();
        assert_abs_diff_eq!(rows[0].cost_orig, run_policy(&orig, &costs).total_cost);
        assert_abs_diff_eq!(rows[0].cost_recal, run_policy(&recal, &costs).total_cost);
        assert_abs_diff_eq!(
            rows[0].improvement,
            rows[0].cost_orig - rows[0].cost_recal,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cost_sweep_rejects_misaligned_ids() {
        let a = dataset(&[0.9], &[true]);
        let records = vec![record("other", 0.9, true)];
        let b = Dataset::without_features(records).unwrap();
        assert!(cost_sweep(&a, &b, &[2.0], 1.0).is_err());
    }

    #[test]
    fn cost_monotone_in_wrong_cost_while_answer_set_fixed() {
        // Monotonicity in w holds while the threshold stays between the same
        // adjacent confidences; a wrong record crossing the threshold drops
        // from cost w to cost u, so the unrestricted statement fails.
        let d = dataset(
            &[0.9, 0.8, 0.2, 0.95, 0.75],
            &[true, false, true, false, true],
        );
        let mut last = f64::NEG_INFINITY;
        for w in [2.6, 2.8, 3.0, 3.2, 3.4] {
            let costs = CostSpec::new(1.0, w).unwrap();
            assert!(costs.threshold() > 0.6 && costs.threshold() < 0.71);
            let cost = run_policy(&d, &costs).total_cost;
            assert!(cost >= last);
            last = cost;
        }
    }
}
