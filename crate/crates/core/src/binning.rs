//! Confidence-bin partitioning shared by all metrics and recalibrators.
//!
//! Bins are half-open `[edges[i], edges[i+1])` with the final bin closed at 1,
//! so every confidence in `[0, 1]` maps to exactly one bin.

use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// How bin edges were derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinKind {
    EqualWidth,
    EqualMass,
}

impl std::fmt::Display for BinKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BinKind::EqualWidth => write!(f, "equal-width"),
            BinKind::EqualMass => write!(f, "equal-mass"),
        }
    }
}

/// A partition of `[0, 1]` into confidence bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    kind: BinKind,
    /// Strictly ascending, `edges[0] = 0`, `edges[last] = 1`.
    edges: Vec<f64>,
}

impl BinningScheme {
    /// `K` equal-width bins with edges at `i / K`.
    pub fn equal_width(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(CalibError::Argument("bin count must be >= 1".into()));
        }
        let edges = (0..=k).map(|i| i as f64 / k as f64).collect();
        Ok(Self {
            kind: BinKind::EqualWidth,
            edges,
        })
    }

    /// Equal-mass bins: edges are the `j/K`-quantiles of `confs` for `j = 0..=K`
    /// (linear-interpolation quantile), duplicates collapsed, and the outermost
    /// edges snapped to 0 and 1. On degenerate data the effective bin count
    /// shrinks, down to a single `{0, 1}` bin.
    pub fn equal_mass(k: usize, confs: &[f64]) -> Result<Self> {
        if k == 0 {
            return Err(CalibError::Argument("bin count must be >= 1".into()));
        }
        if confs.is_empty() {
            return Err(CalibError::Argument(
                "equal-mass binning needs a non-empty confidence sample".into(),
            ));
        }
        let mut sorted = confs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("confidences must not be NaN"));

        let mut edges: Vec<f64> = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let q = quantile_interpolated(&sorted, j as f64 / k as f64);
            if edges.last().map_or(true, |last| q > *last) {
                edges.push(q);
            }
        }
        if edges.len() < 2 {
            edges = vec![0.0, 1.0];
        } else {
            edges[0] = 0.0;
            *edges.last_mut().unwrap() = 1.0;
        }
        Ok(Self {
            kind: BinKind::EqualMass,
            edges,
        })
    }

    pub fn kind(&self) -> BinKind {
        self.kind
    }

    /// Effective number of bins.
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Bin index of `conf`. Bins are `[edges[i], edges[i+1])`, last bin closed.
    pub fn bin_index(&self, conf: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&conf) {
            return Err(CalibError::Argument(format!(
                "confidence {conf} outside [0, 1]"
            )));
        }
        if conf >= 1.0 {
            return Ok(self.bins() - 1);
        }
        // First edge strictly greater than conf, minus one.
        let upper = self.edges.partition_point(|e| *e <= conf);
        Ok(upper - 1)
    }
}

/// Linear-interpolation quantile of pre-sorted data (the `(n-1)q` convention).
fn quantile_interpolated(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}
