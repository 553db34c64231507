//! Data model, ingestion, and validation for prediction logs and feature matrices.
//!
//! Prediction logs travel as CSV with header
//! `id,y_true,y_pred,conf,group[,p0..p{m-1}]`. Feature matrices travel either
//! as CSV (`id,f0..f{d-1}`, matched to prediction ids) or as raw little-endian
//! f32 rows with a JSON sidecar descriptor `{"n": N, "d": D}`.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Tolerance for probability-vector consistency checks.
const PROB_TOL: f64 = 1e-6;

/// One sample of a prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub y_true: usize,
    pub y_pred: usize,
    /// Top-label confidence in `[0, 1]`.
    pub conf: f64,
    /// Full probability vector over classes, when the log carries one.
    pub probs: Option<Vec<f64>>,
    /// Sensitive-group label; `None` means the record belongs to no group.
    pub group: Option<String>,
}

impl PredictionRecord {
    /// Whether the predicted label matches the true label.
    pub fn is_correct(&self) -> bool {
        self.y_true == self.y_pred
    }

    /// Validates confidence bounds and probability-vector consistency.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf) {
            return Err(CalibError::Validation(format!(
                "row `{}`: conf {} outside [0, 1]",
                self.id, self.conf
            )));
        }
        if let Some(probs) = &self.probs {
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(CalibError::Validation(format!(
                    "row `{}`: probability entries must be finite and >= 0",
                    self.id
                )));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(CalibError::Validation(format!(
                    "row `{}`: probabilities sum to {sum}, expected 1",
                    self.id
                )));
            }
            let argmax = argmax_first(probs);
            if self.y_pred != argmax {
                return Err(CalibError::Validation(format!(
                    "row `{}`: y_pred {} does not match argmax(probs) {}",
                    self.id, self.y_pred, argmax
                )));
            }
            if (self.conf - probs[argmax]).abs() > PROB_TOL {
                return Err(CalibError::Validation(format!(
                    "row `{}`: conf {} does not match max(probs) {}",
                    self.id, self.conf, probs[argmax]
                )));
            }
        }
        Ok(())
    }
}

/// Index of the maximum entry, first index on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// An `n x d` row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(CalibError::Validation(format!(
                "feature matrix length {} does not match {n} x {d}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Validation(
                "feature matrix contains a non-finite entry".into(),
            ));
        }
        Ok(Self { n, d, values })
    }

    /// An `n x 0` matrix for datasets that carry no embeddings.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            d: 0,
            values: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Aligned prediction records plus their feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<PredictionRecord>,
    features: FeatureMatrix,
    /// Class count.
    m: usize,
}

impl Dataset {
    /// Builds a dataset, inferring the class count from probability vectors
    /// when present and from the largest label otherwise.
    pub fn new(records: Vec<PredictionRecord>, features: FeatureMatrix) -> Result<Self> {
        let m = match records.iter().find_map(|r| r.probs.as_ref()) {
            Some(p) => p.len(),
            None => records
                .iter()
                .map(|r| r.y_true.max(r.y_pred) + 1)
                .max()
                .unwrap_or(1),
        };
        Self::with_class_count(records, features, m)
    }

    /// Builds a dataset with an explicit class count.
    pub fn with_class_count(
        records: Vec<PredictionRecord>,
        features: FeatureMatrix,
        m: usize,
    ) -> Result<Self> {
        if records.len() != features.n() {
            return Err(CalibError::Alignment(format!(
                "{} records but {} feature rows",
                records.len(),
                features.n()
            )));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(CalibError::Validation(format!("duplicate id `{}`", r.id)));
            }
            if r.y_true >= m || r.y_pred >= m {
                return Err(CalibError::Validation(format!(
                    "row `{}`: label outside 0..{m}",
                    r.id
                )));
            }
            if let Some(p) = &r.probs {
                if p.len() != m {
                    return Err(CalibError::Validation(format!(
                        "row `{}`: probability vector length {} != class count {m}",
                        r.id,
                        p.len()
                    )));
                }
            }
        }
        Ok(Self {
            records,
            features,
            m,
        })
    }

    /// Convenience constructor for feature-free datasets.
    pub fn without_features(records: Vec<PredictionRecord>) -> Result<Self> {
        let n = records.len();
        Self::new(records, FeatureMatrix::empty(n))
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Class count.
    pub fn class_count(&self) -> usize {
        self.m
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.features.d()
    }

    /// Replaces the feature matrix (e.g. after a PCA projection).
    pub fn with_features(&self, features: FeatureMatrix) -> Result<Self> {
        if features.n() != self.records.len() {
            return Err(CalibError::Alignment(format!(
                "{} records but {} feature rows",
                self.records.len(),
                features.n()
            )));
        }
        Ok(Self {
            records: self.records.clone(),
            features,
            m: self.m,
        })
    }
}

const REQUIRED_COLUMNS: [&str; 5] = ["id", "y_true", "y_pred", "conf", "group"];

/// Loads a prediction log from CSV.
///
/// Row order is preserved. Probability columns `p0..p{m-1}` are optional; a
/// row leaving all of them empty is a confidence-only record.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let mut col = std::collections::HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.insert(h.to_string(), i);
    }
    for required in REQUIRED_COLUMNS {
        if !col.contains_key(required) {
            return Err(CalibError::MissingColumn(required.into()));
        }
    }
    // Probability columns must be contiguous p0..p{m-1}.
    let mut prob_cols = Vec::new();
    for m in 0.. {
        match col.get(&format!("p{m}")) {
            Some(i) => prob_cols.push(*i),
            None => break,
        }
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row?;
        let field = |name: &str| -> &str { row.get(col[name]).unwrap_or("") };
        let id = field("id").to_string();
        if id.is_empty() {
            return Err(CalibError::Validation(format!(
                "empty id at data row {}",
                records.len() + 1
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(CalibError::Validation(format!("duplicate id `{id}`")));
        }
        let y_true = parse_usize(field("y_true"), &id, "y_true")?;
        let y_pred = parse_usize(field("y_pred"), &id, "y_pred")?;
        let conf = parse_f64(field("conf"), &id, "conf")?;
        let group = match field("group") {
            "" => None,
            g => Some(g.to_string()),
        };
        let raw_probs: Vec<&str> = prob_cols.iter().map(|i| row.get(*i).unwrap_or("")).collect();
        let probs = if raw_probs.is_empty() || raw_probs.iter().all(|p| p.is_empty()) {
            None
        } else if raw_probs.iter().any(|p| p.is_empty()) {
            return Err(CalibError::Validation(format!(
                "row `{id}`: probability columns must be all present or all empty"
            )));
        } else {
            let mut parsed = Vec::with_capacity(raw_probs.len());
            for (j, p) in raw_probs.iter().enumerate() {
                parsed.push(parse_f64(p, &id, &format!("p{j}"))?);
            }
            Some(parsed)
        };
        let record = PredictionRecord {
            id,
            y_true,
            y_pred,
            conf,
            probs,
            group,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

fn parse_usize(raw: &str, id: &str, name: &str) -> Result<usize> {
    raw.parse().map_err(|_| {
        CalibError::Validation(format!("row `{id}`: cannot parse {name} from `{raw}`"))
    })
}

fn parse_f64(raw: &str, id: &str, name: &str) -> Result<f64> {
    raw.parse().map_err(|_| {
        CalibError::Validation(format!("row `{id}`: cannot parse {name} from `{raw}`"))
    })
}

/// Loads features from CSV (`id,f0..f{d-1}`) and reorders rows to match
/// `records`. The id sets must match exactly.
pub fn load_features_csv(
    path: impl AsRef<Path>,
    records: &[PredictionRecord],
) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let mut iter = headers.iter();
    if iter.next() != Some("id") {
        return Err(CalibError::MissingColumn("id".into()));
    }
    let d = headers.len() - 1;
    for (j, h) in iter.enumerate() {
        if h != format!("f{j}") {
            return Err(CalibError::MissingColumn(format!("f{j}")));
        }
    }

    let mut by_id = std::collections::HashMap::new();
    for row in reader.records() {
        let row = row?;
        let id = row.get(0).unwrap_or("").to_string();
        let mut values = Vec::with_capacity(d);
        for j in 0..d {
            let v = parse_f64(row.get(j + 1).unwrap_or(""), &id, &format!("f{j}"))?;
            if !v.is_finite() {
                return Err(CalibError::Validation(format!(
                    "row `{id}`: non-finite feature f{j}"
                )));
            }
            values.push(v);
        }
        if by_id.insert(id.clone(), values).is_some() {
            return Err(CalibError::Validation(format!(
                "duplicate feature id `{id}`"
            )));
        }
    }

    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !by_id.contains_key(&r.id))
        .map(|r| r.id.as_str())
        .take(5)
        .collect();
    if !missing.is_empty() {
        return Err(CalibError::Alignment(format!(
            "feature file is missing ids: {}",
            missing.join(", ")
        )));
    }
    if by_id.len() != records.len() {
        return Err(CalibError::Alignment(format!(
            "feature file has {} rows but the prediction log has {}",
            by_id.len(),
            records.len()
        )));
    }

    let mut values = Vec::with_capacity(records.len() * d);
    for r in records {
        values.extend_from_slice(&by_id[&r.id]);
    }
    FeatureMatrix::new(records.len(), d, values)
}

/// Sidecar descriptor for raw-f32 feature files.
#[derive(Debug, Serialize, Deserialize)]
pub struct RawDescriptor {
    pub n: usize,
    pub d: usize,
}

/// Loads a raw little-endian f32 feature matrix. The sidecar descriptor at
/// `<path>.json` supplies `n` and `d`; rows are assumed to already be in
/// record order.
pub fn load_features_raw(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let descriptor_path = sidecar_path(path);
    let descriptor: RawDescriptor =
        serde_json::from_str(&std::fs::read_to_string(&descriptor_path).map_err(|e| {
            CalibError::Validation(format!(
                "cannot read descriptor {}: {e}",
                descriptor_path.display()
            ))
        })?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let expected = descriptor.n * descriptor.d * 4;
    if bytes.len() != expected {
        return Err(CalibError::Validation(format!(
            "raw feature file holds {} bytes, expected {} for {} x {}",
            bytes.len(),
            expected,
            descriptor.n,
            descriptor.d
        )));
    }
    let mut values = Vec::with_capacity(descriptor.n * descriptor.d);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            return Err(CalibError::Validation(
                "raw feature file contains a non-finite entry".into(),
            ));
        }
        values.push(v);
    }
    FeatureMatrix::new(descriptor.n, descriptor.d, values)
}

/// Writes a feature matrix as raw little-endian f32 plus its sidecar descriptor.
pub fn save_features_raw(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(features.values().len() * 4);
    for v in features.values() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let descriptor = RawDescriptor {
        n: features.n(),
        d: features.d(),
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string(&descriptor)? + "\n",
    )?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Loads features by extension: `.csv` goes through the id-matched CSV path,
/// anything else is treated as raw f32 with a JSON sidecar.
pub fn load_features(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let matrix = if path.extension().is_some_and(|e| e == "csv") {
        load_features_csv(path, records)?
    } else {
        load_features_raw(path)?
    };
    if matrix.n() != records.len() {
        return Err(CalibError::Alignment(format!(
            "feature matrix has {} rows but the prediction log has {}",
            matrix.n(),
            records.len()
        )));
    }
    Ok(matrix)
}

/// Writes a prediction log as CSV. Probability columns are emitted only when
/// every record carries a probability vector.
pub fn save_predictions(records: &[PredictionRecord], m: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let with_probs = !records.is_empty() && records.iter().all(|r| r.probs.is_some());
    let mut header = vec![
        "id".to_string(),
        "y_true".into(),
        "y_pred".into(),
        "conf".into(),
        "group".into(),
    ];
    if with_probs {
        header.extend((0..m).map(|j| format!("p{j}")));
    }
    writer.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.y_true.to_string(),
            r.y_pred.to_string(),
            format!("{}", r.conf),
            r.group.clone().unwrap_or_default(),
        ];
        if with_probs {
            row.extend(r.probs.as_ref().unwrap().iter().map(|p| format!("{p}")));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a feature matrix as CSV with ids taken from `records`.
pub fn save_features_csv(
    features: &FeatureMatrix,
    records: &[PredictionRecord],
    path: impl AsRef<Path>,
) -> Result<()> {
    if features.n() != records.len() {
        return Err(CalibError::Alignment(format!(
            "feature matrix has {} rows but the prediction log has {}",
            features.n(),
            records.len()
        )));
    }
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["id".to_string()];
    header.extend((0..features.d()).map(|j| format!("f{j}")));
    writer.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![r.id.clone()];
        row.extend(features.row(i).iter().map(|v| format!("{v}")));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn loads_minimal_rows() {
        let f = write_temp("id,y_true,y_pred,conf,group\na,1,1,0.9,\n", ".csv");
        let records = load_predictions(f.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].id, "a");
        assert_eq!(records[0].y_true, 1);
        assert_eq!(records[0].y_pred, 1);
        assert_eq!(records[0].conf, 0.9);
        assert!(records[0].group.is_none());
        assert!(records[0].probs.is_none());
    }

    #[test]
    fn loads_rows_with_probs() {
        let f = write_temp(
            "id,y_true,y_pred,conf,group,p0,p1\nb,0,1,0.6,,0.4,0.6\n",
            ".csv",
        );
        let records = load_predictions(f.path()).unwrap();
        assert_eq!(records[0].probs.as_deref(), Some(&[0.4, 0.6][..]));
        assert_eq!(records[0].y_pred, 1);
    }

    #[test]
    fn rejects_out_of_range_conf() {
        let f = write_temp("id,y_true,y_pred,conf,group\nc,0,0,1.2,\n", ".csv");
        let err = load_predictions(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`c`"), "error should cite the row id: {msg}");
    }

    #[test]
    fn rejects_duplicate_ids() {
        let f = write_temp(
            "id,y_true,y_pred,conf,group\na,0,0,0.5,\na,1,1,0.6,\n",
            ".csv",
        );
        assert!(matches!(
            load_predictions(f.path()),
            Err(CalibError::Validation(_))
        ));
    }

    #[test]
    fn rejects_missing_column() {
        let f = write_temp("id,y_true,y_pred,conf\na,0,0,0.5\n", ".csv");
        match load_predictions(f.path()) {
            Err(CalibError::MissingColumn(c)) => assert_eq!(c, "group"),
            other => panic!("expected missing-column error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_argmax_mismatch() {
        let f = write_temp(
            "id,y_true,y_pred,conf,group,p0,p1\nb,0,0,0.6,,0.4,0.6\n",
            ".csv",
        );
        assert!(load_predictions(f.path()).is_err());
    }

    #[test]
    fn csv_features_align_order_insensitively() {
        let preds = write_temp(
            "id,y_true,y_pred,conf,group\na,0,0,0.5,\nb,0,0,0.6,\nc,0,0,0.7,\n",
            ".csv",
        );
        let records = load_predictions(preds.path()).unwrap();
        let feats = write_temp("id,f0,f1\nc,5,6\na,1,2\nb,3,4\n", ".csv");
        let m = load_features_csv(feats.path(), &records).unwrap();
        assert_eq!(m.n(), 3);
        assert_eq!(m.d(), 2);
        assert_eq!(m.row(0), &[1.0, 2.0]);
        assert_eq!(m.row(2), &[5.0, 6.0]);
    }

    #[test]
    fn csv_features_report_missing_ids() {
        let preds = write_temp(
            "id,y_true,y_pred,conf,group\na,0,0,0.5,\nb,0,0,0.6,\n",
            ".csv",
        );
        let records = load_predictions(preds.path()).unwrap();
        let feats = write_temp("id,f0\na,1\n", ".csv");
        let err = load_features_csv(feats.path(), &records).unwrap_err();
        assert!(err.to_string().contains("b"));
    }

    #[test]
    fn raw_features_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.f32");
        let m = FeatureMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        save_features_raw(&m, &path).unwrap();
        let back = load_features_raw(&path).unwrap();
        assert_eq!(back.n(), 3);
        assert_eq!(back.d(), 2);
        assert_eq!(back.values(), m.values());
    }

    #[test]
    fn raw_features_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.f32");
        std::fs::write(&path, [0u8; 20]).unwrap();
        std::fs::write(dir.path().join("feats.f32.json"), r#"{"n":3,"d":2}"#).unwrap();
        assert!(matches!(
            load_features_raw(&path),
            Err(CalibError::Validation(_))
        ));
    }

    #[test]
    fn ingestion_is_deterministic() {
        let f = write_temp(
            "id,y_true,y_pred,conf,group\na,0,0,0.5,\nb,1,0,0.25,g\n",
            ".csv",
        );
        let a = load_predictions(f.path()).unwrap();
        let b = load_predictions(f.path()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predictions_roundtrip_through_csv() {
        let records = vec![
            PredictionRecord {
                id: "a".into(),
                y_true: 0,
                y_pred: 1,
                conf: 0.6,
                probs: Some(vec![0.4, 0.6]),
                group: Some("g1".into()),
            },
            PredictionRecord {
                id: "b".into(),
                y_true: 1,
                y_pred: 1,
                conf: 0.75,
                probs: Some(vec![0.25, 0.75]),
                group: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        save_predictions(&records, 2, &path).unwrap();
        let back = load_predictions(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn dataset_infers_class_count() {
        let records = vec![PredictionRecord {
            id: "a".into(),
            y_true: 2,
            y_pred: 0,
            conf: 0.5,
            probs: None,
            group: None,
        }];
        let d = Dataset::without_features(records).unwrap();
        assert_eq!(d.class_count(), 3);
    }
}
