//! Evaluation metrics and the JSON-lines metrics report.

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} labels, non-empty", labels.len()),
            format!("{} predictions", predictions.len()),
        ));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Per-class intersection-over-union plus their mean. Classes absent from
/// both prediction and target (empty union) are excluded from the mean and
/// reported as None.
pub fn mean_iou(
    prediction: &Array3<u8>,
    target: &Array3<u8>,
    num_classes: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(
            "mean_iou",
            format!("{:?}", target.shape()),
            format!("{:?}", prediction.shape()),
        ));
    }
    if num_classes == 0 {
        return Err(Error::Config("mean_iou needs num_classes >= 1".into()));
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (&p, &t) in prediction.iter().zip(target.iter()) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::Data(format!(
                "mask value {} outside {num_classes} classes",
                p.max(t)
            )));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| {
            if u == 0 {
                None
            } else {
                Some(i as f64 / u as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, miou))
}

/// One evaluation point. Fields that do not apply to the phase stay None and
/// are omitted from the serialized line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_perm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_rot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    /// Zero when the run is in deterministic mode.
    pub wall_clock_s: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<MetricsRecord>,
}

impl MetricsReport {
    pub fn push(&mut self, record: MetricsRecord) {
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    /// One JSON object per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(
                &serde_json::to_string(r)
                    .map_err(|e| Error::format(path, format!("serialize record: {e}")))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::format(path, format!("record {i}: {e}")))?,
            );
        }
        Ok(MetricsReport { records })
    }
}
