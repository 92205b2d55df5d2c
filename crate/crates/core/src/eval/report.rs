use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SplitMetrics;
use crate::error::{Error, Result};

/// JSON has no NaN, so serde_json writes it as `null`; read that back as NaN.
pub fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One line of metrics.csv. Missing values are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    #[serde(deserialize_with = "nan_if_null")]
    pub inform: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub success: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub bleu: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub combined: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub latent_precision: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub latent_recall: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub latent_f1: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub q_precision: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub q_recall: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub q_f1: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub marginal_ll: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub mean_accept_rate: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub phi_grad_norm_variance: f64,
}

impl MetricsRow {
    pub fn from_split(epoch: usize, split: &str, m: &SplitMetrics) -> Self {
        MetricsRow {
            epoch,
            split: split.to_string(),
            inform: m.inform,
            success: m.success,
            bleu: m.bleu,
            combined: m.combined,
            latent_precision: m.p.precision,
            latent_recall: m.p.recall,
            latent_f1: m.p.f1,
            q_precision: m.q.precision,
            q_recall: m.q.recall,
            q_f1: m.q.f1,
            marginal_ll: m.marginal_ll,
            mean_accept_rate: f64::NAN,
            phi_grad_norm_variance: f64::NAN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn last(&self, split: &str) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(HEADER)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut rows = Vec::new();
        for (i, rec) in r.deserialize().enumerate() {
            rows.push(rec.map_err(|e: csv::Error| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })?);
        }
        Ok(MetricsReport { rows })
    }
}

pub const HEADER: [&str; 15] = [
    "epoch",
    "split",
    "inform",
    "success",
    "bleu",
    "combined",
    "latent_precision",
    "latent_recall",
    "latent_f1",
    "q_precision",
    "q_recall",
    "q_f1",
    "marginal_ll",
    "mean_accept_rate",
    "phi_grad_norm_variance",
];
