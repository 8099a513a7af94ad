use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dice, malignancy_scalar, within1_accuracy};
use crate::data::{NoduleSample, LIDC_SHORT_NAMES};
use crate::error::{Error, Result};
use crate::model::{ModelInput, ProtoCaps};
use crate::numerics::Scalar;
use crate::prototypes::{infer_attributes, Explanation, PrototypeBank};
use crate::training::{Ablation, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub malignancy_pred: f64,
    pub malignancy_gt: f64,
    pub malignancy_dist: Vec<f64>,
    pub attr_pred: Vec<f64>,
    pub attr_gt: Vec<f64>,
    pub dice: f64,
    /// Nearest prototype per attribute; present in `full` mode.
    pub explanations: Option<Vec<Explanation>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Ablation,
    pub n_samples: usize,
    pub attribute_names: Vec<String>,
    pub attribute_within1: Vec<f64>,
    pub mean_attribute_within1: f64,
    pub malignancy_within1: f64,
    pub mean_dice: f64,
    pub records: Vec<SampleRecord>,
    pub config: Option<TrainConfig>,
}

/// Runs the model over `samples`. Attributes come from the nearest pushed
/// prototype in `full` mode and from the dense head otherwise.
pub fn evaluate<T: Scalar>(
    model: &ProtoCaps<T>,
    bank: &PrototypeBank<T>,
    samples: &[NoduleSample],
    mode: Ablation,
) -> Result<EvalReport> {
    if mode.uses_prototypes() && !bank.is_pushed() {
        return Err(Error::UnpushedBank);
    }
    let records: Vec<SampleRecord> = samples
        .par_iter()
        .map(|s| {
            let input = ModelInput::<T>::from_sample(s, model.config());
            let (out, _) = model.forward(&input.image)?;
            let (attr_pred, explanations) = if mode.uses_prototypes() {
                let (scores, ex) = infer_attributes(&out.latent(), bank)?;
                (scores, Some(ex))
            } else {
                (out.attr_scores.iter().map(|v| v.as_f64()).collect(), None)
            };
            let dist: Vec<f64> = out.malignancy_dist.data().iter().map(|v| v.as_f64()).collect();
            Ok(SampleRecord {
                id: s.id().to_owned(),
                malignancy_pred: malignancy_scalar(&dist),
                malignancy_gt: s.labels.mal_mean,
                malignancy_dist: dist,
                attr_pred,
                attr_gt: s.labels.attr_means.clone(),
                dice: dice(&out.reconstruction, &input.mask)?,
                explanations,
            })
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = bank.schema().iter().map(|a| a.name.clone()).collect();
    let attribute_within1 = (0..names.len())
        .map(|a| within1_accuracy(records.iter().map(|r| (r.attr_pred[a], r.attr_gt[a]))))
        .collect::<Result<Vec<_>>>()?;
    let n = records.len();
    Ok(EvalReport {
        mode,
        n_samples: n,
        mean_attribute_within1: attribute_within1.iter().sum::<f64>() / attribute_within1.len() as f64,
        attribute_within1,
        attribute_names: names,
        malignancy_within1: within1_accuracy(records.iter().map(|r| (r.malignancy_pred, r.malignancy_gt)))?,
        mean_dice: if n == 0 { 0.0 } else { records.iter().map(|r| r.dice).sum::<f64>() / n as f64 },
        records,
        config: None,
    })
}

/// A table cell: mean and, for aggregated rows, the spread over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn single(v: f64) -> Self {
        Self { mean: v, std: None }
    }

    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: Some(var.sqrt()),
        }
    }

    fn render(&self) -> String {
        match self.std {
            Some(s) => format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.1}", 100.0 * self.mean),
        }
    }
}

/// One line of an accuracy table; `attributes: None` renders as dashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub attributes: Option<Vec<Stat>>,
    pub malignancy: Stat,
}

impl EvalReport {
    pub fn table_row(&self, label: impl Into<String>) -> TableRow {
        TableRow {
            label: label.into(),
            attributes: Some(self.attribute_within1.iter().map(|&v| Stat::single(v)).collect()),
            malignancy: Stat::single(self.malignancy_within1),
        }
    }
}

/// Within-1 accuracies in percent, one column per attribute plus malignancy.
pub fn format_table(rows: &[TableRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(5);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c: Vec<String> = match &r.attributes {
                Some(a) => a.iter().map(Stat::render).collect(),
                None => vec!["-".to_owned(); LIDC_SHORT_NAMES.len()],
            };
            c.push(r.malignancy.render());
            c
        })
        .collect();
    let headers: Vec<&str> = LIDC_SHORT_NAMES.iter().copied().chain(["Malignancy"]).collect();
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| cells.iter().map(|c| c[i].chars().count()).chain([h.len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for (r, c) in rows.iter().zip(&cells) {
        let _ = write!(out, "{:<label_w$}", r.label);
        for (v, w) in c.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}
