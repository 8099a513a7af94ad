use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport, Stat, TableRow};
use crate::data::{FoldAssignment, NoduleSample};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::training::{assign_label_fraction, init_model, train, Ablation, TrainConfig};

/// One fraction of a label-fraction sweep, aggregated over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    /// `None` when no attribute labels were available.
    pub attributes: Option<Vec<Stat>>,
    pub malignancy: Stat,
    pub dice: Stat,
    pub per_fold: Vec<EvalReport>,
}

impl SweepRow {
    pub fn table_row(&self) -> TableRow {
        TableRow {
            label: format!("{}%", 100.0 * self.fraction),
            attributes: self.attributes.clone(),
            malignancy: self.malignancy,
        }
    }
}

/// Trains one model per fold and fraction on identical folds and seed and
/// evaluates each on its fold's test split.
pub fn label_fraction_sweep<T: Scalar>(
    samples: &[NoduleSample],
    folds: &FoldAssignment,
    fractions: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if folds.k == 0 {
        return Err(Error::InvalidInput("fold assignment has no folds".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidInput(format!("label fraction {f} outside [0,1]")));
    }
    fractions
        .iter()
        .map(|&fraction| {
            let mut per_fold = Vec::with_capacity(folds.k);
            for fold in 0..folds.k {
                let split = folds.split(samples, fold)?;
                let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
                let mut train_set = pick(&split.train);
                assign_label_fraction(&mut train_set, fraction, cfg.seed)?;
                let run_cfg = TrainConfig {
                    attr_label_fraction: fraction,
                    ..cfg.clone()
                };
                let (mut model, mut bank) = init_model::<T>(&run_cfg)?;
                log::info!("fraction {fraction}: fold {fold}/{}", folds.k);
                train(&mut model, &mut bank, &train_set, &pick(&split.val), &run_cfg)?;
                let mode = if fraction == 0.0 { Ablation::WoUse } else { cfg.ablation };
                let mut report = evaluate(&model, &bank, &pick(&split.test), mode)?;
                report.config = Some(run_cfg);
                per_fold.push(report);
            }
            let collect = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(&per_fold.iter().map(f).collect::<Vec<_>>());
            let attributes = (fraction > 0.0).then(|| {
                (0..per_fold[0].attribute_within1.len())
                    .map(|a| collect(&|r| r.attribute_within1[a]))
                    .collect()
            });
            Ok(SweepRow {
                fraction,
                attributes,
                malignancy: collect(&|r| r.malignancy_within1),
                dice: collect(&|r| r.mean_dice),
                per_fold,
            })
        })
        .collect()
}
