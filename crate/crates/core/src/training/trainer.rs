use std::fs::File;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{attribute_loss, malignancy_kl_grad, malignancy_kl_loss, reconstruction_loss, total_loss};
use super::{LossTerms, LossWeights, TrainConfig};
use crate::data::{malignancy_target, AttributeSchema, NoduleSample};
use crate::error::{Error, Result};
use crate::evaluation::{malignancy_scalar, within1_accuracy};
use crate::model::{BackboneConfig, ModelInput, OutputGrads, ProtoCaps};
use crate::numerics::{AdamConfig, Scalar};
use crate::prototypes::{push_prototypes, PrototypeBank};

/// Samples per gradient accumulation chunk. Fixed so that the summation
/// order, and hence every result, is independent of the thread count.
const GRAD_CHUNK: usize = 8;

/// One row of `epochs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub total: f64,
    pub malignancy: f64,
    pub reconstruction: f64,
    pub attribute: f64,
    pub cluster: f64,
    pub separation: f64,
    pub train_malignancy_within1: f64,
    pub val_malignancy_within1: f64,
    pub pushed: bool,
    /// Wall-clock seconds; kept out of the CSV so runs compare exactly.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_malignancy_within1: f64,
}

/// A sample converted to the model's resolution plus its training targets.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub input: ModelInput<T>,
    pub target: Vec<T>,
    pub attrs: Vec<T>,
    pub classes: Option<Vec<i32>>,
    pub mal_mean: f64,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn new(sample: &NoduleSample, cfg: &BackboneConfig, schema: &AttributeSchema) -> Self {
        let l = &sample.labels;
        Self {
            input: ModelInput::from_sample(sample, cfg),
            target: malignancy_target(l.mal_mean, l.mal_std).iter().map(|&p| T::of(p)).collect(),
            attrs: l.attr_means.iter().map(|&v| T::of(v)).collect(),
            classes: sample
                .has_attr_labels()
                .then(|| schema.iter().zip(&l.attr_means).map(|(a, &m)| a.class_of(m)).collect()),
            mal_mean: l.mal_mean,
        }
    }

    pub fn labeled(&self) -> bool {
        self.classes.is_some()
    }
}

/// Fresh network and prototype bank for `cfg`.
pub fn init_model<T: Scalar>(cfg: &TrainConfig) -> Result<(ProtoCaps<T>, PrototypeBank<T>)> {
    let backbone = BackboneConfig::for_profile(cfg.profile);
    let bank = PrototypeBank::new(
        &AttributeSchema::lidc(),
        backbone.attr_caps_dim,
        cfg.dist_max,
        cfg.seed.wrapping_add(1),
    )?;
    Ok((ProtoCaps::new(backbone, cfg.seed)?, bank))
}

/// Loss terms of one sample, accumulating `scale`-weighted gradients of
/// the total loss. Returns the terms and the predicted malignancy score.
pub fn sample_loss_and_grads<T: Scalar>(
    model: &ProtoCaps<T>,
    bank: &PrototypeBank<T>,
    sample: &PreparedSample<T>,
    w: &LossWeights,
    scale: T,
    net_grads: &mut [Vec<T>],
    proto_grads: &mut [T],
) -> Result<(LossTerms<T>, f64)> {
    let (out, cache) = model.forward(&sample.input.image)?;
    let dist = out.malignancy_dist.data();
    let mut grads = OutputGrads::zeros(model.config());
    let mut terms = LossTerms {
        malignancy: malignancy_kl_loss(dist, &sample.target)?,
        reconstruction: reconstruction_loss(&out.reconstruction, &sample.input.mask)?,
        attribute: T::zero(),
        cluster: T::zero(),
        separation: T::zero(),
    };
    grads.malignancy_dist = malignancy_kl_grad(dist, &sample.target).into_iter().map(|g| g * scale).collect();
    let n_pix = T::of(sample.input.mask.len() as f64);
    let k_recon = scale * T::of(w.recon) * T::of(2.0) / n_pix;
    for ((g, &r), &m) in grads
        .reconstruction
        .iter_mut()
        .zip(out.reconstruction.data())
        .zip(sample.input.mask.data())
    {
        *g = k_recon * (r - m);
    }
    if let Some(classes) = &sample.classes {
        terms.attribute = attribute_loss(&out.attr_scores, &sample.attrs, 0)?;
        for ((g, &o), &y) in grads.attr_scores.iter_mut().zip(&out.attr_scores).zip(&sample.attrs) {
            *g = scale * T::of(2.0) * (o - y);
        }
        if w.prototypes {
            let latent = out.latent();
            let pl = bank.losses(&latent, classes)?;
            terms.cluster = pl.cluster;
            terms.separation = pl.separation;
            let w_clu = scale * T::of(w.proto);
            let w_sep = w_clu * T::of(w.sep_inner);
            bank.losses_backward(&latent, &pl, w_clu, w_sep, &mut grads.latent, proto_grads);
        }
    }
    model.backward(&cache, &grads, net_grads);
    Ok((terms, malignancy_scalar(dist)))
}

struct ChunkResult<T> {
    net: Vec<Vec<T>>,
    proto: Vec<T>,
    sums: [f64; 6],
    preds: Vec<(usize, f64)>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Predicted malignancy scores, in sample order.
pub fn predict_malignancy<T: Scalar>(model: &ProtoCaps<T>, samples: &[PreparedSample<T>]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| Ok(malignancy_scalar(model.forward(&s.input.image)?.0.malignancy_dist.data())))
        .collect()
}

/// Concatenated capsule vectors of every sample, in sample order.
pub fn latents<T: Scalar>(model: &ProtoCaps<T>, samples: &[PreparedSample<T>]) -> Result<Vec<Vec<T>>> {
    samples
        .par_iter()
        .map(|s| Ok(model.forward(&s.input.image)?.0.latent()))
        .collect()
}

fn accuracy(preds: &[f64], samples: &[PreparedSample<impl Scalar>]) -> Result<f64> {
    within1_accuracy(preds.iter().zip(samples).map(|(&p, s)| (p, s.mal_mean)))
}

/// Trains `model` and `bank` in place and leaves them at the best epoch's
/// state. Selection is on validation malignancy Within-1 accuracy (earlier
/// epoch on ties), preferring states whose bank has been pushed when
/// prototypes are learned; the restored bank is pushed once more against
/// the restored network. An empty `val` falls back to the training set.
pub fn train<T: Scalar>(
    model: &mut ProtoCaps<T>,
    bank: &mut PrototypeBank<T>,
    train: &[NoduleSample],
    val: &[NoduleSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let train_set = prepare::<T>(train, model.config());
    let val_set = if val.is_empty() {
        log::warn!("empty validation set; selecting on training accuracy");
        train_set.clone()
    } else {
        prepare(val, model.config())
    };
    let n = train_set.len();
    let labeled = train_set.iter().filter(|s| s.labeled()).count();
    log::info!("training on {n} samples ({labeled} with attribute labels), validating on {}", val_set.len());

    let net_adam = AdamConfig::with_lr(cfg.lr_params);
    let proto_adam = AdamConfig::with_lr(cfg.lr_prototypes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut reports = Vec::new();
    let mut best: Option<((bool, f64), usize, ProtoCaps<T>, PrototypeBank<T>)> = None;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let weights = cfg.loss_weights(epoch);
        let pushed = cfg.is_push_epoch(epoch);
        if pushed {
            let lat = latents(model, &train_set)?;
            let summary = push_prototypes(bank, &lat, train)?;
            log::debug!("epoch {epoch}: pushed {} prototypes", summary.updated);
        }
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut train_preds = vec![0.0; n];
        for batch in order.chunks(cfg.batch_size) {
            let scale = T::of(1.0 / batch.len() as f64);
            let results: Vec<Result<ChunkResult<T>>> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|idx| {
                    let mut acc = ChunkResult {
                        net: model.params().zero_grads(),
                        proto: vec![T::zero(); bank.vectors().len()],
                        sums: [0.0; 6],
                        preds: Vec::with_capacity(idx.len()),
                    };
                    for &i in idx {
                        let (t, pred) = sample_loss_and_grads(
                            model,
                            bank,
                            &train_set[i],
                            &weights,
                            scale,
                            &mut acc.net,
                            &mut acc.proto,
                        )?;
                        let total = total_loss(&t, &weights).map_err(|_| Error::Divergence { epoch })?;
                        let shown = |v: T| if weights.prototypes { v.as_f64() } else { 0.0 };
                        let row = [
                            total.as_f64(),
                            t.malignancy.as_f64(),
                            t.reconstruction.as_f64(),
                            t.attribute.as_f64(),
                            shown(t.cluster),
                            shown(t.separation),
                        ];
                        for (s, v) in acc.sums.iter_mut().zip(row) {
                            *s += v;
                        }
                        acc.preds.push((i, pred));
                    }
                    Ok(acc)
                })
                .collect();
            let mut chunks = results.into_iter();
            let mut head = chunks.next().expect("non-empty batch")?;
            for r in chunks {
                let r = r?;
                for (d, s) in head.net.iter_mut().zip(&r.net) {
                    add_into(d, s);
                }
                add_into(&mut head.proto, &r.proto);
                for (d, s) in head.sums.iter_mut().zip(r.sums) {
                    *d += s;
                }
                head.preds.extend(r.preds);
            }
            if head.sums.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            for (s, v) in sums.iter_mut().zip(head.sums) {
                *s += v;
            }
            for (i, p) in head.preds {
                train_preds[i] = p;
            }
            model.params_mut().set_grads(head.net)?;
            model.params_mut().adam_step(&net_adam)?;
            if weights.prototypes {
                bank.params_mut().set_grads(vec![head.proto])?;
                bank.params_mut().adam_step(&proto_adam)?;
            }
        }
        let val_preds = predict_malignancy(model, &val_set)?;
        let finite_params = model.params().iter().chain(bank.params().iter()).all(|(_, t)| t.all_finite());
        if !finite_params || train_preds.iter().chain(&val_preds).any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        let val_acc = accuracy(&val_preds, &val_set)?;
        let mean = |k: usize| sums[k] / n as f64;
        let report = EpochReport {
            epoch,
            total: mean(0),
            malignancy: mean(1),
            reconstruction: mean(2),
            attribute: mean(3),
            cluster: mean(4),
            separation: mean(5),
            train_malignancy_within1: accuracy(&train_preds, &train_set)?,
            val_malignancy_within1: val_acc,
            pushed,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:4} loss {:.4} (mal {:.4} rec {:.4} attr {:.4} clu {:.4} sep {:.4}) train {:.3} val {:.3}{}",
            report.total,
            report.malignancy,
            report.reconstruction,
            report.attribute,
            report.cluster,
            report.separation,
            report.train_malignancy_within1,
            report.val_malignancy_within1,
            if pushed { " push" } else { "" }
        );
        reports.push(report);

        let key = (!cfg.ablation.learns_prototypes() || bank.is_pushed(), val_acc);
        if best.as_ref().is_none_or(|(k, ..)| key > *k) {
            best = Some((key, epoch, model.clone(), bank.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            log::info!("no improvement for {} epochs; stopping after epoch {epoch}", cfg.patience);
            break;
        }
    }
    let ((_, acc), best_epoch, m, b) = best.expect("at least one epoch");
    *model = m;
    *bank = b;
    if cfg.ablation.learns_prototypes() && bank.is_pushed() {
        // project onto the restored network's own latents
        push_prototypes(bank, &latents(model, &train_set)?, train)?;
    }
    Ok(TrainOutcome {
        reports,
        best_epoch,
        best_val_malignancy_within1: acc,
    })
}

pub fn write_epochs_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in reports {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochReport>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("epochs csv: {e}"))
}

/// Samples prepared at the model's resolution.
pub fn prepare<T: Scalar>(samples: &[NoduleSample], cfg: &BackboneConfig) -> Vec<PreparedSample<T>> {
    let schema = AttributeSchema::lidc();
    samples.par_iter().map(|s| PreparedSample::new(s, cfg, &schema)).collect()
}
