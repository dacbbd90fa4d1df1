//! End-to-end training: PK batches through the model, the composed
//! objective, reverse-mode gradients, Adam, and a per-step metrics log.

use std::collections::BTreeMap;

use crate::backbone::BN_MOMENTUM;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::losses::{self, LossValues, LossWeights};
use crate::model::Model;
use crate::optim::{Adam, LrSchedule};
use crate::rng::Rng;
use crate::sampler::{self, SamplerConfig};

pub const METRICS_HEADER: &str =
    "step,epoch,lr,ce_q,ce_p,ce_z,triplet_p,triplet_z,fdrt,ihtl,acm,total";

#[derive(Debug, Clone, PartialEq)]
pub enum TrainOutcome {
    Completed,
    /// Training stopped on a non-finite loss or gradient; the model holds the
    /// last finite parameters.
    NanAbort { step: u64, message: String },
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub outcome: TrainOutcome,
    pub metrics_csv: String,
    pub steps: u64,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
    pub per_step_total: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub sampler: SamplerConfig,
    pub schedule: LrSchedule,
    pub weights: LossWeights,
    pub seed: u64,
}

/// Map raw identity labels to contiguous class indices, in ascending id order.
pub fn class_map(samples: &[LabeledSample]) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect()
}

pub fn train(
    model: &mut Model,
    train_set: &[LabeledSample],
    settings: &TrainSettings,
) -> Result<TrainResult> {
    settings.sampler.validate()?;
    settings.schedule.validate()?;
    settings.weights.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let classes = class_map(train_set);
    if classes.len() != model.cfg.n_classes {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset holds {} identities",
            model.cfg.n_classes,
            classes.len()
        )));
    }
    if !model.cfg.branch_enabled && !model.cfg.train_gfb_ce {
        return Err(Error::Config(
            "a branchless model without the global CE has no training objective".into(),
        ));
    }

    let ids: Vec<u32> = train_set.iter().map(|s| s.id).collect();
    let by_id = sampler::group_by_id(&ids);
    let steps_per_epoch = train_set.len().div_ceil(settings.sampler.batch_size());

    let mut rng = Rng::new(settings.seed);
    let mut adam = Adam::new(&model.param_sizes());
    let names = model.param_names().to_vec();

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let mut per_step_total = Vec::new();
    let mut outcome = TrainOutcome::Completed;
    let mut step: u64 = 0;

    'epochs: for epoch in 0..settings.schedule.total_epochs {
        let lr = settings.schedule.lr_at(epoch)?;
        for _ in 0..steps_per_epoch {
            let indices = sampler::sample_batch(&by_id, &settings.sampler, &mut rng)?;
            let batch: Vec<&LabeledSample> = indices.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = indices.iter().map(|&i| classes[&train_set[i].id]).collect();

            let pass = model.forward_batch(&batch, labels.clone(), true)?;
            let crate::model::ForwardPass {
                mut tape,
                param_vars,
                q_stars,
                batch: branch_batch,
                cls_q,
                bn_stats,
                ..
            } = pass;

            let (loss_var, values) = match &branch_batch {
                Some(b) => losses::total_loss(
                    &mut tape,
                    &b.features,
                    &b.cls,
                    &settings.weights,
                    model.cfg.train_gfb_ce,
                )?,
                None => {
                    let ce = losses::ce_loss(&mut tape, q_stars, &labels, cls_q.0, cls_q.1)?;
                    let v = tape.value(ce).data()[0];
                    (ce, LossValues { ce_q: v, total: v, ..Default::default() })
                }
            };

            if !values.total.is_finite() {
                outcome = TrainOutcome::NanAbort {
                    step: step + 1,
                    message: format!("non-finite total loss {} at step {}", values.total, step + 1),
                };
                break 'epochs;
            }

            let grads = tape.backward(loss_var)?;
            let sizes = model.param_sizes();
            let grad_vecs: Vec<Vec<f64>> = param_vars
                .iter()
                .zip(&sizes)
                .map(|(&v, &n)| grads.dense(v, n))
                .collect();

            let mut params = model.param_data();
            if let Err(e) = adam.step(&mut params, &grad_vecs, &names, lr) {
                match e {
                    Error::Numeric(msg) => {
                        outcome = TrainOutcome::NanAbort { step: step + 1, message: msg };
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
            model.apply_param_data(params)?;
            if let Some((mean, var)) = &bn_stats {
                model.update_bn_stats(mean, var, BN_MOMENTUM);
            }

            step += 1;
            csv.push_str(&format!(
                "{step},{epoch},{lr},{},{},{},{},{},{},{},{},{}\n",
                values.ce_q,
                values.ce_p,
                values.ce_z,
                values.triplet_p,
                values.triplet_z,
                values.fdrt,
                values.ihtl,
                values.acm,
                values.total
            ));
            per_step_total.push(values.total);
        }
    }

    Ok(TrainResult {
        outcome,
        metrics_csv: csv,
        steps: step,
        first_total: per_step_total.first().copied(),
        last_total: per_step_total.last().copied(),
        per_step_total,
    })
}
