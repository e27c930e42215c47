use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DualEncoder, DualEncoderConfig, RewardError};
use crate::autograd::{Grads, Tape};
use crate::metrics::MetricsWriter;
use crate::optim::{AdamW, AdamWConfig, LrSchedule, ScheduleKind};
use crate::preference::{total_loss_with_grad, LossTerms, TupleEmbeddings};
use crate::rng::stream_rng;
use crate::synthworld::SciTuple;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardHyper {
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl RewardHyper {
    /// The large-scale recipe: batch 128, lr 2e-6, cosine, weight decay 0.3,
    /// 600 steps with 150 warmup, λ = 0.25.
    pub fn paper_faithful() -> Self {
        Self {
            batch_size: 128,
            lr: 2e-6,
            schedule: ScheduleKind::Cosine,
            warmup_steps: 150,
            steps: 600,
            weight_decay: 0.3,
            lambda: 0.25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    /// Toy-world recipe: same schedule shape, batch 32 and lr 1e-3.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 40,
            steps: 400,
            ..Self::paper_faithful()
        }
    }

    fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: &str| Err(RewardError::Hyper(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            kind: self.schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub ipa: f64,
    pub iee_pos: f64,
    pub iee_neg: f64,
    pub lr: f64,
    pub temperature: f64,
}

pub struct TrainOutcome {
    pub model: DualEncoder,
    pub history: Vec<RewardStepMetrics>,
}

/// Mean tuple loss over `batch` and its parameter gradients.
pub fn batch_loss_and_grads(
    model: &DualEncoder,
    batch: &[&SciTuple],
    lambda: f64,
) -> Result<(LossTerms, Grads), RewardError> {
    let b = batch.len();
    let mut texts = Vec::with_capacity(3 * b);
    let mut images = Vec::with_capacity(2 * b);
    for t in batch {
        texts.push(model.tokenize(&t.implicit_prompt)?);
        texts.push(model.tokenize(&t.explicit_prompt)?);
        texts.push(model.tokenize(&t.superficial_prompt)?);
        images.push(&t.explicit_image);
        images.push(&t.superficial_image);
    }
    let mut tape = Tape::new();
    let tv = model.text_forward(&mut tape, &texts);
    let iv = model.image_forward(&mut tape, &images);
    let (te, ie) = (tape.value(tv).clone(), tape.value(iv).clone());
    let d = te.cols;
    let mut gt = Matrix::zeros(te.rows, d);
    let mut gi = Matrix::zeros(ie.rows, d);
    let mut glog_t = 0.0;
    let mut sum = [0.0; 4];
    let t = model.temperature();
    let inv = 1.0 / b as f64;
    for k in 0..b {
        let emb = TupleEmbeddings {
            implicit_prompt: te.row(3 * k),
            explicit_prompt: te.row(3 * k + 1),
            superficial_prompt: te.row(3 * k + 2),
            explicit_image: ie.row(2 * k),
            superficial_image: ie.row(2 * k + 1),
        };
        let (terms, g) = total_loss_with_grad(&emb, t, lambda)?;
        sum[0] += terms.total;
        sum[1] += terms.ipa;
        sum[2] += terms.iee_pos;
        sum[3] += terms.iee_neg;
        for (row, src) in [
            (3 * k, &g.implicit_prompt),
            (3 * k + 1, &g.explicit_prompt),
            (3 * k + 2, &g.superficial_prompt),
        ] {
            for (o, v) in gt.row_mut(row).iter_mut().zip(src) {
                *o += inv * v;
            }
        }
        for (row, src) in [(2 * k, &g.explicit_image), (2 * k + 1, &g.superficial_image)] {
            for (o, v) in gi.row_mut(row).iter_mut().zip(src) {
                *o += inv * v;
            }
        }
        glog_t += inv * g.log_temperature;
    }
    let mut grads = tape.backward(&[(tv, &gt), (iv, &gi)], model.params.len());
    if model.params.is_trainable(model.log_temperature_id()) {
        grads.params[model.log_temperature_id().0] = Some(Matrix::filled(1, 1, glog_t));
    }
    let terms = LossTerms {
        ipa: sum[1] * inv,
        iee_pos: sum[2] * inv,
        iee_neg: sum[3] * inv,
        lambda_weight: lambda,
        total: sum[0] * inv,
    };
    Ok((terms, grads))
}

/// Trains both encoders (and the temperature) on the tuples' total loss.
pub fn train_sciscore(
    tuples: &[SciTuple],
    config: DualEncoderConfig,
    hyper: &RewardHyper,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome, RewardError> {
    hyper.validate()?;
    if tuples.is_empty() {
        return Err(RewardError::Empty("training manifest"));
    }
    let mut model = DualEncoder::new(config);
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            beta1: hyper.adam_beta1,
            beta2: hyper.adam_beta2,
            eps: hyper.adam_eps,
            weight_decay: hyper.weight_decay,
        },
    );
    let schedule = hyper.schedule();
    let mut metrics = MetricsWriter::optional(metrics_path)?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut history = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size {
            if cursor == order.len() {
                order = (0..tuples.len()).collect();
                order.shuffle(&mut stream_rng(hyper.seed, 1 + epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(&tuples[order[cursor]]);
            cursor += 1;
        }
        let (terms, grads) = batch_loss_and_grads(&model, &batch, hyper.lambda)?;
        if !terms.total.is_finite() || !grads.is_finite() {
            return Err(RewardError::NonFiniteLoss(step));
        }
        let lr = schedule.lr_at(step);
        opt.step(&mut model.params, &grads, lr);
        model.step += 1;
        let rec = RewardStepMetrics {
            step,
            loss: terms.total,
            ipa: terms.ipa,
            iee_pos: terms.iee_pos,
            iee_neg: terms.iee_neg,
            lr,
            temperature: model.temperature(),
        };
        metrics.write(&rec)?;
        history.push(rec);
    }
    metrics.flush()?;
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{plan_dataset, standard_world, DatasetConfig};

    fn tiny() -> (Vec<SciTuple>, DualEncoderConfig) {
        let w = standard_world();
        let tuples = plan_dataset(
            &w,
            &DatasetConfig {
                variants_per_combo: 1,
                ..Default::default()
            },
        )
        .unwrap();
        (tuples, DualEncoderConfig::new(w.vocabulary(), 5))
    }

    #[test]
    fn initial_loss_is_near_symmetric() {
        let (tuples, cfg) = tiny();
        let model = DualEncoder::new(cfg);
        let batch: Vec<&SciTuple> = tuples.iter().take(64).collect();
        let (terms, _) = batch_loss_and_grads(&model, &batch, 0.25).unwrap();
        let expected = 1.5 * std::f64::consts::LN_2;
        assert!((terms.total - expected).abs() <= 0.3 * expected, "{}", terms.total);
    }

    #[test]
    fn gradient_sparsity_follows_active_terms() {
        let (tuples, cfg) = tiny();
        let mut model = DualEncoder::new(cfg);
        let batch: Vec<&SciTuple> = tuples.iter().take(4).collect();
        for id in model.text_param_ids() {
            model.params.set_trainable(id, false);
        }
        let (_, g) = batch_loss_and_grads(&model, &batch, 0.25).unwrap();
        for id in model.text_param_ids() {
            assert!(g.get(id).is_none());
        }
        for id in model.image_param_ids() {
            assert!(g.get(id).map_or(false, |m| m.sq_norm() > 0.0), "{}", model.params.name(id));
        }
    }

    #[test]
    fn lambda_changes_the_checkpoint() {
        let (tuples, cfg) = tiny();
        let mut h = RewardHyper::desk();
        h.steps = 3;
        h.batch_size = 8;
        let a = train_sciscore(&tuples, cfg.clone(), &h, None).unwrap();
        h.lambda = 0.0;
        let b = train_sciscore(&tuples, cfg, &h, None).unwrap();
        assert_ne!(a.model.params, b.model.params);
        assert_eq!(a.history.len(), 3);
    }
}
