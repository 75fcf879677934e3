//! Losses, dataset construction, the optimizer, the training loop and
//! finite-difference gradient checking.

pub mod dataset;
pub mod gradcheck;
pub mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PreparedCorpus;
use crate::error::{Error, Result};
use crate::evaluation::{criteria_metrics, CriteriaMetrics};
use crate::model::{LossSettings, ModelParams, PairEvaluation};
use crate::nn::Parameters;
use crate::training::dataset::{Dataset, LabeledPair, Split};

pub use dataset::{make_dataset, CriterionRef, Enrollment};
pub use gradcheck::{grad_check, grad_check_against, GradCheckEntry, GradCheckReport};
pub use loss::{classification_loss, distance_loss, total_loss, PairLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub use_distance_loss: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Run every batch on the calling thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            margin: 0.3,
            use_distance_loss: true,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::Config("margin must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            margin: self.margin,
            use_distance_loss: self.use_distance_loss,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(config: &TrainConfig, params: &ModelParams) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut p = params.named_tensors_mut();
        let g = grad.named_tensors();
        let mut m = self.m.named_tensors_mut();
        let mut v = self.v.named_tensors_mut();
        for (((p, g), m), v) in p.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let p = p.1.data_mut();
            let g = g.1.data();
            let m = m.1.data_mut();
            let v = v.1.data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Pairs per gradient chunk. Chunks are reduced in index order, so the summed
/// gradient does not depend on how many threads ran them.
const GRAD_CHUNK: usize = 8;

fn scale(grad: &mut ModelParams, factor: f64) {
    for (_, t) in grad.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= factor);
    }
}

fn add_into(acc: &mut ModelParams, other: &ModelParams) {
    for ((_, a), (_, b)) in acc.named_tensors_mut().into_iter().zip(other.named_tensors()) {
        a.add_scaled(b, 1.0);
    }
}

fn check_finite(batch: usize, eval: &PairEvaluation) -> Result<()> {
    if !eval.classification.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch,
            term: format!("classification loss {}", eval.classification),
        });
    }
    if !eval.distance.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch,
            term: format!("distance loss {}", eval.distance),
        });
    }
    Ok(())
}

/// Mean loss and mean gradient over `batch`.
pub fn batch_gradient(
    params: &ModelParams,
    corpus: &PreparedCorpus,
    batch: &[&LabeledPair],
    settings: &LossSettings,
    parallel: bool,
    batch_index: usize,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let run_chunk = |chunk: &[&LabeledPair]| -> Result<(Vec<PairLoss>, ModelParams)> {
        let mut grad = params.zeros_like();
        let mut losses = Vec::with_capacity(chunk.len());
        for pair in chunk {
            let eval = params.accumulate_pair(&corpus.pair_input(pair)?, settings, &mut grad)?;
            check_finite(batch_index, &eval)?;
            losses.push(PairLoss {
                classification: eval.classification,
                distance: eval.distance,
            });
        }
        Ok((losses, grad))
    };
    let chunks: Vec<(Vec<PairLoss>, ModelParams)> = if parallel {
        batch.par_chunks(GRAD_CHUNK).map(run_chunk).collect::<Result<_>>()?
    } else {
        batch.chunks(GRAD_CHUNK).map(run_chunk).collect::<Result<_>>()?
    };
    let mut iter = chunks.into_iter();
    let (mut losses, mut grad) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        losses.extend(l);
        add_into(&mut grad, &g);
    }
    scale(&mut grad, 1.0 / batch.len() as f64);
    Ok((total_loss(&losses)?, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_auroc: Option<f64>,
    pub val_auprc: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch that scored best on validation.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
}

/// Metrics of `params` on `pairs`.
pub fn score_pairs(
    params: &ModelParams,
    corpus: &PreparedCorpus,
    pairs: &[&LabeledPair],
    settings: &LossSettings,
) -> Result<(CriteriaMetrics, Vec<PairEvaluation>)> {
    let evals = corpus.evaluate_pairs(params, pairs, settings)?;
    let preds: Vec<(Vec<f64>, _)> = evals
        .iter()
        .zip(pairs)
        .map(|(e, p)| (e.prediction.probs.clone(), p.label))
        .collect();
    Ok((criteria_metrics(&preds)?, evals))
}

fn better(candidate: (f64, f64), best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some(b) => candidate.0 > b.0 || (candidate.0 == b.0 && candidate.1 > b.1),
    }
}

/// Mini-batch Adam on the training split. After every epoch the validation
/// split is scored; the parameters with the best (accuracy, AUROC) are kept.
pub fn train(
    initial: ModelParams,
    corpus: &PreparedCorpus,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let settings = config.loss_settings();
    let train_pairs = dataset.pairs_in(Split::Train);
    if train_pairs.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let val_pairs = dataset.pairs_in(Split::Validation);
    let mut params = initial;
    let mut adam = Adam::new(config, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64)> = None;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let start = Instant::now();
    let mut batch_index = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledPair> = idx.iter().map(|&i| train_pairs[i]).collect();
            let (loss, grad) =
                batch_gradient(&params, corpus, &batch, &settings, !config.deterministic, batch_index)?;
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut params, &grad);
            batch_index += 1;
        }
        let train_loss = loss_sum / train_pairs.len() as f64;
        let (val_accuracy, val_auroc, val_auprc) = if val_pairs.is_empty() {
            (None, None, None)
        } else {
            let (m, _) = score_pairs(&params, corpus, &val_pairs, &settings)?;
            (Some(m.accuracy), m.auroc_micro, m.auprc_micro)
        };
        let key = (val_accuracy.unwrap_or(0.0), val_auroc.unwrap_or(0.0));
        if val_pairs.is_empty() || better(key, best) {
            best = Some(key);
            best_params = params.clone();
            best_epoch = epoch;
        }
        let row = EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
            val_auroc,
            val_auprc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            train_loss,
            val_accuracy = val_accuracy.unwrap_or(f64::NAN),
            val_auroc = val_auroc.unwrap_or(f64::NAN),
            "epoch finished"
        );
        log.push(row);
    }
    if config.epochs == 0 {
        best_params = params;
    }
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        log,
    })
}

/// Writes the per-epoch log as CSV. Without `timing` the wall-clock column
/// is dropped so that repeated runs produce identical bytes.
pub fn write_metrics_csv<W: std::io::Write>(w: W, log: &[EpochMetrics], timing: bool) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["epoch", "train_loss", "val_accuracy", "val_auroc", "val_auprc"];
    if timing {
        header.push("wall_seconds");
    }
    out.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in log {
        let mut row = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            opt(r.val_accuracy),
            opt(r.val_auroc),
            opt(r.val_auprc),
        ];
        if timing {
            row.push(format!("{:.3}", r.wall_seconds));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
