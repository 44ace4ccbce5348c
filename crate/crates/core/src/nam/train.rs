//! Mini-batch gradient descent over the additive head with checkpointing at
//! fixed fractions of each epoch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{mean_feature, sigmoid, Example, ModelError, RiskModel};
use crate::eval::macro_auroc;
use crate::keyed::keyed_rng;
use crate::labeler::ConditionSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoints_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
            checkpoints_per_epoch: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    /// 1-based position in the run.
    pub index: usize,
    pub epoch: usize,
    /// Fraction of training completed, in epochs (e.g. 0.05, 0.10, ...).
    pub progress: f64,
    pub steps: usize,
    pub train_loss: f64,
    /// Absent when some condition has a single class in validation.
    pub validation_macro_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RiskModel,
    pub history: Vec<CheckpointRecord>,
    /// Index into `history` of the selected checkpoint.
    pub best: usize,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy averaged over examples and conditions, and its
/// gradient with respect to each weight vector:
/// `(1 / (N·Q)) Σ_n (p_ni − y_ni) · mean_j f(e_nj)`.
pub fn loss_and_gradient(model: &RiskModel, batch: &[Example]) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let means = batch
        .iter()
        .map(|ex| check_example(model, ex).map(|_| mean_feature(&ex.features, model.d)))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<&[bool]> = batch.iter().map(|ex| ex.labels.as_slice()).collect();
    loss_and_gradient_means(model, &means, &labels)
}

fn check_example(model: &RiskModel, ex: &Example) -> Result<(), ModelError> {
    if ex.labels.len() != model.num_conditions() {
        return Err(ModelError::Example {
            id: ex.id.clone(),
            message: format!("{} labels for {} conditions", ex.labels.len(), model.num_conditions()),
        });
    }
    for f in &ex.features {
        if f.len() != model.d {
            return Err(ModelError::Dimension {
                expected: model.d,
                got: f.len(),
            });
        }
    }
    Ok(())
}

fn loss_and_gradient_means(
    model: &RiskModel,
    means: &[Vec<f64>],
    labels: &[&[bool]],
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    if means.is_empty() {
        return Err(ModelError::EmptyData("loss over an empty batch".into()));
    }
    let q = model.num_conditions();
    let scale = 1.0 / (means.len() * q) as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; model.d]; q];
    for (mean, y) in means.iter().zip(labels) {
        for i in 0..q {
            let z = model.biases[i] + super::dot(&model.weights[i], mean);
            let target = if y[i] { 1.0 } else { 0.0 };
            loss += softplus(z) - target * z;
            let residual = sigmoid(z) - target;
            for (g, x) in grad[i].iter_mut().zip(mean) {
                *g += residual * x;
            }
        }
    }
    grad.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

fn prevalence(examples: &[Example], conditions: &ConditionSet) -> Result<Vec<f64>, ModelError> {
    let n = examples.len() as f64;
    (0..conditions.len())
        .map(|i| {
            let pos = examples.iter().filter(|e| e.labels[i]).count();
            let p = pos as f64 / n;
            if pos == 0 || pos == examples.len() {
                Err(ModelError::Prevalence {
                    condition: conditions.as_slice()[i].clone(),
                    value: p,
                })
            } else {
                Ok(p)
            }
        })
        .collect()
}

/// Macro-AUROC of `model` over `examples`, `None` if any condition is single-class.
pub fn validation_auroc(model: &RiskModel, examples: &[Example]) -> Result<Option<f64>, ModelError> {
    let mut scores = vec![Vec::with_capacity(examples.len()); model.num_conditions()];
    let mut labels = vec![Vec::with_capacity(examples.len()); model.num_conditions()];
    for ex in examples {
        let p = model.predict(&ex.features)?;
        for i in 0..model.num_conditions() {
            scores[i].push(p.probabilities[i]);
            labels[i].push(ex.labels[i]);
        }
    }
    Ok(macro_auroc(&scores, &labels))
}

/// Trains from zero weights with biases fixed to the training prevalence and
/// returns the checkpoint with the highest validation macro-AUROC (earliest on
/// ties; undefined AUROC never wins over a defined one).
///
/// Each epoch visits a seeded shuffle of the training set, cut into
/// `checkpoints_per_epoch` consecutive segments of `⌊kN/C⌋ − ⌊(k−1)N/C⌋`
/// examples; each segment is consumed in mini-batches of at most
/// `batch_size`, then a checkpoint is recorded.
pub fn train(
    train_set: &[Example],
    validation: &[Example],
    conditions: &ConditionSet,
    d: usize,
    embedder_id: &str,
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if train_set.is_empty() {
        return Err(ModelError::EmptyData("training set is empty".into()));
    }
    if validation.is_empty() {
        return Err(ModelError::EmptyData("validation set is empty".into()));
    }
    if config.batch_size == 0 || config.checkpoints_per_epoch == 0 {
        return Err(ModelError::EmptyData(
            "batch_size and checkpoints_per_epoch must be positive".into(),
        ));
    }
    let mut model = RiskModel::new(conditions.clone(), d, prevalence(train_set, conditions)?, embedder_id)?;
    for ex in train_set.iter().chain(validation) {
        check_example(&model, ex)?;
    }
    let means: Vec<Vec<f64>> = train_set.iter().map(|ex| mean_feature(&ex.features, d)).collect();
    let labels: Vec<&[bool]> = train_set.iter().map(|ex| ex.labels.as_slice()).collect();

    let n = train_set.len();
    let c = config.checkpoints_per_epoch;
    let mut history = Vec::with_capacity(config.epochs * c);
    let mut best: Option<(usize, Option<f64>, RiskModel)> = None;
    let mut steps = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(config.seed, "train.epoch", &epoch.to_string()));
        for k in 1..=c {
            let segment = &order[(k - 1) * n / c..k * n / c];
            for batch in segment.chunks(config.batch_size) {
                let bm: Vec<Vec<f64>> = batch.iter().map(|&j| means[j].clone()).collect();
                let bl: Vec<&[bool]> = batch.iter().map(|&j| labels[j]).collect();
                let (_, grad) = loss_and_gradient_means(&model, &bm, &bl)?;
                for (w, g) in model.weights.iter_mut().zip(&grad) {
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= config.learning_rate * gi;
                    }
                }
                steps += 1;
            }
            let (train_loss, _) = loss_and_gradient_means(&model, &means, &labels)?;
            let auroc = validation_auroc(&model, validation)?;
            let index = history.len();
            history.push(CheckpointRecord {
                index: index + 1,
                epoch: epoch + 1,
                progress: epoch as f64 + k as f64 / c as f64,
                steps,
                train_loss,
                validation_macro_auroc: auroc,
            });
            let better = match &best {
                None => true,
                Some((_, prev, _)) => match (auroc, prev) {
                    (Some(a), Some(b)) => a > *b,
                    (Some(_), None) => true,
                    _ => false,
                },
            };
            if better {
                best = Some((index, auroc, model.clone()));
            }
            log::debug!("checkpoint {} epoch {} loss {train_loss:.5} auroc {auroc:?}", index + 1, epoch + 1);
        }
    }
    let (best_index, _, best_model) = match best {
        Some(b) => b,
        // zero epochs: the initial model is the only candidate
        None => (0, None, model),
    };
    Ok(TrainOutcome {
        model: best_model,
        history,
        best: best_index,
    })
}
