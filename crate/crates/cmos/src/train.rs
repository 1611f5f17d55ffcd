//! Training protocol and cross-validated evaluation.
//!
//! Training is subject-batched: one step consumes one subject's 16 segments.
//! Non-local variants train in two phases: first the baseline (no NL blocks),
//! then the variant fine-tunes from that pre-trained model with freshly
//! inserted zero-theta blocks. Cross-validation splits by subject, never by
//! segment.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SubjectStudy;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{report_from_predictions, MetricsReport};
use crate::model::{
    build_model, forward, insert_nl_blocks, predict_scores, ModelConfig, ModelParams, ModelVars,
    Variant,
};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::tensor::{Graph, Tensor};

/// Subject-level k-fold split.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    /// Test subject ids per fold; the folds partition all subjects.
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

/// Seeded shuffle then round-robin assignment.
pub fn make_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || subject_ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} subjects into {k} folds",
            subject_ids.len()
        )));
    }
    let mut unique = subject_ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != subject_ids.len() {
        return Err(Error::InvalidArgument("duplicate subject ids".into()));
    }
    let mut shuffled = subject_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fold-shuffle"));
    shuffled.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan { folds, seed })
}

impl FoldPlan {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.folds
            .iter()
            .position(|f| f.iter().any(|s| s == subject_id))
    }

    /// Tab-separated `subject  fold` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, fold) in self.folds.iter().enumerate() {
            for id in fold {
                out.push_str(&format!("{id}\t{i}\n"));
            }
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<FoldPlan> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut folds: Vec<Vec<String>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, fold) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected `subject<TAB>fold`", path.display(), lineno + 1))
            })?;
            let fold: usize = fold.trim().parse().map_err(|_| {
                Error::Format(format!("{}:{}: bad fold index", path.display(), lineno + 1))
            })?;
            while folds.len() <= fold {
                folds.push(Vec::new());
            }
            folds[fold].push(id.to_string());
        }
        Ok(FoldPlan { folds, seed: 0 })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Baseline phase epochs.
    pub epochs: usize,
    /// Fine-tune phase epochs (non-local variants only).
    pub fine_tune_epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Early-stop patience on held-out loss; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            fine_tune_epochs: 30,
            lr: 1e-3,
            optimizer: OptimizerKind::adam_default(),
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training history CSV.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: &'static str,
    pub loss: f64,
    pub holdout_acc: Option<f64>,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,phase,loss,holdout_acc\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.epoch,
            r.phase,
            r.loss,
            r.holdout_acc
                .map(|a| format!("{a:.6}"))
                .unwrap_or_else(|| "nan".into())
        ));
    }
    crate::io::write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
}

fn subject_labels(study: &SubjectStudy) -> Result<Vec<usize>> {
    study.labels().ok_or_else(|| {
        Error::InvalidArgument(format!(
            "subject {} has unlabeled segments; training and evaluation need full labels",
            study.subject_id
        ))
    })
}

/// One optimizer step on one subject batch; returns the loss.
fn train_step(
    params: &mut ModelParams<f32>,
    optimizer: &mut Optimizer<f32>,
    study: &SubjectStudy,
    context: &str,
) -> Result<f64> {
    let labels = subject_labels(study)?;
    let mut g = Graph::<f32>::new();
    let vars = ModelVars::register(&mut g, params, true)?;
    let batch = g.input(study.batch::<f32>())?;
    let logits = forward(&mut g, &vars, &params.config, batch)?;
    let loss = g.cross_entropy(logits, &labels)?;
    let loss_val = g.value(loss).data()[0] as f64;
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss at {context} (subject {})",
            study.subject_id
        )));
    }
    g.backward(loss)?;
    let grads: Vec<Tensor<f32>> = vars
        .ordered_vars()
        .iter()
        .map(|&v| {
            g.grad(v)
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
        })
        .collect();
    let mut named = params.named_tensors_mut();
    let mut refs: Vec<(&str, &mut Tensor<f32>)> = named
        .iter_mut()
        .map(|(n, t)| (n.as_str(), &mut **t))
        .collect();
    optimizer.step(&mut refs, &grads)?;
    Ok(loss_val)
}

/// Mean cross-entropy loss over subjects without touching parameters.
fn eval_loss(params: &ModelParams<f32>, subjects: &[SubjectStudy]) -> Result<f64> {
    let mut total = 0.0;
    for study in subjects {
        let labels = subject_labels(study)?;
        let mut g = Graph::<f32>::new();
        let vars = ModelVars::register(&mut g, params, false)?;
        let batch = g.input(study.batch::<f32>())?;
        let logits = forward(&mut g, &vars, &params.config, batch)?;
        let loss = g.cross_entropy(logits, &labels)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / subjects.len() as f64)
}

/// Segment accuracy over subjects.
pub fn accuracy(params: &ModelParams<f32>, subjects: &[SubjectStudy]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for study in subjects {
        let labels = subject_labels(study)?;
        let pred = predict_scores(params, study)?;
        correct += pred
            .scores
            .iter()
            .zip(&labels)
            .filter(|(&p, &t)| p as usize == t)
            .count();
        total += labels.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Runs one training phase, recording history and early-stopping on held-out
/// loss. Returns the best-held-out parameters (or the final ones when no
/// holdout is given).
#[allow(clippy::too_many_arguments)]
fn run_phase(
    mut params: ModelParams<f32>,
    train_set: &[SubjectStudy],
    holdout: Option<&[SubjectStudy]>,
    config: &TrainConfig,
    phase: &'static str,
    epochs: usize,
    history: &mut Vec<EpochRecord>,
    mut on_epoch: impl FnMut(usize, f64, Option<f64>),
) -> Result<ModelParams<f32>> {
    let mut optimizer = Optimizer::new(OptimizerConfig::new(config.optimizer, config.lr))?;
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &format!("{phase}-epoch-{epoch}"),
        ));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, &si) in order.iter().enumerate() {
            let context = format!("{phase} epoch {epoch}, step {step}");
            loss_sum += train_step(&mut params, &mut optimizer, &train_set[si], &context)?;
        }
        let mean_loss = loss_sum / train_set.len() as f64;
        let holdout_acc = match holdout {
            Some(h) => Some(accuracy(&params, h)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            phase,
            loss: mean_loss,
            holdout_acc,
        });
        on_epoch(epoch, mean_loss, holdout_acc);
        if let Some(h) = holdout {
            let h_loss = eval_loss(&params, h)?;
            let improved = best.as_ref().map_or(true, |(b, _)| h_loss < *b);
            if improved {
                best = Some((h_loss, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience > 0 && since_best >= config.patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((_, p)) => p,
        None => params,
    })
}

/// Full training protocol for a variant: baseline phase, then (for non-local
/// variants) insertion and fine-tuning of the whole parameter set.
pub fn train(
    train_set: &[SubjectStudy],
    holdout: Option<&[SubjectStudy]>,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(train_set, holdout, model_config, config, |_, _, _, _| {})
}

/// `train` with a per-epoch callback `(phase, epoch, loss, holdout_acc)`.
pub fn train_with_progress(
    train_set: &[SubjectStudy],
    holdout: Option<&[SubjectStudy]>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut progress: impl FnMut(&'static str, usize, f64, Option<f64>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for s in train_set {
        subject_labels(s)?;
    }
    let variant = model_config.variant;
    let mut history = Vec::new();

    let mut baseline_config = model_config.clone();
    baseline_config.variant = Variant::Baseline;
    let baseline = build_model::<f32>(&baseline_config)?;
    let baseline = run_phase(
        baseline,
        train_set,
        holdout,
        config,
        "baseline",
        config.epochs,
        &mut history,
        |e, l, a| progress("baseline", e, l, a),
    )?;

    let params = if variant == Variant::Baseline {
        baseline
    } else {
        let inserted = insert_nl_blocks(&baseline, variant)?;
        run_phase(
            inserted,
            train_set,
            holdout,
            config,
            "fine-tune",
            config.fine_tune_epochs,
            &mut history,
            |e, l, a| progress("fine-tune", e, l, a),
        )?
    };
    Ok(TrainOutcome { params, history })
}

/// Cross-validated evaluation: each subject is scored by the model of the
/// fold that held it out, predictions are pooled, and the metric set is
/// computed once over the pool (with a per-fold accuracy breakdown).
pub fn evaluate(
    fold_models: &[(ModelParams<f32>, Vec<String>)],
    dataset: &[SubjectStudy],
) -> Result<MetricsReport> {
    let mut predictions = Vec::with_capacity(dataset.len());
    for study in dataset {
        let fold = fold_models
            .iter()
            .position(|(_, test_ids)| test_ids.iter().any(|id| id == &study.subject_id))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "subject {} is not in any fold's test set",
                    study.subject_id
                ))
            })?;
        let truth: Vec<u8> = subject_labels(study)?.iter().map(|&l| l as u8).collect();
        let pred = predict_scores(&fold_models[fold].0, study)?;
        predictions.push((fold, pred.scores, truth));
    }
    report_from_predictions(&predictions)
}

/// Evaluation of a single model over every subject (no fold structure).
pub fn evaluate_single(
    params: &ModelParams<f32>,
    dataset: &[SubjectStudy],
) -> Result<MetricsReport> {
    let ids: Vec<String> = dataset.iter().map(|s| s.subject_id.clone()).collect();
    evaluate(&[(params.clone(), ids)], dataset)
}
