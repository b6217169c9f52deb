//! Downstream isolated-sign classification: temporal attention pooling over
//! the encoder features, a linear classifier trained with cross-entropy,
//! fine-tuning from a pretraining checkpoint, and late score fusion.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{topk_accuracy, AccuracyMode};
use crate::model::{
    forward_features, init_backbone, init_classifier_head, is_backbone_param, register_params,
    tokenize, Backbone, ModelConfig, ParamStore,
};
use crate::numerics::{
    adam_learning_rate, AdamParams, Graph, OptimizerState, Result as NumResult, Scalar, Var,
};
use crate::posedata::{HandSequence, SamplingMode};
use crate::pretrain::TrainError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: u32,
    pub batch_size: usize,
    /// fraction of the dataset held out for evaluation by the CLI
    pub heldout_fraction: f64,
    /// overrides the class count inferred from labels when set
    pub class_count: Option<usize>,
    /// fuse softmax probabilities instead of raw logits
    pub fuse_probabilities: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 40,
            batch_size: 8,
            heldout_fraction: 0.5,
            class_count: None,
            fuse_probabilities: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(format!(
                "heldout_fraction {} outside [0,1)",
                self.heldout_fraction
            ));
        }
        Ok(())
    }
}

/// Softmax attention over tokens; output is the weighted sum `(1, d)` and
/// lies in the convex hull of the token features.
pub fn attention_pool<T: Scalar>(
    g: &mut Graph<T>,
    score_w: Var, // (d, 1)
    score_b: Var, // (1,)
    features: Var, // (n, d)
) -> NumResult<Var> {
    let scores = g.matmul(features, score_w)?;
    let scores = g.add(scores, score_b)?;
    let row = g.transpose(scores)?; // (1, n)
    let alpha = g.softmax_rows(row)?;
    g.matmul(alpha, features)
}

/// Linear logits over classes, `(1, K)`.
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    class_w: Var,
    class_b: Var,
    pooled: Var,
) -> NumResult<Var> {
    let logits = g.matmul(pooled, class_w)?;
    g.add(logits, class_b)
}

/// Cross-entropy of a single logit row against an integer label.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var, // (1, K)
    label: usize,
) -> Result<Var, TrainError> {
    let classes = g.shape(logits)[1];
    if label >= classes {
        return Err(TrainError::Config(format!(
            "label {label} outside [0, {classes})"
        )));
    }
    let log_probs = g.log_softmax_rows(logits)?;
    let mut one_hot = Array2::<T>::zeros((1, classes));
    one_hot[[0, label]] = T::one();
    let oh = g.input2(one_hot)?;
    let picked = g.mul(log_probs, oh)?;
    let s = g.sum(picked)?;
    Ok(g.neg(s)?)
}

/// Elementwise late fusion of two score vectors.
pub fn fuse_logits(a: &[f64], b: &[f64]) -> Result<Vec<f64>, TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::Config(format!(
            "score lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

/// Accuracy report emitted after fine-tuning or evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_pi: f64,
    pub top5_pi: f64,
    pub top1_pc: f64,
    pub top5_pc: f64,
    pub per_class_counts: Vec<usize>,
}

pub fn metrics_report(
    scores: &Array2<f64>,
    labels: &[usize],
) -> Result<MetricsReport, TrainError> {
    let classes = scores.ncols();
    let k5 = 5.min(classes);
    let mut per_class_counts = vec![0usize; classes];
    for &l in labels {
        per_class_counts[l] += 1;
    }
    Ok(MetricsReport {
        top1_pi: topk_accuracy(scores, labels, 1, AccuracyMode::PerInstance)?,
        top5_pi: topk_accuracy(scores, labels, k5, AccuracyMode::PerInstance)?,
        top1_pc: topk_accuracy(scores, labels, 1, AccuracyMode::PerClass)?,
        top5_pc: topk_accuracy(scores, labels, k5, AccuracyMode::PerClass)?,
        per_class_counts,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneEpochLog {
    pub epoch: u32,
    pub loss: f64,
    pub lr: f64,
}

pub struct FinetuneOutcome<T> {
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    pub logs: Vec<FinetuneEpochLog>,
    pub report: MetricsReport,
    /// per-eval-sequence logits, row-aligned with `labels`
    pub scores: Array2<f64>,
    pub labels: Vec<usize>,
    /// master RNG as it stood when training finished
    pub final_rng: ChaCha20Rng,
}

fn infer_class_count(data: &[&HandSequence]) -> Result<usize, TrainError> {
    let mut max = None;
    for seq in data {
        match seq.label {
            Some(l) => max = Some(max.map_or(l, |m: usize| m.max(l))),
            None => {
                return Err(TrainError::Config(format!(
                    "sequence {} has no label",
                    seq.source_id
                )))
            }
        }
    }
    max.map(|m| m + 1).ok_or(TrainError::EmptyDataset)
}

/// Load backbone weights from a pretraining (or earlier fine-tuning)
/// checkpoint store; the hand-model decoder head is discarded, the
/// classifier head stays fresh unless the checkpoint also has one, in which
/// case its class count must match.
fn load_from_checkpoint<T: Scalar>(
    params: &mut ParamStore<T>,
    checkpoint: &ParamStore<T>,
    classes: usize,
) -> Result<(), TrainError> {
    if let Some(i) = checkpoint.index_of("head.class_b") {
        let ck_classes = checkpoint.arrays()[i].len();
        if ck_classes != classes {
            return Err(TrainError::ClassCountMismatch {
                checkpoint: ck_classes,
                run: classes,
            });
        }
    }
    for (name, arr) in checkpoint.iter() {
        let loadable = is_backbone_param(name) || name.starts_with("head.");
        if !loadable {
            continue; // latent head and optimizer leftovers are dropped
        }
        match params.index_of(name) {
            Some(i) => {
                if params.arrays()[i].shape() != arr.shape() {
                    return Err(TrainError::Config(format!(
                        "checkpoint parameter {name} has shape {:?}, run expects {:?}",
                        arr.shape(),
                        params.arrays()[i].shape()
                    )));
                }
                params.arrays_mut()[i] = arr.clone();
            }
            None => {
                return Err(TrainError::Config(format!(
                    "checkpoint parameter {name} does not exist in this architecture"
                )))
            }
        }
    }
    Ok(())
}

/// Logits for one sequence with the trained parameters (center sampling,
/// no dropout).
pub fn predict_logits<T: Scalar>(
    seq: &HandSequence,
    model_cfg: &ModelConfig,
    backbone: &Backbone,
    params: &ParamStore<T>,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let batch = tokenize(seq, model_cfg.frames, SamplingMode::Center, &mut rng)?;
    let mut g = Graph::<T>::new();
    let reg = register_params(&mut g, params)?;
    let features = forward_features(
        &mut g,
        model_cfg,
        backbone,
        &reg,
        &batch.coords,
        &batch.times,
        &batch.chirality,
        None,
    )?;
    let pooled = attention_pool(&mut g, reg.get("head.score_w"), reg.get("head.score_b"), features)?;
    let logits = classify(&mut g, reg.get("head.class_w"), reg.get("head.class_b"), pooled)?;
    let v = g.value(logits);
    Ok(v.iter().map(|x| x.as_f64()).collect())
}

/// Supervised fine-tuning. `train` and `eval` are explicit splits; the
/// returned report is computed on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_run<T: Scalar>(
    train: &[&HandSequence],
    eval: &[&HandSequence],
    model_cfg: &ModelConfig,
    ft_cfg: &FinetuneConfig,
    adam: &AdamParams,
    checkpoint: Option<&ParamStore<T>>,
    seed: u64,
    mut on_epoch: impl FnMut(&FinetuneEpochLog),
) -> Result<FinetuneOutcome<T>, TrainError> {
    model_cfg.validate().map_err(TrainError::Config)?;
    ft_cfg.validate().map_err(TrainError::Config)?;
    if train.is_empty() || eval.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let inferred = infer_class_count(train)?.max(infer_class_count(eval)?);
    let classes = match ft_cfg.class_count {
        Some(k) if k < inferred => {
            return Err(TrainError::Config(format!(
                "class_count {k} below the labels present ({inferred})"
            )))
        }
        Some(k) => k,
        None => inferred,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let backbone = Backbone::new();
    let mut params = ParamStore::<T>::new();
    init_backbone(model_cfg, &mut rng, &mut params);
    init_classifier_head(model_cfg, classes, &mut rng, &mut params);
    if let Some(ck) = checkpoint {
        load_from_checkpoint(&mut params, ck, classes)?;
    }
    let shapes = params.shapes();
    let mut optimizer = OptimizerState::<T>::new(adam.clone(), &shapes);

    let mut logs = Vec::with_capacity(ft_cfg.epochs as usize);
    for epoch in 0..ft_cfg.epochs {
        let lr = adam_learning_rate(adam, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(ft_cfg.batch_size).enumerate() {
            let mut grad_accum: Vec<ArrayD<T>> = params
                .arrays()
                .iter()
                .map(|a| ArrayD::zeros(a.raw_dim()))
                .collect();
            for &si in chunk {
                let seq = train[si];
                let label = seq.label.expect("labels checked above");
                let batch = tokenize(seq, model_cfg.frames, SamplingMode::Random, &mut rng)?;
                let mut g = Graph::<T>::new();
                let reg = register_params(&mut g, &params)?;
                let loss = (|| -> Result<Var, TrainError> {
                    let features = forward_features(
                        &mut g,
                        model_cfg,
                        &backbone,
                        &reg,
                        &batch.coords,
                        &batch.times,
                        &batch.chirality,
                        Some(&mut rng),
                    )?;
                    let pooled = attention_pool(
                        &mut g,
                        reg.get("head.score_w"),
                        reg.get("head.score_b"),
                        features,
                    )?;
                    let logits = classify(
                        &mut g,
                        reg.get("head.class_w"),
                        reg.get("head.class_b"),
                        pooled,
                    )?;
                    cross_entropy(&mut g, logits, label)
                })()
                .map_err(|e| match e {
                    TrainError::Numerics(source) => TrainError::Batch {
                        epoch,
                        batch: batch_idx,
                        source,
                    },
                    other => other,
                })?;
                epoch_loss += g.scalar_value(loss).as_f64();
                seen += 1;
                let grads = g.backward(loss).map_err(|source| TrainError::Batch {
                    epoch,
                    batch: batch_idx,
                    source,
                })?;
                for (accum, var) in grad_accum.iter_mut().zip(&reg.vars) {
                    if let Some(gr) = grads.try_get(*var) {
                        *accum += gr;
                    }
                }
            }
            let scale = T::from_f64(1.0 / chunk.len() as f64);
            for gacc in grad_accum.iter_mut() {
                gacc.mapv_inplace(|v| v * scale);
            }
            optimizer
                .adam_step(params.arrays_mut(), &grad_accum, lr)
                .map_err(|source| TrainError::Batch {
                    epoch,
                    batch: batch_idx,
                    source,
                })?;
        }
        let log = FinetuneEpochLog {
            epoch,
            loss: epoch_loss / seen.max(1) as f64,
            lr,
        };
        on_epoch(&log);
        logs.push(log);
    }

    // evaluation with center sampling
    let mut scores = Array2::<f64>::zeros((eval.len(), classes));
    let mut labels = Vec::with_capacity(eval.len());
    for (i, seq) in eval.iter().enumerate() {
        let logits = predict_logits(seq, model_cfg, &backbone, &params, seed ^ 0xe7a1)?;
        for (c, v) in logits.iter().enumerate() {
            scores[[i, c]] = *v;
        }
        labels.push(seq.label.expect("labels checked above"));
    }
    let report = metrics_report(&scores, &labels)?;
    Ok(FinetuneOutcome {
        params,
        optimizer,
        logs,
        report,
        scores,
        labels,
        final_rng: rng,
    })
}
