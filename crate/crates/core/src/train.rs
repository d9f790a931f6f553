//! Mini-batch training with adaptive moments, evaluation, and data splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PartitionedGraph;
use crate::metrics::{Confusion, Metrics};
use crate::axlstm::CellKind;
use crate::model::{cross_entropy, forward, init_params, prepare, ModelConfig, PreparedSession, Variant};
use crate::numeric::{Params, Tape, Tensor};
use crate::skeleton::{Label, SkeletonSequence};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters, configuration, and partition masks of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: Params,
    pub head_graph: PartitionedGraph,
    pub body_graph: PartitionedGraph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub class: usize,
}

impl TrainedModel {
    /// A freshly initialised model seeded by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (head_graph, body_graph) = config.build_graphs()?;
        let params = init_params(&config, &head_graph, &body_graph, config.seed);
        Ok(Self {
            config,
            params,
            head_graph,
            body_graph,
        })
    }

    pub fn logits(&self, input: &PreparedSession) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            &self.config,
            &self.params,
            &self.head_graph,
            &self.body_graph,
            input,
        )?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    pub fn predict_prepared(&self, input: &PreparedSession) -> Result<Prediction> {
        let logits = self.logits(input)?;
        let probabilities = crate::model::probabilities(&logits);
        let class = argmax(&logits);
        Ok(Prediction {
            logits,
            probabilities,
            class,
        })
    }

    pub fn predict(&self, seq: &SkeletonSequence) -> Result<Prediction> {
        self.predict_prepared(&prepare(seq, &self.config)?)
    }

    /// Loss, gradients, and predicted class for one labelled session.
    pub fn loss_and_gradients(&self, input: &PreparedSession) -> Result<(f64, BTreeMap<String, Tensor>, usize)> {
        let label = input
            .label
            .ok_or_else(|| Error::Data(format!("session {} is unlabeled", input.session_id)))?;
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            &self.config,
            &self.params,
            &self.head_graph,
            &self.body_graph,
            input,
        )?;
        let pred = argmax(tape.value(out.logits).data());
        let loss = cross_entropy(&mut tape, out.logits, label)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.into_inner(), pred))
    }
}

fn argmax(v: &[f64]) -> usize {
    // ties resolve to the lower index
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adaptive-moment optimiser state.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    lr: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (i, (&gi, w)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the in-epoch predictions, made before each batch's update.
    pub train_accuracy: f64,
}

fn require_labels(dataset: &[SkeletonSequence]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if let Some(s) = dataset.iter().find(|s| s.label == Label::Unlabeled) {
        return Err(Error::Data(format!("session {} is unlabeled", s.session_id)));
    }
    Ok(())
}

pub fn prepare_all(dataset: &[SkeletonSequence], cfg: &ModelConfig) -> Result<Vec<PreparedSession>> {
    dataset.par_iter().map(|s| prepare(s, cfg)).collect()
}

/// Trains a model on labelled sessions. With a fixed `cfg.seed` the result and
/// the history are bit-identical regardless of the thread count.
pub fn train(dataset: &[SkeletonSequence], cfg: &ModelConfig) -> Result<(TrainedModel, Vec<EpochStats>)> {
    cfg.validate()?;
    require_labels(dataset)?;
    let prepared = prepare_all(dataset, cfg)?;
    train_prepared(&prepared, cfg)
}

pub fn train_prepared(
    prepared: &[PreparedSession],
    cfg: &ModelConfig,
) -> Result<(TrainedModel, Vec<EpochStats>)> {
    cfg.validate()?;
    let has = |k| prepared.iter().any(|p| p.label == Some(k));
    if prepared.iter().any(|p| p.label.is_none()) {
        return Err(Error::Data("training data contains unlabeled sessions".into()));
    }
    if !(has(0) && has(1)) {
        return Err(Error::Data("training data must contain both ASD and TD sessions".into()));
    }
    let mut model = TrainedModel::init(cfg.clone())?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // accumulate in session-index order
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| model.loss_and_gradients(&prepared[i]))
                .collect::<Result<_>>()?;
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            for (&i, (loss, grads, pred)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss in epoch {epoch} (session {})",
                        prepared[i].session_id
                    )));
                }
                loss_sum += loss;
                correct += usize::from(Some(*pred) == prepared[i].label);
                for (name, g) in grads {
                    match total.get_mut(name) {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            total.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in total.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            opt.update(&mut model.params, &total);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / prepared.len() as f64,
            train_accuracy: correct as f64 / prepared.len() as f64,
        };
        log::info!(
            "epoch {:>3} loss {:.5} acc {:.3}",
            stats.epoch,
            stats.mean_loss,
            stats.train_accuracy
        );
        history.push(stats);
    }
    Ok((model, history))
}

pub fn evaluate(model: &TrainedModel, dataset: &[SkeletonSequence]) -> Result<Metrics> {
    require_labels(dataset)?;
    let prepared = prepare_all(dataset, &model.config)?;
    evaluate_prepared(model, &prepared)
}

pub fn evaluate_prepared(model: &TrainedModel, prepared: &[PreparedSession]) -> Result<Metrics> {
    let pairs: Vec<(usize, usize)> = prepared
        .par_iter()
        .map(|p| {
            let truth = p
                .label
                .ok_or_else(|| Error::Data(format!("session {} is unlabeled", p.session_id)))?;
            Ok((truth, model.predict_prepared(p)?.class))
        })
        .collect::<Result<_>>()?;
    Metrics::from_confusion(Confusion::from_pairs(pairs)?)
}

/// Stratified split: each class is shuffled with `seed` and its first
/// `round(train_fraction · n_class)` members go to training. Returns sorted
/// `(train, test)` index lists.
pub fn stratified_split(labels: &[Label], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [Label::Asd, Label::Td, Label::Unlabeled] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// One trained configuration of an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub variant: Variant,
    pub cell: CellKind,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let cell = match self.cell {
            CellKind::Lstm => "lstm",
            CellKind::Slstm => "slstm",
        };
        write!(f, "{}/{}", self.variant, cell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub mean_uar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn summary_for(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    /// Plain-text table with one line per arm.
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>5} {:>9} {:>7}\n", "arm", "runs", "accuracy", "uar");
        for s in &self.summary {
            out.push_str(&format!(
                "{:<24} {:>5} {:>9.4} {:>7.4}\n",
                s.arm.to_string(),
                s.runs,
                s.mean_accuracy,
                s.mean_uar
            ));
        }
        out
    }
}

/// Trains and evaluates every arm for every seed. Seed `s` fixes both the
/// stratified 80/20 split and the model initialisation, so all arms of one seed
/// see the same split.
pub fn ablate(
    dataset: &[SkeletonSequence],
    base: &ModelConfig,
    arms: &[Arm],
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() || arms.is_empty() {
        return Err(Error::Usage("ablation needs at least one arm and one seed".into()));
    }
    base.validate()?;
    require_labels(dataset)?;
    let prepared = prepare_all(dataset, base)?;
    let labels: Vec<Label> = dataset.iter().map(|s| s.label).collect();
    let mut rows = Vec::new();
    for &seed in seeds {
        let (train_idx, test_idx) = stratified_split(&labels, 0.8, seed);
        if test_idx.is_empty() {
            return Err(Error::Data("dataset too small for an 80/20 split".into()));
        }
        let train_set: Vec<PreparedSession> = train_idx.iter().map(|&i| prepared[i].clone()).collect();
        let test_set: Vec<PreparedSession> = test_idx.iter().map(|&i| prepared[i].clone()).collect();
        for &arm in arms {
            let cfg = ModelConfig {
                variant: arm.variant,
                cell: arm.cell,
                seed,
                ..base.clone()
            };
            let (model, _) = train_prepared(&train_set, &cfg)?;
            let metrics = evaluate_prepared(&model, &test_set)?;
            log::info!("{arm} seed {seed}: accuracy {:.4} uar {:.4}", metrics.accuracy, metrics.uar);
            rows.push(AblationRow {
                arm,
                seed,
                train_size: train_set.len(),
                test_size: test_set.len(),
                metrics,
            });
        }
    }
    let summary = arms
        .iter()
        .map(|&arm| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == arm).collect();
            let k = mine.len() as f64;
            ArmSummary {
                arm,
                runs: mine.len(),
                mean_accuracy: mine.iter().map(|r| r.metrics.accuracy).sum::<f64>() / k,
                mean_uar: mine.iter().map(|r| r.metrics.uar).sum::<f64>() / k,
            }
        })
        .collect();
    Ok(AblationReport { rows, summary })
}
