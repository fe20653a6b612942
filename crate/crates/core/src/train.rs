//! Adam training loop over cached encoder features, and the evaluation
//! protocol: per-question-type accuracy, AA and OA.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer_head::{argmax, AnswerVocabulary};
use crate::box_extractor::{extract, BoxExtractorConfig};
use crate::dataset::{Dataset, QuestionType, Split};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Parameter, Tensor};
use crate::model::VqaModel;
use crate::rng::{self, streams, Rng};
use crate::text::{tokenize, TokenSequence, Vocabulary};

/// Per-image stream slot used for box sampling.
pub const BOX_STREAM: u64 = 4;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 32,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction, no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(store: &ParamStore, config: &TrainConfig) -> Self {
        Self::new(store, config.lr, config.beta1, config.beta2, config.eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Update every non-frozen parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let Parameter {
                value, grad, frozen, ..
            } = store.get_mut(id);
            if *frozen {
                continue;
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (k, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// A tokenized question bound to its image and label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: usize,
    pub tokens: TokenSequence,
    pub label: usize,
    pub answer: String,
    pub question_type: QuestionType,
}

pub fn prepare_examples(
    dataset: &Dataset,
    split: Split,
    vocab: &Vocabulary,
    answers: &AnswerVocabulary,
    max_text_len: usize,
) -> Vec<Example> {
    let index = dataset.image_index();
    dataset
        .split_triplets(split)
        .into_iter()
        .map(|t| Example {
            image: index[t.image_id.as_str()],
            tokens: tokenize(&t.question, vocab, max_text_len),
            label: answers.label(&t.answer),
            answer: t.answer.clone(),
            question_type: t.question_type,
        })
        .collect()
}

/// Frozen `[b × K]` features of every image. Boxes of image `i` come from
/// stream `BOX_STREAM` of image `i` under `boxes.seed`.
pub fn image_features(model: &VqaModel, dataset: &Dataset, boxes: &BoxExtractorConfig) -> Result<Vec<Tensor>> {
    dataset
        .images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let mut r = rng::image_stream(boxes.seed, i, BOX_STREAM);
            model.encode(&extract(image, boxes, &mut r)?)
        })
        .collect()
}

/// Fit the encoder standardization on the features of the images used by
/// `examples`, then standardize every feature tensor in place. `features`
/// must come from an uncalibrated model.
pub fn calibrate_features(model: &mut VqaModel, features: &mut [Tensor], examples: &[Example]) -> Result<()> {
    let mut images: Vec<usize> = examples.iter().map(|e| e.image).collect();
    images.sort_unstable();
    images.dedup();
    let raw: Vec<&Tensor> = images.iter().map(|&i| &features[i]).collect();
    model.calibrate(&raw)?;
    for f in features.iter_mut() {
        *f = model.encoder().standardize(model.params(), f)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_type: BTreeMap<QuestionType, f64>,
    #[serde(rename = "AA")]
    pub aa: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    pub counts: BTreeMap<QuestionType, usize>,
}

/// Unweighted mean of per-type accuracies.
pub fn compute_aa(per_type: &[f64]) -> Result<f64> {
    if per_type.is_empty() {
        return Err(Error::Empty("no question types to average"));
    }
    Ok(per_type.iter().sum::<f64>() / per_type.len() as f64)
}

/// Fraction of correct predictions.
pub fn compute_oa(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Empty("no predictions to score"));
    }
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

impl MetricsReport {
    pub fn from_flags(types: &[QuestionType], correct: &[bool]) -> Result<Self> {
        if types.len() != correct.len() {
            return Err(Error::Shape(format!("{} types for {} flags", types.len(), correct.len())));
        }
        let mut hits: BTreeMap<QuestionType, (usize, usize)> = BTreeMap::new();
        for (&t, &c) in types.iter().zip(correct) {
            let e = hits.entry(t).or_default();
            e.0 += usize::from(c);
            e.1 += 1;
        }
        let per_type: BTreeMap<QuestionType, f64> =
            hits.iter().map(|(&t, &(h, n))| (t, h as f64 / n as f64)).collect();
        let aa = compute_aa(&per_type.values().copied().collect::<Vec<_>>())?;
        Ok(MetricsReport {
            per_type,
            aa,
            oa: compute_oa(correct)?,
            counts: hits.into_iter().map(|(t, (_, n))| (t, n)).collect(),
        })
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Predicted class index per example, dropout off.
pub fn predict_examples(model: &VqaModel, features: &[Tensor], examples: &[Example]) -> Result<Vec<usize>> {
    let chunks: Vec<Vec<usize>> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let feats: Vec<&Tensor> = chunk.iter().map(|e| &features[e.image]).collect();
            let toks: Vec<&TokenSequence> = chunk.iter().map(|e| &e.tokens).collect();
            let logits = model.logits(&feats, &toks)?;
            let classes = logits.shape()[1];
            Ok(logits.data().chunks(classes).map(argmax).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// A prediction is correct iff its answer string equals the ground truth;
/// out-of-vocabulary answers therefore always count as wrong.
pub fn evaluate(
    model: &VqaModel,
    features: &[Tensor],
    examples: &[Example],
    answers: &AnswerVocabulary,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let predicted = predict_examples(model, features, examples)?;
    let correct: Vec<bool> = examples
        .iter()
        .zip(&predicted)
        .map(|(e, &p)| answers.answer(p) == Some(e.answer.as_str()))
        .collect();
    let types: Vec<QuestionType> = examples.iter().map(|e| e.question_type).collect();
    MetricsReport::from_flags(&types, &correct)
}

/// Single-threaded optimizer state around a model.
pub struct Trainer {
    model: VqaModel,
    adam: Adam,
    dropout_rng: Rng,
}

impl Trainer {
    pub fn new(model: VqaModel, config: &TrainConfig) -> Self {
        let adam = Adam::from_config(model.params(), config);
        Self::with_optimizer(model, adam, config.seed)
    }

    pub fn with_optimizer(model: VqaModel, adam: Adam, seed: u64) -> Self {
        Trainer {
            model,
            adam,
            dropout_rng: rng::stream(seed, streams::DROPOUT),
        }
    }

    pub fn model(&self) -> &VqaModel {
        &self.model
    }

    pub fn into_model(self) -> VqaModel {
        self.model
    }

    /// One forward/backward/update on a batch. Returns the mean loss over
    /// in-vocabulary labels, or `None` when every label is out of
    /// vocabulary (no update).
    pub fn step(&mut self, features: &[&Tensor], tokens: &[&TokenSequence], labels: &[usize]) -> Result<Option<f64>> {
        let mut g = Graph::new();
        let dropout = (self.model.config().dropout > 0.0).then_some(&mut self.dropout_rng);
        let out = self.model.forward(&mut g, features, tokens, dropout)?;
        let loss = match g.cross_entropy(out.logits, labels) {
            Ok(l) => l,
            Err(Error::EmptyBatch) => return Ok(None),
            Err(e) => return Err(e),
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        g.backward(loss)?;
        let store = self.model.params_mut();
        store.zero_grads();
        g.accumulate_param_grads(store);
        self.adam.step(store);
        Ok(Some(value))
    }

    /// Step on a list of examples.
    pub fn step_examples(&mut self, features: &[Tensor], batch: &[&Example]) -> Result<Option<f64>> {
        let feats: Vec<&Tensor> = batch.iter().map(|e| &features[e.image]).collect();
        let toks: Vec<&TokenSequence> = batch.iter().map(|e| &e.tokens).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        self.step(&feats, &toks, &labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    pub validation: Option<MetricsReport>,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: VqaModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Mini-batch Adam over `train` for `config.epochs` epochs, reshuffled each
/// epoch. The returned model holds the parameters of the epoch with the best
/// validation OA (earliest on ties; the last epoch when there is no
/// validation data).
pub fn train(
    model: VqaModel,
    features: &[Tensor],
    train: &[Example],
    validation: &[Example],
    answers: &AnswerVocabulary,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut trainer = Trainer::new(model, config);
    let mut shuffle = rng::stream(config.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            match trainer.step_examples(features, &batch) {
                Ok(Some(loss)) => {
                    loss_sum += loss;
                    steps += 1;
                }
                Ok(None) => {}
                Err(Error::NonFinite) => return Err(Error::Diverged { epoch, step: step + 1 }),
                Err(e) => return Err(e),
            }
        }
        let report = if validation.is_empty() {
            None
        } else {
            Some(evaluate(trainer.model(), features, validation, answers)?)
        };
        let score = report.as_ref().map_or(f64::NEG_INFINITY, |r| r.oa);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => score > *b || (validation.is_empty() && epoch == config.epochs),
        };
        if improved {
            let snapshot = trainer.model().params().iter().map(|(_, p)| p.value.clone()).collect();
            best = Some((score, epoch, snapshot));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            steps,
            validation: report,
        });
    }

    let mut model = trainer.into_model();
    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            let ids: Vec<_> = model.params().ids().collect();
            for (id, value) in ids.into_iter().zip(snapshot) {
                model.params_mut().get_mut(id).value = value;
            }
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
