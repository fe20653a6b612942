//! Restricted answer vocabulary, three-layer MLP classifier and argmax
//! answer selection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Top-`K` answers of the training split. Answers outside the list map to
/// the sentinel label `len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
    coverage: f64,
}

#[derive(Serialize, Deserialize)]
struct AnswerFile {
    answers: Vec<String>,
    coverage: f64,
}

impl AnswerVocabulary {
    /// Most frequent `k_max` answers, ties in ascending lexicographic order.
    pub fn build<S: AsRef<str>>(answers: &[S], k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if answers.is_empty() {
            return Err(Error::NoAnswers);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in answers {
            *counts.entry(a.as_ref()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(k_max);
        let kept: usize = ranked.iter().map(|(_, c)| c).sum();
        let coverage = kept as f64 / answers.len() as f64;
        Self::from_parts(ranked.into_iter().map(|(a, _)| a.to_string()).collect(), coverage)
    }

    pub fn from_parts(answers: Vec<String>, coverage: f64) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::NoAnswers);
        }
        if !(0.0..=1.0).contains(&coverage) {
            return Err(Error::Config(format!("coverage {coverage} outside [0, 1]")));
        }
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate answer `{a}`")));
            }
        }
        Ok(AnswerVocabulary {
            answers,
            index,
            coverage,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn sentinel(&self) -> usize {
        self.answers.len()
    }

    /// Class label, or the sentinel for answers outside the vocabulary.
    pub fn label(&self, answer: &str) -> usize {
        self.index(answer).unwrap_or(self.sentinel())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&AnswerFile {
            answers: self.answers.clone(),
            coverage: self.coverage,
        })
        .expect("serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: AnswerFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_parts(file.answers, file.coverage)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input: usize,
    pub hidden: [usize; 2],
    pub classes: usize,
}

impl ClassifierConfig {
    /// Hidden widths `(d, d)`.
    pub fn new(input: usize, classes: usize) -> Self {
        ClassifierConfig {
            input,
            hidden: [input, input],
            classes,
        }
    }
}

/// `affine → ReLU → affine → ReLU → affine`.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    layers: [(ParamId, ParamId); 3],
}

impl Classifier {
    pub fn new(config: ClassifierConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let dims = [config.input, config.hidden[0], config.hidden[1], config.classes];
        if dims.contains(&0) {
            return Err(Error::Config(format!("classifier dims must be >= 1, got {dims:?}")));
        }
        let mut layer = |i: usize, gain: f64| -> Result<(ParamId, ParamId)> {
            let std = (gain / dims[i] as f64).sqrt();
            Ok((
                store.add_init(format!("head.fc{i}.weight"), &[dims[i], dims[i + 1]], Init::Normal(std), rng)?,
                store.add_init(format!("head.fc{i}.bias"), &[dims[i + 1]], Init::Zeros, rng)?,
            ))
        };
        let layers = [layer(0, 2.0)?, layer(1, 2.0)?, layer(2, 1.0)?];
        Ok(Classifier { config, layers })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId); 3] {
        &self.layers
    }

    /// `[n × d]` pooled vectors to `[n × classes]` logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        match g.shape(pooled) {
            &[_, d] if d == self.config.input => {}
            other => {
                return Err(Error::Shape(format!(
                    "classifier expects [n, {}], got {other:?}",
                    self.config.input
                )))
            }
        }
        let mut x = pooled;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(store, w);
            let b = g.param(store, b);
            let y = g.matmul(x, w)?;
            x = g.add_bias(y, b)?;
            if i < 2 {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Logits of a single `[d]` pooled vector.
    pub fn classify(&self, store: &ParamStore, pooled: &Tensor) -> Result<Tensor> {
        if pooled.shape() != [self.config.input] {
            return Err(Error::Shape(format!(
                "pooled vector {:?}, expected [{}]",
                pooled.shape(),
                self.config.input
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(pooled.reshape(&[1, self.config.input])?);
        let y = self.forward(&mut g, store, x)?;
        g.value(y).reshape(&[self.config.classes])
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Predicted answer string and class index.
pub fn predict<'a>(logits: &[f64], vocab: &'a AnswerVocabulary) -> Result<(&'a str, usize)> {
    if logits.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} answers",
            logits.len(),
            vocab.len()
        )));
    }
    let i = argmax(logits);
    Ok((&vocab.answers[i], i))
}
