//! The assembled model: frozen encoder, projection, fusion transformer and
//! classification head sharing one parameter store.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answer_head::{Classifier, ClassifierConfig};
use crate::encoder::{EncoderConfig, ImageEncoder, Projection};
use crate::error::{Error, Result};
use crate::fusion::{BatchOutput, Fusion, FusionConfig, Pooling};
use crate::numerics::{read_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, streams, Rng};
use crate::text::TokenSequence;

const SEED_PARAM: &str = "meta.encoder_seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub bands: usize,
    pub boxes: usize,
    pub box_h: usize,
    pub box_w: usize,
    pub visual_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub classes: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    /// Seeds both the frozen encoder and the trainable initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig::new(self.bands, self.box_h, self.box_w, self.visual_dim, self.seed)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            visual_dim: self.visual_dim,
            max_text_len: self.max_text_len,
            boxes: self.boxes,
            vocab_size: self.vocab_size,
            dropout: self.dropout,
            pooling: self.pooling,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig::new(self.hidden, self.classes)
    }
}

pub struct ModelOutput {
    /// `[n × classes]`
    pub logits: Var,
    pub fused: BatchOutput,
}

#[derive(Clone, Debug)]
pub struct VqaModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: ImageEncoder,
    projection: Projection,
    fusion: Fusion,
    head: Classifier,
}

fn seed_tensor(seed: u64) -> Tensor {
    Tensor::from_vec(vec![(seed >> 32) as f64, (seed & 0xFFFF_FFFF) as f64])
}

impl VqaModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        store.add(SEED_PARAM, seed_tensor(config.seed), true)?;
        let encoder = ImageEncoder::new(config.encoder(), &mut store)?;
        let mut rng = rng::stream(config.seed, streams::INIT);
        let projection = Projection::new(&mut store, encoder.feature_dim(), config.visual_dim, &mut rng)?;
        let fusion = Fusion::new(config.fusion(), &mut store, &mut rng)?;
        let head = Classifier::new(config.classifier(), &mut store, &mut rng)?;
        Ok(VqaModel {
            config,
            store,
            encoder,
            projection,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn head(&self) -> &Classifier {
        &self.head
    }

    /// Frozen features `[b × K]` of one box stack.
    pub fn encode(&self, boxes: &Tensor) -> Result<Tensor> {
        if boxes.shape().first() != Some(&self.config.boxes) {
            return Err(Error::Shape(format!(
                "box stack {:?}, expected {} boxes",
                boxes.shape(),
                self.config.boxes
            )));
        }
        self.encoder.encode(&self.store, boxes)
    }

    /// Fit the encoder's feature standardization to raw `[b × K]` features.
    pub fn calibrate(&mut self, raw: &[&Tensor]) -> Result<()> {
        self.encoder.calibrate(&mut self.store, raw)
    }

    /// Logits for `n` samples given their `[b × K]` encoder features.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: &[&Tensor],
        tokens: &[&TokenSequence],
        rng: Option<&mut Rng>,
    ) -> Result<ModelOutput> {
        if features.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} feature sets for {} questions",
                features.len(),
                tokens.len()
            )));
        }
        let k = self.encoder.feature_dim();
        let b = self.config.boxes;
        let mut data = Vec::with_capacity(features.len() * b * k);
        for f in features {
            if f.shape() != [b, k] {
                return Err(Error::Shape(format!("features {:?}, expected [{b}, {k}]", f.shape())));
            }
            data.extend_from_slice(f.data());
        }
        let x = g.constant(Tensor::new(vec![features.len() * b, k], data)?);
        let z = self.projection.forward(g, &self.store, x)?;
        let fused = self.fusion.forward(g, &self.store, z, tokens, rng)?;
        let logits = self.head.forward(g, &self.store, fused.pooled)?;
        Ok(ModelOutput { logits, fused })
    }

    /// Inference logits `[n × classes]`.
    pub fn logits(&self, features: &[&Tensor], tokens: &[&TokenSequence]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features, tokens, None)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    /// Rebuild from `config` and overwrite every parameter from the file.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let mut model = Self::new(config)?;
        if let Some((_, stored)) = entries.iter().find(|(n, _)| n == SEED_PARAM) {
            if stored != &seed_tensor(model.config.seed) {
                return Err(Error::Checkpoint(format!(
                    "{}: encoder seed differs from config seed {}",
                    path.display(),
                    model.config.seed
                )));
            }
        }
        model.store.load_values(entries)?;
        Ok(model)
    }
}

/// Distinct `fusion.layer{i}` groups among checkpoint parameter names.
pub fn layer_groups<'a>(names: impl IntoIterator<Item = &'a str>) -> usize {
    let mut groups: Vec<&str> = names
        .into_iter()
        .filter_map(|n| n.strip_prefix("fusion.layer"))
        .filter_map(|rest| rest.split('.').next())
        .collect();
    groups.sort_unstable();
    groups.dedup();
    groups.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, Vocabulary};

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            bands: 3,
            boxes: 3,
            box_h: 8,
            box_w: 8,
            visual_dim: 8,
            layers: 2,
            hidden: 16,
            heads: 2,
            max_text_len: 8,
            vocab_size: 12,
            classes: 4,
            dropout: 0.0,
            pooling: Pooling::Cls,
            seed: 11,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vbf");
        let model = VqaModel::new(toy_config()).unwrap();
        model.save(&path).unwrap();
        let loaded = VqaModel::load(&path, toy_config()).unwrap();
        for ((_, a), (_, b)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.frozen, b.frozen);
        }
        let names: Vec<String> = read_checkpoint(&path).unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(layer_groups(names.iter().map(String::as_str)), 2);

        let mut other = toy_config();
        other.layers = 3;
        assert!(VqaModel::load(&path, other).is_err());
        let mut other = toy_config();
        other.seed = 12;
        assert!(VqaModel::load(&path, other).is_err());
    }

    #[test]
    fn batched_logits_match_single() {
        let model = VqaModel::new(toy_config()).unwrap();
        let vocab = Vocabulary::build(&["is there a disc", "how many squares are there"]);
        let feats: Vec<Tensor> = (0..3)
            .map(|s| {
                Tensor::new(
                    vec![3, 32],
                    (0..96).map(|i| ((i * 13 + s * 7) % 17) as f64 / 17.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let qs = ["is there a disc", "how many squares are there", "is there a square"];
        let toks: Vec<TokenSequence> = qs.iter().map(|q| tokenize(q, &vocab, 8)).collect();
        let batch = model
            .logits(&feats.iter().collect::<Vec<_>>(), &toks.iter().collect::<Vec<_>>())
            .unwrap();
        assert_eq!(batch.shape(), &[3, 4]);
        for i in 0..3 {
            let single = model.logits(&[&feats[i]], &[&toks[i]]).unwrap();
            assert_eq!(single.data(), &batch.data()[i * 4..i * 4 + 4]);
        }
    }
}
