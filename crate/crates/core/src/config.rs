//! JSON run configuration. Unknown keys are rejected, missing keys take
//! their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::box_extractor::BoxExtractorConfig;
use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::fusion::Pooling;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxesConfig {
    pub b: usize,
    /// Defaults to a quarter of the image height.
    pub min_h: Option<usize>,
    /// Defaults to a quarter of the image width.
    pub min_w: Option<usize>,
    pub h_out: usize,
    pub w_out: usize,
}

impl Default for BoxesConfig {
    fn default() -> Self {
        BoxesConfig {
            b: 10,
            min_h: None,
            min_w: None,
            h_out: 16,
            w_out: 16,
        }
    }
}

impl BoxesConfig {
    pub fn resolve(&self, height: usize, width: usize, seed: u64) -> BoxExtractorConfig {
        BoxExtractorConfig {
            boxes: self.b,
            min_h: self.min_h.unwrap_or((height / 4).max(1)),
            min_w: self.min_w.unwrap_or((width / 4).max(1)),
            out_h: self.h_out,
            out_w: self.w_out,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub l: usize,
    pub d: usize,
    pub heads: usize,
    pub v: usize,
    pub max_text_len: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            l: 4,
            d: 64,
            heads: 4,
            v: 64,
            max_text_len: crate::text::DEFAULT_MAX_LEN,
            dropout: 0.0,
            pooling: Pooling::Cls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnswersConfig {
    pub k_max: usize,
}

impl Default for AnswersConfig {
    fn default() -> Self {
        AnswersConfig { k_max: 1000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub boxes: BoxesConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub answers: AnswersConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Fill the image-dependent defaults (box minimums) for `height × width`
    /// images with `bands` bands.
    pub fn resolved(&self, bands: usize, height: usize, width: usize) -> RunConfig {
        let mut out = self.clone();
        let boxes = self.boxes.resolve(height, width, self.train.seed);
        out.boxes.min_h = Some(boxes.min_h);
        out.boxes.min_w = Some(boxes.min_w);
        out.data.bands = bands;
        out.data.image_size = height;
        out
    }

    pub fn box_extractor(&self, height: usize, width: usize) -> BoxExtractorConfig {
        self.boxes.resolve(height, width, self.train.seed)
    }

    pub fn model_config(&self, bands: usize, vocab_size: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            bands,
            boxes: self.boxes.b,
            box_h: self.boxes.h_out,
            box_w: self.boxes.w_out,
            visual_dim: self.model.v,
            layers: self.model.l,
            hidden: self.model.d,
            heads: self.model.heads,
            max_text_len: self.model.max_text_len,
            vocab_size,
            classes,
            dropout: self.model.dropout,
            pooling: self.model.pooling,
            seed: self.train.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.answers.k_max == 0 {
            return Err(Error::Config("answers.k_max must be at least 1".into()));
        }
        if self.boxes.b == 0 || self.boxes.h_out == 0 || self.boxes.w_out == 0 {
            return Err(Error::Config("boxes.b, boxes.h_out and boxes.w_out must be at least 1".into()));
        }
        self.model_config(self.data.bands, 1, 1).fusion().validate()
    }
}
