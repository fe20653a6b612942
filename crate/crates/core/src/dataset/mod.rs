//! Synthetic multispectral VQA data: scene-graph driven image rendering,
//! template questions with oracle answers, tile-based splits and the on-disk
//! formats.

mod format;
mod generate;
mod scene;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::box_extractor::bicubic_resize;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use format::{
    decode_rsb, decode_rsb_stack, encode_rsb, read_dataset, read_rsb, read_rsb_stack, write_dataset,
    write_rsb,
};
pub(crate) use format::to_jsonl;
pub use generate::{
    generate_synthetic, image_id, tile_of, DataConfig, BAND_NAMES_10, HIDDEN_BANDS, TILE_COUNT,
};
pub use scene::{Density, QuestionSpec, SceneGraph, SceneObject, ShapeKind};

/// `c × H × W` reflectance image.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralImage {
    tensor: Tensor,
}

impl MultispectralImage {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::Shape(format!("image must be [c, h, w], got {:?}", tensor.shape())));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(MultispectralImage { tensor })
    }

    pub fn bands(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn band(&self, b: usize) -> Tensor {
        self.tensor.slice_leading(b)
    }

    /// The leading `n` bands.
    pub fn select_bands(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.bands() {
            return Err(Error::BandMismatch {
                expected: n,
                got: self.bands(),
            });
        }
        let plane = self.height() * self.width();
        Self::new(Tensor::new(
            vec![n, self.height(), self.width()],
            self.tensor.data()[..n * plane].to_vec(),
        )?)
    }

    pub fn in_unit_range(&self) -> bool {
        self.tensor.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Presence,
    Count,
    Comparison,
    Scene,
    Spectral,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::Presence,
        QuestionType::Count,
        QuestionType::Comparison,
        QuestionType::Scene,
        QuestionType::Spectral,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionType::Presence => "presence",
            QuestionType::Count => "count",
            QuestionType::Comparison => "comparison",
            QuestionType::Scene => "scene",
            QuestionType::Spectral => "spectral",
        }
    }
}

impl std::fmt::Display for QuestionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub image_id: String,
    pub question: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub question_type: QuestionType,
    pub tile: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Result<Split> {
        match name {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub tiles: BTreeMap<u32, Split>,
}

impl SplitAssignment {
    /// Five training tiles, then one validation and one test tile.
    pub fn five_one_one() -> Self {
        let tiles = (0..TILE_COUNT as u32)
            .map(|t| {
                let split = match t {
                    5 => Split::Validation,
                    6 => Split::Test,
                    _ => Split::Train,
                };
                (t, split)
            })
            .collect();
        SplitAssignment { tiles }
    }

    pub fn split_of(&self, tile: u32) -> Option<Split> {
        self.tiles.get(&tile).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_ids: Vec<String>,
    pub images: Vec<MultispectralImage>,
    pub triplets: Vec<Triplet>,
    pub scene_graphs: Vec<SceneGraph>,
    pub splits: SplitAssignment,
}

impl Dataset {
    pub fn bands(&self) -> usize {
        self.images.first().map_or(0, |i| i.bands())
    }

    pub fn image_index(&self) -> HashMap<&str, usize> {
        self.image_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn split_triplets(&self, split: Split) -> Vec<&Triplet> {
        self.triplets
            .iter()
            .filter(|t| self.splits.split_of(t.tile) == Some(split))
            .collect()
    }

    /// Copy of the dataset keeping only the leading `n` bands of every image.
    pub fn select_bands(&self, n: usize) -> Result<Dataset> {
        Ok(Dataset {
            images: self
                .images
                .iter()
                .map(|im| im.select_bands(n))
                .collect::<Result<_>>()?,
            ..self.clone()
        })
    }

    pub fn check_consistency(&self) -> Result<()> {
        if self.image_ids.len() != self.images.len() {
            return Err(Error::Config("image id list and images differ in length".into()));
        }
        let index = self.image_index();
        for t in &self.triplets {
            if !index.contains_key(t.image_id.as_str()) {
                return Err(Error::Config(format!("triplet references unknown image `{}`", t.image_id)));
            }
            if self.splits.split_of(t.tile).is_none() {
                return Err(Error::Config(format!("tile {} has no split", t.tile)));
            }
        }
        Ok(())
    }
}

/// Cubic-convolution upsampling of a single `[h × w]` band by an integer factor.
pub fn resample_band(band: &Tensor, factor: usize) -> Result<Tensor> {
    let &[h, w] = band.shape() else {
        return Err(Error::Shape(format!("band must be [h, w], got {:?}", band.shape())));
    };
    if factor == 0 {
        return Err(Error::Config("resample factor must be >= 1".into()));
    }
    let up = bicubic_resize(&band.reshape(&[1, h, w])?, factor * h, factor * w)?;
    up.reshape(&[factor * h, factor * w])
}

/// Stack `[h × w]` bands into a `c × H × W` image, upsampling bands whose
/// size is an integer fraction of the target.
pub fn stack_bands(bands: &[Tensor], height: usize, width: usize) -> Result<MultispectralImage> {
    if bands.is_empty() {
        return Err(Error::Empty("no bands to stack"));
    }
    let mut data = Vec::with_capacity(bands.len() * height * width);
    for (i, band) in bands.iter().enumerate() {
        let &[h, w] = band.shape() else {
            return Err(Error::Shape(format!("band {i} must be [h, w], got {:?}", band.shape())));
        };
        if (h, w) == (height, width) {
            data.extend_from_slice(band.data());
            continue;
        }
        let factor = height / h;
        if h == 0 || !height.is_multiple_of(h) || !width.is_multiple_of(w) || width / w != factor {
            return Err(Error::Shape(format!(
                "band {i} is {h}x{w}, not an integer-factor downscale of {height}x{width}"
            )));
        }
        data.extend_from_slice(resample_band(band, factor)?.data());
    }
    MultispectralImage::new(Tensor::new(vec![bands.len(), height, width], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn band(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0);
        Tensor::new(vec![h, w], (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn resample_cases() {
        let constant = Tensor::full(&[60, 60], 0.3);
        let up = resample_band(&constant, 2).unwrap();
        assert_eq!(up.shape(), &[120, 120]);
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));

        let b = band(7, 5, 1);
        assert!(resample_band(&b, 1).unwrap().max_abs_diff(&b) <= 1e-12);

        let up = resample_band(&b, 2).unwrap();
        let direct = bicubic_resize(&b.reshape(&[1, 7, 5]).unwrap(), 14, 10).unwrap();
        assert_eq!(up.data(), direct.data());
    }

    #[test]
    fn stack_cases() {
        let rgb: Vec<Tensor> = (0..3).map(|s| band(8, 6, s)).collect();
        let img = stack_bands(&rgb, 8, 6).unwrap();
        assert_eq!(img.bands(), 3);
        for (i, b) in rgb.iter().enumerate() {
            assert_eq!(&img.band(i).reshape(&[8, 6]).unwrap(), b);
        }

        let mut mixed: Vec<Tensor> = (0..4).map(|s| band(8, 6, s)).collect();
        mixed.extend((4..10).map(|s| band(4, 3, s)));
        let img = stack_bands(&mixed, 8, 6).unwrap();
        assert_eq!(img.tensor().shape(), &[10, 8, 6]);
        assert_eq!(&img.band(3).reshape(&[8, 6]).unwrap(), &mixed[3]);
        for i in 4..10 {
            let up = resample_band(&mixed[i], 2).unwrap();
            assert_eq!(img.band(i).data(), up.data());
        }

        assert!(stack_bands(&[band(8, 6, 0), band(3, 2, 1)], 8, 6).is_err());
        assert!(stack_bands(&[band(8, 6, 0), band(4, 2, 1)], 8, 6).is_err());
    }

    #[test]
    fn select_bands_keeps_prefix() {
        let bands: Vec<Tensor> = (0..5).map(|s| band(4, 4, s)).collect();
        let img = stack_bands(&bands, 4, 4).unwrap();
        let three = img.select_bands(3).unwrap();
        assert_eq!(three.bands(), 3);
        assert_eq!(three.band(2), img.band(2));
        assert!(img.select_bands(6).is_err());
    }

    #[test]
    fn split_names() {
        assert_eq!(Split::parse("test").unwrap(), Split::Test);
        assert!(matches!(Split::parse("holdout"), Err(Error::UnknownSplit(_))));
        let s = SplitAssignment::five_one_one();
        assert_eq!(s.tiles.values().filter(|&&v| v == Split::Train).count(), 5);
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"tiles":{"0":"train","1":"train","2":"train","3":"train","4":"train","5":"validation","6":"test"}}"#
        );
    }
}
