use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{Density, QuestionSpec, SceneGraph, SceneObject, ShapeKind};
use super::{stack_bands, Dataset, MultispectralImage, QuestionType, SplitAssignment, Triplet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

pub const TILE_COUNT: usize = 7;

/// Sentinel-2 bands of the ten-band preset: four 10 m bands followed by six
/// 20 m bands rendered at half resolution.
pub const BAND_NAMES_10: [&str; 10] = [
    "B02", "B03", "B04", "B08", "B05", "B06", "B07", "B8A", "B11", "B12",
];
const FULL_RES_BANDS_10: usize = 4;

/// Bands that carry the contrast of hidden objects.
pub const HIDDEN_BANDS: std::ops::Range<usize> = 3..10;

const VISIBLE_CONTRAST: f64 = 0.6;
const HIDDEN_NIR_CONTRAST: f64 = 0.3;
const HIDDEN_CONTRAST: f64 = 0.4;
const NOISE_STD: f64 = 0.01;
const BASE_LEVEL: f64 = 0.25;
const SUPERSAMPLE: usize = 4;

// per-image stream slots
const STREAM_SCENE: u64 = 0;
const STREAM_HIDDEN: u64 = 1;
const STREAM_QUESTIONS: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_images: usize,
    pub bands: usize,
    pub image_size: usize,
    pub seed: u64,
    pub questions_per_image: usize,
    /// Question families to draw from; all families supported by the band
    /// preset when empty.
    pub question_types: Vec<QuestionType>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_images: 700,
            bands: 3,
            image_size: 32,
            seed: 0,
            questions_per_image: 4,
            question_types: Vec::new(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands != 3 && self.bands != 10 {
            return Err(Error::Config(format!(
                "unsupported bands preset {} (expected 3 or 10)",
                self.bands
            )));
        }
        if self.n_images == 0 || self.questions_per_image == 0 {
            return Err(Error::Config("n_images and questions_per_image must be >= 1".into()));
        }
        if self.image_size < 8 || (self.bands == 10 && !self.image_size.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "image_size {} must be >= 8 (and even for the 10-band preset)",
                self.image_size
            )));
        }
        if self.bands == 3 && self.question_types.contains(&QuestionType::Spectral) {
            return Err(Error::Config("spectral questions need the 10-band preset".into()));
        }
        Ok(())
    }

    pub fn resolved_types(&self) -> Vec<QuestionType> {
        if !self.question_types.is_empty() {
            let mut t = self.question_types.clone();
            t.sort();
            t.dedup();
            return t;
        }
        QuestionType::ALL
            .into_iter()
            .filter(|&t| t != QuestionType::Spectral || self.bands == 10)
            .collect()
    }

    fn visible_radius(&self) -> f64 {
        0.1 * self.image_size as f64
    }

    fn hidden_radius(&self) -> f64 {
        0.14 * self.image_size as f64
    }
}

pub fn tile_of(index: usize, n_images: usize) -> u32 {
    (index * TILE_COUNT / n_images) as u32
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Generate a dataset. Every image draws from its own random streams, so the
/// result does not depend on generation order.
pub fn generate_synthetic(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let types = config.resolved_types();
    let per_image: Vec<(MultispectralImage, SceneGraph, Vec<Triplet>)> = (0..config.n_images)
        .into_par_iter()
        .map(|i| generate_image(config, &types, i))
        .collect::<Result<_>>()?;

    let mut ds = Dataset {
        image_ids: Vec::with_capacity(config.n_images),
        images: Vec::with_capacity(config.n_images),
        triplets: Vec::new(),
        scene_graphs: Vec::with_capacity(config.n_images),
        splits: SplitAssignment::five_one_one(),
    };
    for (i, (image, graph, triplets)) in per_image.into_iter().enumerate() {
        ds.image_ids.push(image_id(i));
        ds.images.push(image);
        ds.scene_graphs.push(graph);
        ds.triplets.extend(triplets);
    }
    Ok(ds)
}

fn place_objects(
    rng: &mut Rng,
    count: usize,
    radius: f64,
    size: usize,
    hidden: bool,
    bands: usize,
) -> Vec<SceneObject> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let lo = radius + 1.0;
    let hi = size as f64 - radius - 1.0;
    for _ in 0..count {
        let kind = *ShapeKind::ALL.choose(rng).unwrap();
        for _attempt in 0..100 {
            let cy = rng.random_range(lo..hi);
            let cx = rng.random_range(lo..hi);
            let clear = objects.iter().all(|o| {
                let dist = ((o.center_y - cy).powi(2) + (o.center_x - cx).powi(2)).sqrt();
                dist > o.size + radius + 1.0
            });
            if clear {
                objects.push(SceneObject {
                    kind,
                    hidden,
                    center_y: cy,
                    center_x: cx,
                    size: radius,
                    signature: signature(kind, hidden, bands),
                });
                break;
            }
        }
    }
    objects
}

fn signature(kind: ShapeKind, hidden: bool, bands: usize) -> Vec<f64> {
    let mut s = vec![0.0; bands];
    if hidden {
        s[3] = HIDDEN_NIR_CONTRAST;
        s[4 + 2 * kind.index()] = HIDDEN_CONTRAST;
        s[5 + 2 * kind.index()] = HIDDEN_CONTRAST;
    } else {
        s[kind.index()] = VISIBLE_CONTRAST;
    }
    s
}

/// Render one band at `rows × cols` where each pixel spans `scale` source
/// pixels, with anti-aliased object coverage.
fn render_band(
    rows: usize,
    cols: usize,
    scale: f64,
    base: f64,
    band: usize,
    objects: &[SceneObject],
    noise: &mut impl FnMut() -> f64,
) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    let step = scale / SUPERSAMPLE as f64;
    for y in 0..rows {
        for x in 0..cols {
            let mut v = base + noise();
            for o in objects.iter().filter(|o| o.signature[band] != 0.0) {
                let y0 = y as f64 * scale;
                let x0 = x as f64 * scale;
                if (y0 - o.center_y).abs() > o.size + 2.0 * scale
                    || (x0 - o.center_x).abs() > o.size + 2.0 * scale
                {
                    continue;
                }
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y0 + (sy as f64 + 0.5) * step;
                        let px = x0 + (sx as f64 + 0.5) * step;
                        if o.kind.contains(py - o.center_y, px - o.center_x, o.size) {
                            hits += 1;
                        }
                    }
                }
                v += o.signature[band] * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            }
            data.push(v);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

struct VisibleScene {
    density: Density,
    base: Vec<f64>,
    objects: Vec<SceneObject>,
}

// The visible scene and every band's background level come from one stream,
// hidden objects from another, so the first three bands never depend on
// hidden content.
fn draw_visible(config: &DataConfig, index: usize) -> VisibleScene {
    let mut rng = rng::image_stream(config.seed, index, STREAM_SCENE);
    let density = if rng.random_bool(0.5) {
        Density::Dense
    } else {
        Density::Sparse
    };
    let n_visible = match density {
        Density::Sparse => rng.random_range(0..=2),
        Density::Dense => rng.random_range(3..=5),
    };
    let base = vec![BASE_LEVEL; config.bands];
    let objects = place_objects(
        &mut rng,
        n_visible,
        config.visible_radius(),
        config.image_size,
        false,
        config.bands,
    );
    VisibleScene {
        density,
        base,
        objects,
    }
}

fn draw_hidden(config: &DataConfig, index: usize) -> Vec<SceneObject> {
    if config.bands != 10 {
        return Vec::new();
    }
    let mut rng = rng::image_stream(config.seed, index, STREAM_HIDDEN);
    let n_hidden = rng.random_range(1..=2);
    place_objects(
        &mut rng,
        n_hidden,
        config.hidden_radius(),
        config.image_size,
        true,
        config.bands,
    )
}

fn render(
    config: &DataConfig,
    index: usize,
    base: &[f64],
    objects: &[SceneObject],
) -> Result<MultispectralImage> {
    let (size, bands) = (config.image_size, config.bands);
    let mut noise_rng = rng::image_stream(config.seed, index, STREAM_NOISE);
    let normal = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut noise = || normal.sample(&mut noise_rng);
    let mut planes = Vec::with_capacity(bands);
    for (b, &level) in base.iter().enumerate() {
        let half_res = bands == 10 && b >= FULL_RES_BANDS_10;
        let (n, scale) = if half_res { (size / 2, 2.0) } else { (size, 1.0) };
        planes.push(render_band(n, n, scale, level, b, objects, &mut noise));
    }
    let stacked = stack_bands(&planes, size, size)?;
    let clamped: Vec<f64> = stacked.tensor().data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    MultispectralImage::new(Tensor::new(vec![bands, size, size], clamped)?)
}

fn generate_image(
    config: &DataConfig,
    types: &[QuestionType],
    index: usize,
) -> Result<(MultispectralImage, SceneGraph, Vec<Triplet>)> {
    let tile = tile_of(index, config.n_images);
    let id = image_id(index);
    let VisibleScene {
        density,
        base,
        mut objects,
    } = draw_visible(config, index);
    objects.extend(draw_hidden(config, index));
    let image = render(config, index, &base, &objects)?;

    let graph = SceneGraph {
        image_id: id.clone(),
        tile,
        density,
        objects,
    };

    let mut q_rng = rng::image_stream(config.seed, index, STREAM_QUESTIONS);
    let mut seen: Vec<QuestionSpec> = Vec::new();
    for _ in 0..config.questions_per_image {
        let mut spec = draw_question(&mut q_rng, types, &graph);
        for _retry in 0..10 {
            if !seen.contains(&spec) {
                break;
            }
            spec = draw_question(&mut q_rng, types, &graph);
        }
        seen.push(spec);
    }
    let triplets = seen
        .into_iter()
        .map(|spec| Triplet {
            image_id: id.clone(),
            question: spec.text(),
            answer: graph.answer(&spec),
            question_type: spec.question_type(),
            tile,
        })
        .collect();
    Ok((image, graph, triplets))
}

/// A kind whose presence matches a fair coin when possible, so yes/no
/// answers are balanced.
fn balanced_kind(rng: &mut Rng, graph: &SceneGraph, hidden: bool) -> ShapeKind {
    let want_present = rng.random_bool(0.5);
    let pool: Vec<ShapeKind> = ShapeKind::ALL
        .into_iter()
        .filter(|&k| (graph.count(k, hidden) > 0) == want_present)
        .collect();
    match pool.choose(rng) {
        Some(&k) => k,
        None => *ShapeKind::ALL.choose(rng).unwrap(),
    }
}

fn draw_question(rng: &mut Rng, types: &[QuestionType], graph: &SceneGraph) -> QuestionSpec {
    match types.choose(rng).copied().unwrap_or(QuestionType::Presence) {
        QuestionType::Presence => QuestionSpec::Presence(balanced_kind(rng, graph, false)),
        QuestionType::Count => QuestionSpec::Count(balanced_kind(rng, graph, false)),
        QuestionType::Comparison => {
            let a = *ShapeKind::ALL.choose(rng).unwrap();
            let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|&k| k != a).collect();
            QuestionSpec::Comparison(a, *others.choose(rng).unwrap())
        }
        QuestionType::Scene => QuestionSpec::Scene,
        QuestionType::Spectral => QuestionSpec::Spectral(balanced_kind(rng, graph, true)),
    }
}
