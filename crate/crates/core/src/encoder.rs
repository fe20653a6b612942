//! Frozen convolutional image encoder `f` and the trainable projection from
//! `K` encoder features to the visual embedding width `v`.
//!
//! Each kernel holds one random channel-mixing weight repeated over its
//! taps, so a feature responds to how much of a band falls in its receptive
//! field rather than to where exactly it sits. The flattened features are
//! standardized with frozen per-feature statistics fitted once on training
//! images (identity until [`ImageEncoder::calibrate`] is called).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rand_distr::{Distribution, Normal};

use crate::numerics::{conv2d, relu, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, streams, Rng};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub bands: usize,
    /// Output channels of each stride-2 conv stage.
    pub channels: Vec<usize>,
    pub box_h: usize,
    pub box_w: usize,
    pub padding: usize,
    pub visual_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Three stages of 8, 16 and 32 channels with padding 1.
    pub fn new(bands: usize, box_h: usize, box_w: usize, visual_dim: usize, seed: u64) -> Self {
        EncoderConfig {
            bands,
            channels: vec![8, 16, 32],
            box_h,
            box_w,
            padding: 1,
            visual_dim,
            seed,
        }
    }

    /// Spatial size after the last stage.
    pub fn output_spatial(&self) -> Result<(usize, usize)> {
        let mut h = self.box_h;
        let mut w = self.box_w;
        for _ in &self.channels {
            if h + 2 * self.padding < KERNEL || w + 2 * self.padding < KERNEL {
                return Err(Error::Config(format!(
                    "box size {}x{} too small for {} conv stages",
                    self.box_h,
                    self.box_w,
                    self.channels.len()
                )));
            }
            h = (h + 2 * self.padding - KERNEL) / STRIDE + 1;
            w = (w + 2 * self.padding - KERNEL) / STRIDE + 1;
        }
        Ok((h, w))
    }

    /// `K`: last channel count times the final spatial size.
    pub fn feature_dim(&self) -> Result<usize> {
        let (h, w) = self.output_spatial()?;
        Ok(self.channels.last().copied().unwrap_or(self.bands) * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.visual_dim == 0 || self.channels.is_empty() {
            return Err(Error::Config(
                "encoder needs bands >= 1, v >= 1 and at least one stage".into(),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder stage with zero channels".into()));
        }
        self.feature_dim().map(|_| ())
    }
}

/// Added to the feature variance before taking the square root.
pub const CALIBRATION_EPS: f64 = 1e-5;

/// Conv stack whose weights live in the parameter store as frozen entries.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    config: EncoderConfig,
    stages: Vec<(ParamId, ParamId)>,
    mean: ParamId,
    scale: ParamId,
    feature_dim: usize,
}

impl ImageEncoder {
    /// He-normal channel weights and zero biases drawn from the encoder seed.
    pub fn new(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, streams::ENCODER);
        let mut stages = Vec::with_capacity(config.channels.len());
        let mut c_in = config.bands;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let std = (2.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let taps = KERNEL * KERNEL;
            let mut kernel = Vec::with_capacity(c_out * c_in * taps);
            for _ in 0..c_out * c_in {
                let v = normal.sample(&mut rng);
                kernel.extend(std::iter::repeat_n(v, taps));
            }
            let kernel = Tensor::new(vec![c_out, c_in, KERNEL, KERNEL], kernel)?;
            let w = store.add(format!("encoder.stage{i}.weight"), kernel, true)?;
            let b = store.add(format!("encoder.stage{i}.bias"), Tensor::zeros(&[c_out]), true)?;
            stages.push((w, b));
            c_in = c_out;
        }
        let feature_dim = config.feature_dim()?;
        let mean = store.add("encoder.feature_mean", Tensor::zeros(&[feature_dim]), true)?;
        let scale = store.add("encoder.feature_scale", Tensor::full(&[feature_dim], 1.0), true)?;
        Ok(ImageEncoder {
            config,
            stages,
            mean,
            scale,
            feature_dim,
        })
    }

    /// Fit the per-feature mean and `1 / sqrt(var + eps)` to the rows of
    /// raw `[b × K]` feature tensors.
    pub fn calibrate(&self, store: &mut ParamStore, raw: &[&Tensor]) -> Result<()> {
        let k = self.feature_dim;
        let mut rows = 0usize;
        let mut sum = vec![0.0; k];
        for t in raw {
            if t.rank() != 2 || t.shape()[1] != k {
                return Err(Error::Shape(format!("features {:?}, expected [b, {k}]", t.shape())));
            }
            for row in t.data().chunks(k) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                rows += 1;
            }
        }
        if rows == 0 {
            return Err(Error::Empty("no features to calibrate on"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        let mut var = vec![0.0; k];
        for t in raw {
            for row in t.data().chunks(k) {
                for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let scale = var
            .iter()
            .map(|v| 1.0 / (v / rows as f64 + CALIBRATION_EPS).sqrt())
            .collect();
        store.get_mut(self.mean).value = Tensor::from_vec(mean);
        store.get_mut(self.scale).value = Tensor::from_vec(scale);
        Ok(())
    }

    /// Apply the frozen standardization to raw `[b × K]` features.
    pub fn standardize(&self, store: &ParamStore, raw: &Tensor) -> Result<Tensor> {
        let k = self.feature_dim;
        if raw.rank() != 2 || raw.shape()[1] != k {
            return Err(Error::Shape(format!("features {:?}, expected [b, {k}]", raw.shape())));
        }
        let mean = store.get(self.mean).value.data();
        let scale = store.get(self.scale).value.data();
        let mut out = raw.clone();
        for row in out.data_mut().chunks_mut(k) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
                *v = (*v - m) * s;
            }
        }
        Ok(out)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn stage_params(&self) -> &[(ParamId, ParamId)] {
        &self.stages
    }

    /// `[b × c × H' × W']` boxes to standardized `[b × K]` features.
    pub fn encode(&self, store: &ParamStore, boxes: &Tensor) -> Result<Tensor> {
        let raw = self.encode_raw(store, boxes)?;
        self.standardize(store, &raw)
    }

    /// Conv stack output before standardization.
    pub fn encode_raw(&self, store: &ParamStore, boxes: &Tensor) -> Result<Tensor> {
        let &[b, c, h, w] = boxes.shape() else {
            return Err(Error::Shape(format!("box stack must be [b, c, h, w], got {:?}", boxes.shape())));
        };
        if c != self.config.bands {
            return Err(Error::BandMismatch {
                expected: self.config.bands,
                got: c,
            });
        }
        if (h, w) != (self.config.box_h, self.config.box_w) {
            return Err(Error::Shape(format!(
                "boxes are {h}x{w}, encoder expects {}x{}",
                self.config.box_h, self.config.box_w
            )));
        }
        let mut x = boxes.clone();
        for &(wid, bid) in &self.stages {
            x = relu(&conv2d(&x, &store.get(wid).value, &store.get(bid).value, STRIDE, self.config.padding)?);
        }
        debug_assert_eq!(x.numel(), b * self.feature_dim);
        x.reshape(&[b, self.feature_dim])
    }
}

/// Trainable affine map `K → v`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
    features: usize,
    visual_dim: usize,
}

impl Projection {
    pub fn new(store: &mut ParamStore, features: usize, visual_dim: usize, rng: &mut Rng) -> Result<Self> {
        let std = 1.0 / (features as f64).sqrt();
        let weight = store.add_init("proj.weight", &[features, visual_dim], Init::Normal(std), rng)?;
        let bias = store.add_init("proj.bias", &[visual_dim], Init::Zeros, rng)?;
        Ok(Projection {
            weight,
            bias,
            features,
            visual_dim,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        match g.shape(features) {
            &[_, k] if k == self.features => {}
            other => {
                return Err(Error::Shape(format!(
                    "projection expects [b, {}], got {other:?}",
                    self.features
                )))
            }
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let z = g.matmul(features, w)?;
        g.add_bias(z, b)
    }

    /// `Z = I* · W + bias` outside of training.
    pub fn project(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let z = self.forward(&mut g, store, x)?;
        Ok(g.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad_check, Sampling};

    fn boxes(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::stream(seed, 9);
        Tensor::new(vec![b, c, h, w], (0..b * c * h * w).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_feature_dim() {
        assert_eq!(EncoderConfig::new(3, 16, 16, 64, 0).feature_dim().unwrap(), 128);
        assert_eq!(EncoderConfig::new(10, 32, 32, 64, 0).feature_dim().unwrap(), 512);
    }

    #[test]
    fn shape_and_row_independence() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(EncoderConfig::new(3, 16, 16, 8, 1), &mut store).unwrap();
        let mut x = boxes(4, 3, 16, 16, 2);
        let plane = 3 * 16 * 16;
        let first = x.data()[..plane].to_vec();
        x.data_mut()[2 * plane..3 * plane].copy_from_slice(&first);
        let f = enc.encode(&store, &x).unwrap();
        assert_eq!(f.shape(), &[4, 128]);
        assert_eq!(f.data()[..128], f.data()[256..384]);
        assert!(f.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn permuting_boxes_permutes_rows() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(EncoderConfig::new(2, 8, 8, 4, 3), &mut store).unwrap();
        let x = boxes(3, 2, 8, 8, 4);
        let parts: Vec<Tensor> = [2, 0, 1].iter().map(|&i| x.slice_leading(i)).collect();
        let permuted = Tensor::stack(&parts).unwrap();
        let a = enc.encode(&store, &x).unwrap();
        let b = enc.encode(&store, &permuted).unwrap();
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            assert_eq!(b.slice_leading(dst), a.slice_leading(src));
        }
    }

    #[test]
    fn hand_set_kernel_sums_window() {
        let config = EncoderConfig {
            bands: 1,
            channels: vec![1],
            box_h: 3,
            box_w: 3,
            padding: 0,
            visual_dim: 1,
            seed: 0,
        };
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(config, &mut store).unwrap();
        assert_eq!(enc.feature_dim(), 1);
        let (w, _) = enc.stage_params()[0];
        store.get_mut(w).value = Tensor::full(&[1, 1, 3, 3], 1.0);
        let vals = vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6, -0.7, 0.8, 0.9];
        let x = Tensor::new(vec![1, 1, 3, 3], vals.clone()).unwrap();
        let f = enc.encode(&store, &x).unwrap();
        assert!((f.item() - vals.iter().sum::<f64>()).abs() < 1e-15);
        let neg = Tensor::new(vec![1, 1, 3, 3], vals.iter().map(|v| -v).collect()).unwrap();
        assert_eq!(enc.encode(&store, &neg).unwrap().item(), 0.0);
    }

    #[test]
    fn kernels_repeat_one_weight_over_taps() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(EncoderConfig::new(3, 16, 16, 8, 4), &mut store).unwrap();
        for &(w, _) in enc.stage_params() {
            let p = store.get(w);
            assert!(p.frozen);
            for taps in p.value.data().chunks(KERNEL * KERNEL) {
                assert!(taps.iter().all(|&t| t == taps[0]));
            }
        }
    }

    #[test]
    fn calibration_standardizes_features() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(EncoderConfig::new(3, 8, 8, 4, 5), &mut store).unwrap();
        let raw: Vec<Tensor> = (0..6).map(|s| enc.encode_raw(&store, &boxes(3, 3, 8, 8, s)).unwrap()).collect();
        assert_eq!(enc.encode(&store, &boxes(3, 3, 8, 8, 0)).unwrap(), raw[0]);
        enc.calibrate(&mut store, &raw.iter().collect::<Vec<_>>()).unwrap();
        let k = enc.feature_dim();
        let z: Vec<Tensor> = raw.iter().map(|f| enc.standardize(&store, f).unwrap()).collect();
        for j in 0..k {
            let col: Vec<f64> = z.iter().flat_map(|t| t.data().chunks(k).map(move |r| r[j])).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            // a constant feature stays at zero, a varying one reaches unit variance up to eps
            assert!(var < 1e-12 || (var - 1.0).abs() < 1e-2, "feature {j}: {var}");
        }
        assert_eq!(enc.encode(&store, &boxes(3, 3, 8, 8, 0)).unwrap(), z[0]);
        assert!(enc.calibrate(&mut store, &[]).is_err());
    }

    #[test]
    fn band_mismatch() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(EncoderConfig::new(10, 16, 16, 8, 0), &mut store).unwrap();
        let err = enc.encode(&store, &boxes(2, 3, 16, 16, 0)).unwrap_err();
        assert!(err.to_string().contains("band mismatch"), "{err}");
        assert!(store.iter().all(|(_, p)| p.frozen));
    }

    #[test]
    fn projection_cases() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, 0);
        let proj = Projection::new(&mut store, 4, 4, &mut r).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        store.get_mut(proj.weight).value = eye;
        let x = boxes(1, 1, 3, 4, 5).reshape(&[3, 4]).unwrap();
        assert_eq!(proj.project(&store, &x).unwrap(), x);

        let bias = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        store.get_mut(proj.bias).value = bias.clone();
        let z = proj.project(&store, &Tensor::zeros(&[3, 4])).unwrap();
        for row in 0..3 {
            assert_eq!(&z.data()[row * 4..row * 4 + 4], bias.data());
        }
        assert!(proj.project(&store, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn projection_bias_gradient_is_row_count() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, 0);
        let proj = Projection::new(&mut store, 6, 3, &mut r).unwrap();
        let x = boxes(1, 1, 5, 6, 7).reshape(&[5, 6]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = proj.forward(&mut g, &store, xv).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        g.accumulate_param_grads(&mut store);
        assert!(store.get(proj.bias).grad.data().iter().all(|&v| v == 5.0));

        let report = finite_diff_grad_check(
            &mut store,
            |st, g| {
                let xv = g.constant(x.clone());
                let z = proj.forward(g, st, xv)?;
                let t = g.tanh(z);
                Ok(g.sum(t))
            },
            1e-5,
            Sampling::Total(18 + 3),
            &mut r,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.worst());
    }
}
