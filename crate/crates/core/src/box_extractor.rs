//! Label-free region sampling: random axis-aligned boxes with minimum extents,
//! cropped and resized to a common size with cubic convolution.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::MultispectralImage;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Half-open pixel box `[start_h, end_h) × [start_w, end_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub start_h: usize,
    pub end_h: usize,
    pub start_w: usize,
    pub end_w: usize,
}

impl BoxSpec {
    pub fn full(height: usize, width: usize) -> Self {
        BoxSpec {
            start_h: 0,
            end_h: height,
            start_w: 0,
            end_w: width,
        }
    }

    pub fn height(&self) -> usize {
        self.end_h - self.start_h
    }

    pub fn width(&self) -> usize {
        self.end_w - self.start_w
    }

    /// Bounds and minimum-extent constraints for a `height × width` image.
    pub fn satisfies(&self, height: usize, width: usize, min_h: usize, min_w: usize) -> bool {
        self.start_h < self.end_h
            && self.end_h <= height
            && self.start_w < self.end_w
            && self.end_w <= width
            && self.height() >= min_h
            && self.width() >= min_w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxExtractorConfig {
    pub boxes: usize,
    pub min_h: usize,
    pub min_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub seed: u64,
}

impl BoxExtractorConfig {
    /// Defaults for a given image size: ten boxes, minimum extent a quarter
    /// of each side, 16×16 output.
    pub fn for_image(height: usize, width: usize) -> Self {
        BoxExtractorConfig {
            boxes: 10,
            min_h: (height / 4).max(1),
            min_w: (width / 4).max(1),
            out_h: 16,
            out_w: 16,
            seed: 0,
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.boxes == 0 || self.out_h == 0 || self.out_w == 0 || self.min_h == 0 || self.min_w == 0 {
            return Err(Error::Config(format!(
                "box extractor needs b, min_h, min_w, h_out, w_out >= 1, got {self:?}"
            )));
        }
        if self.min_h > height || self.min_w > width {
            return Err(Error::ImageTooSmall {
                height,
                width,
                min_h: self.min_h,
                min_w: self.min_w,
            });
        }
        Ok(())
    }
}

/// Draw `config.boxes` independent boxes. Per axis the start is uniform on
/// `0..=len-min`, then the end uniform on `start+min..=len`.
pub fn sample_boxes(
    height: usize,
    width: usize,
    config: &BoxExtractorConfig,
    rng: &mut Rng,
) -> Result<Vec<BoxSpec>> {
    config.validate(height, width)?;
    let mut axis = |len: usize, min: usize| {
        let start = rng.random_range(0..=len - min);
        let end = rng.random_range(start + min..=len);
        (start, end)
    };
    Ok((0..config.boxes)
        .map(|_| {
            let (start_h, end_h) = axis(height, config.min_h);
            let (start_w, end_w) = axis(width, config.min_w);
            BoxSpec {
                start_h,
                end_h,
                start_w,
                end_w,
            }
        })
        .collect())
}

/// Copy of all bands over the box region, `[c × h × w]`.
pub fn crop(image: &MultispectralImage, bx: &BoxSpec) -> Result<Tensor> {
    crop_tensor(image.tensor(), bx)
}

pub fn crop_tensor(src: &Tensor, bx: &BoxSpec) -> Result<Tensor> {
    let &[c, h, w] = src.shape() else {
        return Err(Error::Shape(format!("crop expects [c, h, w], got {:?}", src.shape())));
    };
    if !bx.satisfies(h, w, 1, 1) {
        return Err(Error::OutOfBounds(format!("{bx:?} in {h}x{w} image")));
    }
    let (bh, bw) = (bx.height(), bx.width());
    let mut out = Vec::with_capacity(c * bh * bw);
    for band in 0..c {
        for y in bx.start_h..bx.end_h {
            let row = (band * h + y) * w;
            out.extend_from_slice(&src.data()[row + bx.start_w..row + bx.end_w]);
        }
    }
    Tensor::new(vec![c, bh, bw], out)
}

const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Source coordinate sampled by output pixel `dst` (pixel-center alignment).
pub fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5
}

/// Four clamped taps and weights per output coordinate along one axis.
fn axis_taps(src_len: usize, dst_len: usize) -> Vec<[(usize, f64); 4]> {
    (0..dst_len)
        .map(|dst| {
            let x = source_coord(dst, src_len, dst_len);
            let base = x.floor() as isize;
            let mut taps = [(0usize, 0.0f64); 4];
            for (t, tap) in taps.iter_mut().enumerate() {
                let p = base - 1 + t as isize;
                let idx = p.clamp(0, src_len as isize - 1) as usize;
                *tap = (idx, cubic_kernel(x - p as f64));
            }
            taps
        })
        .collect()
}

/// Weighted tap sum taken relative to the second tap, so flat input
/// reproduces exactly.
fn interpolate(taps: &[(usize, f64); 4], value: impl Fn(usize) -> f64) -> f64 {
    let base = value(taps[1].0);
    base + taps.iter().map(|&(i, wt)| wt * (value(i) - base)).sum::<f64>()
}

/// Separable cubic-convolution resize of every band of `[c × h × w]` to
/// `[c × out_h × out_w]`, clamp-to-edge.
pub fn bicubic_resize(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = src.shape() else {
        return Err(Error::Shape(format!("resize expects [c, h, w], got {:?}", src.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("resize to {out_h}x{out_w}")));
    }
    let col_taps = axis_taps(w, out_w);
    let row_taps = axis_taps(h, out_h);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut horiz = vec![0.0; h * out_w];
    for band in 0..c {
        let plane = &src.data()[band * h * w..(band + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, taps) in col_taps.iter().enumerate() {
                horiz[y * out_w + x] = interpolate(taps, |i| row[i]);
            }
        }
        for taps in &row_taps {
            for x in 0..out_w {
                out.push(interpolate(taps, |i| horiz[i * out_w + x]));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Sample boxes, crop and resize: `[boxes × c × out_h × out_w]`.
pub fn extract(
    image: &MultispectralImage,
    config: &BoxExtractorConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    extract_with_boxes(image, config, rng).map(|(t, _)| t)
}

/// [`extract`] that also returns the sampled boxes.
pub fn extract_with_boxes(
    image: &MultispectralImage,
    config: &BoxExtractorConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<BoxSpec>)> {
    let boxes = sample_boxes(image.height(), image.width(), config, rng)?;
    let resized = boxes
        .iter()
        .map(|bx| bicubic_resize(&crop(image, bx)?, config.out_h, config.out_w))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&resized)?, boxes))
}
