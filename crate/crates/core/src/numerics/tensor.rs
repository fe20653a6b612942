use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sub-array `index` along the leading axis.
    pub fn slice_leading(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!("softmax axis {axis} on rank {}", x.rank())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let (outer, n, inner) = axis_split(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| x.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (x.data[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[at(j)] /= sum;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().unwrap();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape(format!(
            "layer_norm over width {d} with gain {:?} bias {:?}",
            gain.shape, bias.shape
        )));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let (xhat, _) = normalize_row(row, eps);
        for j in 0..d {
            row[j] = xhat[j] * gain.data[j] + bias.data[j];
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Normalized row and its inverse standard deviation.
pub(crate) fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::Shape(format!("concat axis {axis} on rank {rank}")));
    }
    for p in parts {
        let compatible = p.rank() == rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Shape(format!(
                "concat along {axis}: {:?} vs {:?}",
                p.shape, first.shape
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Inverse of [`concat`]: split `x` along `axis` into pieces of the given sizes.
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if axis >= x.rank() || sizes.iter().sum::<usize>() != x.shape[axis] {
        return Err(Error::Shape(format!(
            "split {:?} along {axis} into {sizes:?}",
            x.shape
        )));
    }
    let (outer, n, inner) = axis_split(&x.shape, axis);
    let mut out: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
    for o in 0..outer {
        let mut offset = o * n * inner;
        for (piece, &s) in out.iter_mut().zip(sizes) {
            piece.extend_from_slice(&x.data[offset..offset + s * inner]);
            offset += s * inner;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let mut shape = x.shape.clone();
            shape[axis] = s;
            Tensor::new(shape, data)
        })
        .collect()
}

/// `c[m×n] = a[m×k] · b[k×n]`, row-major slices.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        c_row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `da[m×k] += dc[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(dc_row, b_row);
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dc[m×n]`
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &g) in db_row.iter_mut().zip(dc_row) {
                *d += a_ip * g;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the loop vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// 2-D convolution over a `[n × c_in × h × w]` batch with a
/// `[c_out × c_in × kh × kw]` kernel, zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, c_in, h, w] = input.shape[..] else {
        return Err(Error::Shape(format!("conv2d input {:?}", input.shape)));
    };
    let [c_out, wc_in, kh, kw] = weight.shape[..] else {
        return Err(Error::Shape(format!("conv2d weight {:?}", weight.shape)));
    };
    if wc_in != c_in || bias.numel() != c_out || stride == 0 {
        return Err(Error::Shape(format!(
            "conv2d input {:?} weight {:?} bias {:?}",
            input.shape, weight.shape, bias.shape
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!("conv2d kernel larger than input {:?}", input.shape)));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for img in 0..n {
        let x = &input.data[img * c_in * h * w..(img + 1) * c_in * h * w];
        for co in 0..c_out {
            let k = &weight.data[co * c_in * kh * kw..(co + 1) * c_in * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += k[(ci * kh + ky) * kw + kx]
                                    * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((img * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::from_vec(vec![0.0, 0.0, 0.0]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::from_vec(vec![1000.0, 1000.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]), 0).unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&Tensor::from_vec(vec![0.0, f64::NAN]), 0).unwrap_err();
        assert_eq!(err.to_string(), "non-finite input");
        assert!(softmax(&Tensor::from_vec(vec![f64::INFINITY]), 0).is_err());
        assert!(softmax(&Tensor::from_vec(vec![1.0]), 1).is_err());
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let sum: f64 = (0..3).map(|j| s.data()[o * 6 + j * 2 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        let row = &y.data()[..3];
        let mean = row.iter().sum::<f64>() / 3.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
        assert_eq!(&y.data()[3..], &[0.0, 0.0, 0.0]);

        let bias = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let y = layer_norm(&x, &Tensor::zeros(&[3]), &bias, 1e-12).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_kernel_sums_window() {
        let vals = vec![0.5, -0.25, 1.0, 2.0, 0.0, 0.75, -1.0, 0.125, 0.5];
        let input = Tensor::new(vec![1, 1, 3, 3], vals.clone()).unwrap();
        let weight = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&input, &weight, &Tensor::zeros(&[1]), 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        let expected: f64 = vals.iter().sum();
        assert_eq!(relu(&out).item(), expected.max(0.0));

        let neg = Tensor::new(vec![1, 1, 3, 3], vals.iter().map(|v| -v).collect()).unwrap();
        let out = conv2d(&neg, &weight, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(relu(&out).item(), 0.0);
    }

    #[test]
    fn gelu_tanh_close_to_exact() {
        // reference values of x * Phi(x), computed with erf
        let refs = [
            (-3.0, -0.004_049_694_094_890_31),
            (-1.0, -0.158_655_253_931_457_05),
            (0.0, 0.0),
            (0.5, 0.345_731_230_637_006_56),
            (1.0, 0.841_344_746_068_542_9),
            (2.0, 1.954_499_736_103_642),
        ];
        for (x, exact) in refs {
            assert!((gelu_scalar(x) - exact).abs() < 1e-3, "x={x}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_sums_to_one(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..24),
        ) {
            let n = vals.len();
            let s = softmax(&Tensor::from_vec(vals), 0).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&v| v > 0.0 || n > 1));
        }

        #[test]
        fn concat_split_round_trip(
            outer in 1usize..4, a in 1usize..5, b in 1usize..5, inner in 1usize..4, axis in 0usize..3,
        ) {
            let dims = |mid: usize| -> Vec<usize> {
                let mut s = vec![outer, inner, inner];
                s[axis] = mid;
                s
            };
            let sa = dims(a);
            let sb = dims(b);
            let ta = Tensor::new(sa.clone(), (0..sa.iter().product::<usize>()).map(|i| i as f64).collect()).unwrap();
            let tb = Tensor::new(sb.clone(), (0..sb.iter().product::<usize>()).map(|i| -(i as f64)).collect()).unwrap();
            let c = concat(&[&ta, &tb], axis).unwrap();
            let parts = split(&c, axis, &[a, b]).unwrap();
            prop_assert_eq!(&parts[0], &ta);
            prop_assert_eq!(&parts[1], &tb);
        }
    }
}
