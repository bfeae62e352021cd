//! Dense row-major tensors and the small set of differentiable layer
//! primitives the reference network is built from.
//!
//! Every operation is pure: inputs are borrowed immutably and a fresh tensor
//! is returned. Gradients are provided as explicit `*_backward` companions
//! that compute vector-Jacobian products with respect to the operation input.

use crate::{Error, Result};

/// Minimum L2 norm accepted by [`l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(|i| f(i)).collect(),
        }
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![h, w], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterpret the flat data under a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dot: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at (h, w) of a rank-2 tensor.
    pub fn at2(&self, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[h * self.shape[1] + w]
    }

    /// Value at (c, h, w) of a rank-3 tensor.
    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    pub fn set3(&mut self, c: usize, h: usize, w: usize, value: f64) {
        debug_assert_eq!(self.rank(), 3);
        let idx = (c * self.shape[1] + h) * self.shape[2] + w;
        self.data[idx] = value;
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Output spatial extent of a convolution along one axis.
fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[C, H, W]`, `kernels` is `[K, C, kh, kw]`, `bias` is `[K]`;
/// the result is `[K, H', W']` with `H' = (H + 2p - kh) / stride + 1`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(kernels, 4, "conv2d kernels")?;
    expect_rank(bias, 1, "conv2d bias")?;
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be positive".into()));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (k_out, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv2d: kernel channels {kc} vs input channels {c_in}"
        )));
    }
    if bias.shape[0] != k_out {
        return Err(Error::Shape(format!(
            "conv2d: bias length {} vs {k_out} kernels",
            bias.shape[0]
        )));
    }
    let h_out = conv_extent(h, kh, stride, padding)?;
    let w_out = conv_extent(w, kw, stride, padding)?;

    let mut out = Tensor::zeros(vec![k_out, h_out, w_out]);
    let plane_out = h_out * w_out;
    for k in 0..k_out {
        let b = bias.data[k];
        for v in &mut out.data[k * plane_out..(k + 1) * plane_out] {
            *v = b;
        }
        // Weight-major accumulation: each kernel tap sweeps its valid output
        // window once, so zero taps cost nothing and rows stream in order.
        for c in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let weight = kernels.data[((k * c_in + c) * kh + ky) * kw + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    let (oy_lo, oy_hi) = tap_range(h, h_out, ky, stride, padding);
                    let (ox_lo, ox_hi) = tap_range(w, w_out, kx, stride, padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let in_row = &input.data[(c * h + iy) * w..(c * h + iy + 1) * w];
                        let out_row =
                            &mut out.data[(k * h_out + oy) * w_out..(k * h_out + oy + 1) * w_out];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - padding;
                            out_row[ox] += weight * in_row[ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output index range `[lo, hi)` for which `o*stride + tap - padding` lands
/// inside `[0, input_extent)`.
fn tap_range(
    input_extent: usize,
    output_extent: usize,
    tap: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    // Largest o with o*stride + tap - padding <= input_extent - 1.
    let hi = if input_extent + padding > tap {
        (((input_extent + padding - tap - 1) / stride) + 1).min(output_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gradient of [`conv2d`] with respect to its input (the bias and kernels are
/// constants here; this crate never trains).
pub fn conv2d_backward_input(
    grad_output: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    input_shape: &[usize],
) -> Result<Tensor> {
    expect_rank(grad_output, 3, "conv2d grad")?;
    expect_rank(kernels, 4, "conv2d kernels")?;
    let (c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (k_out, _, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    let (g_k, h_out, w_out) = (
        grad_output.shape[0],
        grad_output.shape[1],
        grad_output.shape[2],
    );
    if g_k != k_out {
        return Err(Error::Shape(format!(
            "conv2d backward: grad channels {g_k} vs {k_out} kernels"
        )));
    }
    let mut grad_input = Tensor::zeros(vec![c_in, h, w]);
    for k in 0..k_out {
        for c in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let weight = kernels.data[((k * c_in + c) * kh + ky) * kw + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    let (oy_lo, oy_hi) = tap_range(h, h_out, ky, stride, padding);
                    let (ox_lo, ox_hi) = tap_range(w, w_out, kx, stride, padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let g_row =
                            &grad_output.data[(k * h_out + oy) * w_out..(k * h_out + oy + 1) * w_out];
                        let in_row = &mut grad_input.data[(c * h + iy) * w..(c * h + iy + 1) * w];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - padding;
                            in_row[ix] += weight * g_row[ox];
                        }
                    }
                }
            }
        }
    }
    Ok(grad_input)
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient through ReLU: passes where the forward input was strictly
/// positive, zero elsewhere (the subgradient at 0 is taken as 0).
pub fn relu_backward(grad_output: &Tensor, forward_input: &Tensor) -> Result<Tensor> {
    if grad_output.shape != forward_input.shape {
        return Err(Error::Shape(format!(
            "relu backward: {:?} vs {:?}",
            grad_output.shape, forward_input.shape
        )));
    }
    Ok(Tensor {
        shape: grad_output.shape.clone(),
        data: grad_output
            .data
            .iter()
            .zip(&forward_input.data)
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Per-channel arithmetic mean: `[C, H, W] -> [C]`.
pub fn avgpool_global(input: &Tensor) -> Result<Tensor> {
    expect_rank(input, 3, "avgpool input")?;
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let area = (h * w) as f64;
    let data = (0..c)
        .map(|ch| {
            input.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area
        })
        .collect();
    Ok(Tensor {
        shape: vec![c],
        data,
    })
}

pub fn avgpool_global_backward(grad_output: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    expect_rank(grad_output, 1, "avgpool grad")?;
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    if grad_output.shape[0] != c {
        return Err(Error::Shape(format!(
            "avgpool backward: grad channels {} vs {c}",
            grad_output.shape[0]
        )));
    }
    let area = (h * w) as f64;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let g = grad_output.data[ch] / area;
        for v in &mut out.data[ch * h * w..(ch + 1) * h * w] {
            *v = g;
        }
    }
    Ok(out)
}

/// Affine map `W x + b` with `W: [M, N]`, `x: [N]`, `b: [M]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(input, 1, "dense input")?;
    expect_rank(weights, 2, "dense weights")?;
    expect_rank(bias, 1, "dense bias")?;
    let (m, n) = (weights.shape[0], weights.shape[1]);
    if input.shape[0] != n {
        return Err(Error::Shape(format!(
            "dense: input length {} vs weight columns {n}",
            input.shape[0]
        )));
    }
    if bias.shape[0] != m {
        return Err(Error::Shape(format!(
            "dense: bias length {} vs weight rows {m}",
            bias.shape[0]
        )));
    }
    let data = (0..m)
        .map(|row| {
            bias.data[row]
                + weights.data[row * n..(row + 1) * n]
                    .iter()
                    .zip(&input.data)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
        .collect();
    Ok(Tensor {
        shape: vec![m],
        data,
    })
}

pub fn dense_backward_input(grad_output: &Tensor, weights: &Tensor) -> Result<Tensor> {
    expect_rank(grad_output, 1, "dense grad")?;
    expect_rank(weights, 2, "dense weights")?;
    let (m, n) = (weights.shape[0], weights.shape[1]);
    if grad_output.shape[0] != m {
        return Err(Error::Shape(format!(
            "dense backward: grad length {} vs weight rows {m}",
            grad_output.shape[0]
        )));
    }
    let data = (0..n)
        .map(|col| {
            (0..m)
                .map(|row| grad_output.data[row] * weights.data[row * n + col])
                .sum()
        })
        .collect();
    Ok(Tensor {
        shape: vec![n],
        data,
    })
}

/// `x / ||x||_2`; errors when the norm is at or below [`NORM_EPSILON`].
pub fn l2_normalize(input: &Tensor) -> Result<Tensor> {
    expect_rank(input, 1, "l2_normalize input")?;
    let norm = input.norm2();
    if !(norm > NORM_EPSILON) {
        return Err(Error::DegenerateEmbedding {
            norm,
            min: NORM_EPSILON,
        });
    }
    Ok(input.scale(1.0 / norm))
}

/// Gradient through [`l2_normalize`]: `(g - (g . x̂) x̂) / ||x||`.
pub fn l2_normalize_backward(grad_output: &Tensor, forward_input: &Tensor) -> Result<Tensor> {
    if grad_output.shape != forward_input.shape {
        return Err(Error::Shape(format!(
            "l2_normalize backward: {:?} vs {:?}",
            grad_output.shape, forward_input.shape
        )));
    }
    let norm = forward_input.norm2();
    if !(norm > NORM_EPSILON) {
        return Err(Error::DegenerateEmbedding {
            norm,
            min: NORM_EPSILON,
        });
    }
    let unit = forward_input.scale(1.0 / norm);
    let projection = grad_output.dot(&unit)?;
    Ok(Tensor {
        shape: grad_output.shape.clone(),
        data: grad_output
            .data
            .iter()
            .zip(&unit.data)
            .map(|(&g, &u)| (g - projection * u) / norm)
            .collect(),
    })
}
