//! Convolution, batch-norm and activation kernels with their backward passes.
//!
//! Activations are laid out `[batch][channel][z][y][x]` with x fastest. Spatial
//! triples are always `(x, y, z)`.

use matrixmultiply::sgemm;

/// Geometry of a (possibly strided) convolution from `input` dims to `output` dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = (input[a] + 2 * pad[a] - kernel[a]) / stride[a] + 1;
        }
        Self {
            input,
            output,
            kernel,
            stride,
            pad,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }
}

/// For every kernel offset along one axis, the (output index, input index) range that
/// stays inside the input. Returns `(first_out, last_out_exclusive)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // input = o * stride + k - pad must satisfy 0 <= input < n_in
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds `input` (`channels` planes of `geom.input`) into a
/// `(channels * kernel_volume) x out_len` matrix.
pub fn im2col(input: &[f32], channels: usize, geom: &ConvGeom, cols: &mut [f32]) {
    let [ix, iy, iz] = geom.input;
    let [ox, oy, oz] = geom.output;
    let [kx, ky, kz] = geom.kernel;
    let [sx, sy, sz] = geom.stride;
    let [px, py, pz] = geom.pad;
    let out_len = geom.out_len();
    debug_assert_eq!(cols.len(), channels * geom.kernel_volume() * out_len);
    let mut row = 0;
    for c in 0..channels {
        let plane = &input[c * ix * iy * iz..(c + 1) * ix * iy * iz];
        for dz in 0..kz {
            let (z_lo, z_hi) = valid_range(dz, sz, pz, iz, oz);
            for dy in 0..ky {
                let (y_lo, y_hi) = valid_range(dy, sy, py, iy, oy);
                for dx in 0..kx {
                    let (x_lo, x_hi) = valid_range(dx, sx, px, ix, ox);
                    let dst = &mut cols[row * out_len..(row + 1) * out_len];
                    row += 1;
                    dst.fill(0.0);
                    for z in z_lo..z_hi {
                        let zi = z * sz + dz - pz;
                        for y in y_lo..y_hi {
                            let yi = y * sy + dy - py;
                            let src_row = &plane[(zi * iy + yi) * ix..(zi * iy + yi + 1) * ix];
                            let d = &mut dst[(z * oy + y) * ox..(z * oy + y + 1) * ox];
                            if sx == 1 {
                                let xi0 = x_lo + dx - px;
                                d[x_lo..x_hi].copy_from_slice(&src_row[xi0..xi0 + (x_hi - x_lo)]);
                            } else {
                                for x in x_lo..x_hi {
                                    d[x] = src_row[x * sx + dx - px];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `input`-shaped `out`.
pub fn col2im(cols: &[f32], channels: usize, geom: &ConvGeom, out: &mut [f32]) {
    let [ix, iy, iz] = geom.input;
    let [ox, oy, oz] = geom.output;
    let [kx, ky, kz] = geom.kernel;
    let [sx, sy, sz] = geom.stride;
    let [px, py, pz] = geom.pad;
    let out_len = geom.out_len();
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut out[c * ix * iy * iz..(c + 1) * ix * iy * iz];
        for dz in 0..kz {
            let (z_lo, z_hi) = valid_range(dz, sz, pz, iz, oz);
            for dy in 0..ky {
                let (y_lo, y_hi) = valid_range(dy, sy, py, iy, oy);
                for dx in 0..kx {
                    let (x_lo, x_hi) = valid_range(dx, sx, px, ix, ox);
                    let src = &cols[row * out_len..(row + 1) * out_len];
                    row += 1;
                    for z in z_lo..z_hi {
                        let zi = z * sz + dz - pz;
                        for y in y_lo..y_hi {
                            let yi = y * sy + dy - py;
                            let dst_row = &mut plane[(zi * iy + yi) * ix..(zi * iy + yi + 1) * ix];
                            let s = &src[(z * oy + y) * ox..(z * oy + y + 1) * ox];
                            if sx == 1 {
                                let xi0 = x_lo + dx - px;
                                for (d, v) in dst_row[xi0..xi0 + (x_hi - x_lo)]
                                    .iter_mut()
                                    .zip(&s[x_lo..x_hi])
                                {
                                    *d += *v;
                                }
                            } else {
                                for x in x_lo..x_hi {
                                    dst_row[x * sx + dx - px] += s[x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * a(m x k) * b(k x n) + beta * c`, with explicit strides so
/// transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        // SAFETY: the operand extents implied by the dimensions and strides are
        // checked by the callers' slice lengths (debug-asserted above for `c`).
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cached state of a batch-norm layer for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct BnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training-mode batch norm in place over `x` laid out `[batch][channel][spatial]`.
/// Updates the running statistics and returns the cache.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train(
    x: &mut [f32],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
) -> BnCache {
    let count = (batch * spatial) as f64;
    let mut inv_std = vec![0f32; channels];
    let mut xhat = vec![0f32; x.len()];
    for c in 0..channels {
        let mut sum = 0.0f64;
        for b in 0..batch {
            let s = &x[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
            sum += s.iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for b in 0..batch {
            let s = &x[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
            sq += s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = istd as f32;
        let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
        running_mean[c] =
            ((1.0 - BN_MOMENTUM) * running_mean[c] as f64 + BN_MOMENTUM * mean) as f32;
        running_var[c] =
            ((1.0 - BN_MOMENTUM) * running_var[c] as f64 + BN_MOMENTUM * unbiased) as f32;
        let (g, bta) = (gamma[c], beta[c]);
        let (mean, istd) = (mean as f32, istd as f32);
        for b in 0..batch {
            let range = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            for (v, h) in x[range.clone()].iter_mut().zip(xhat[range].iter_mut()) {
                *h = (*v - mean) * istd;
                *v = g * *h + bta;
            }
        }
    }
    BnCache { xhat, inv_std }
}

/// Evaluation-mode batch norm with running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval(
    x: &mut [f32],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
) {
    for c in 0..channels {
        let istd = (1.0 / (running_var[c] as f64 + BN_EPS).sqrt()) as f32;
        let scale = gamma[c] * istd;
        let shift = beta[c] - running_mean[c] * scale;
        for b in 0..batch {
            for v in &mut x[(b * channels + c) * spatial..(b * channels + c + 1) * spatial] {
                *v = *v * scale + shift;
            }
        }
    }
}

/// Backward of training-mode batch norm. Overwrites `dy` with the input gradient and
/// accumulates into `dgamma`/`dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward(
    dy: &mut [f32],
    cache: &BnCache,
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let count = (batch * spatial) as f64;
    for c in 0..channels {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..batch {
            let range = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            for (d, h) in dy[range.clone()].iter().zip(&cache.xhat[range]) {
                sum_dy += *d as f64;
                sum_dy_xhat += (*d as f64) * (*h as f64);
            }
        }
        dgamma[c] += sum_dy_xhat as f32;
        dbeta[c] += sum_dy as f32;
        let k = gamma[c] * cache.inv_std[c];
        let mean_dy = (sum_dy / count) as f32;
        let mean_dy_xhat = (sum_dy_xhat / count) as f32;
        for b in 0..batch {
            let range = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            for (d, h) in dy[range.clone()].iter_mut().zip(&cache.xhat[range]) {
                *d = k * (*d - mean_dy - *h * mean_dy_xhat);
            }
        }
    }
}

#[inline]
pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the forward ReLU output was zero.
#[inline]
pub fn relu_backward(dy: &mut [f32], out: &[f32]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Channel softmax over logits laid out `[batch][channel][spatial]`, computed in f64.
pub fn softmax_channels(logits: &[f32], batch: usize, channels: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0f32; logits.len()];
    let mut buf = vec![0f64; channels];
    for b in 0..batch {
        let base = b * channels * spatial;
        for s in 0..spatial {
            let mut max = f64::NEG_INFINITY;
            for (c, v) in buf.iter_mut().enumerate() {
                *v = logits[base + c * spatial + s] as f64;
                max = max.max(*v);
            }
            let mut sum = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for (c, v) in buf.iter().enumerate() {
                out[base + c * spatial + s] = (v / sum) as f32;
            }
        }
    }
    out
}
