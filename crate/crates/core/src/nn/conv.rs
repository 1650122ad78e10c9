//! Valid-extent 2-D cross-correlation lowered to a matrix product.

use super::{NnError, Result, Tensor3};

/// One convolution layer: `weights` is `[out, in, k, k]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Row length of the weight matrix (`in * k * k`).
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, input: &Tensor3) -> Result<(usize, usize)> {
        if input.channels != self.in_channels {
            return Err(NnError::Shape(format!(
                "layer expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        if input.height < self.kernel || input.width < self.kernel {
            return Err(NnError::Shape(format!(
                "{}x{} input is smaller than the {}x{} kernel",
                input.height, input.width, self.kernel, self.kernel
            )));
        }
        Ok((input.height - self.kernel + 1, input.width - self.kernel + 1))
    }
}

/// `C = A (m x k) * B (k x n)` with all operands row-major; `beta` scales the old `C`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    gemm_into(m, k, n, a, a_trans, b, b_trans, beta, c, n);
}

/// As [`gemm`], with `C` rows `c_row_stride` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert!(m == 0 || c.len() >= (m - 1) * c_row_stride + n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the declared shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// Unfold every `k x k` receptive field into a column: `[c*k*k, oh*ow]`.
pub(crate) fn im2col(input: &Tensor3, k: usize) -> Vec<f64> {
    let (oh, ow) = (input.height - k + 1, input.width - k + 1);
    let mut cols = vec![0.0; input.channels * k * k * oh * ow];
    let mut row = 0;
    for c in 0..input.channels {
        let plane = input.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let src = (y + ky) * input.width + kx;
                    dst[y * ow..(y + 1) * ow].copy_from_slice(&plane[src..src + ow]);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im(cols: &[f64], channels: usize, height: usize, width: usize, k: usize) -> Tensor3 {
    let (oh, ow) = (height - k + 1, width - k + 1);
    let mut out = Tensor3::zeros(channels, height, width);
    let mut row = 0;
    for c in 0..channels {
        let base = c * height * width;
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let dst = base + (y + ky) * width + kx;
                    for (d, s) in out.data[dst..dst + ow].iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Target size of one unfolded chunk in [`conv2d_valid`]; keeps it cache resident.
const CHUNK_BYTES: usize = 1 << 21;

/// Cross-correlation (no kernel flip) plus per-channel bias over the valid extent.
pub fn conv2d_valid(input: &Tensor3, layer: &ConvLayer) -> Result<Tensor3> {
    let (oh, ow) = layer.check_input(input)?;
    let n = oh * ow;
    let mut out = Tensor3::zeros(layer.out_channels, oh, ow);
    for (o, b) in layer.bias.iter().enumerate() {
        out.data[o * n..(o + 1) * n].fill(*b);
    }
    if layer.kernel == 1 {
        gemm(layer.out_channels, layer.in_channels, n, &layer.weights, false, &input.data, false, 1.0, &mut out.data);
        return Ok(out);
    }
    // Unfold a band of output rows at a time and write it straight into place.
    let k = layer.kernel;
    let band = (CHUNK_BYTES / (8 * layer.fan_in() * ow)).clamp(1, oh);
    let mut row = 0;
    while row < oh {
        let rows = band.min(oh - row);
        let cols = im2col(&input.crop(row, 0, rows + k - 1, input.width), k);
        gemm_into(
            layer.out_channels,
            layer.fan_in(),
            rows * ow,
            &layer.weights,
            false,
            &cols,
            false,
            1.0,
            &mut out.data[row * ow..],
            n,
        );
        row += rows;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(input: &Tensor3, layer: &ConvLayer) -> Tensor3 {
        let k = layer.kernel;
        let (oh, ow) = (input.height - k + 1, input.width - k + 1);
        let mut out = Tensor3::zeros(layer.out_channels, oh, ow);
        for o in 0..layer.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = layer.bias[o];
                    for c in 0..layer.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += layer.weights[((o * layer.in_channels + c) * k + ky) * k + kx]
                                    * input.at(c, y + ky, x + kx);
                            }
                        }
                    }
                    *out.at_mut(o, y, x) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut layer = ConvLayer::zeros(1, 1, 1);
        layer.weights[0] = 1.0;
        let input = Tensor3::from_vec(1, 3, 4, (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        assert_eq!(conv2d_valid(&input, &layer).unwrap(), input);
    }

    #[test]
    fn ones_kernel_on_constant() {
        let mut layer = ConvLayer::zeros(1, 1, 3);
        layer.weights.fill(1.0);
        layer.bias[0] = 0.25;
        let input = Tensor3::from_vec(1, 6, 5, vec![2.0; 30]).unwrap();
        let out = conv2d_valid(&input, &layer).unwrap();
        assert_eq!(out.shape(), (1, 4, 3));
        assert!(out.data.iter().all(|&v| v == 9.0 * 2.0 + 0.25));
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor3::from_vec(1, 5, 5, (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut layer = ConvLayer::zeros(2, 1, 3);
        layer.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        let fast = conv2d_valid(&input, &layer).unwrap();
        let slow = naive(&input, &layer);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor3::from_vec(2, 6, 7, (0..84).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cols = im2col(&x, 3);
        let y: Vec<f64> = (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 2, 6, 7, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let layer = ConvLayer::zeros(1, 2, 3);
        assert!(conv2d_valid(&Tensor3::zeros(1, 5, 5), &layer).is_err());
        assert!(conv2d_valid(&Tensor3::zeros(2, 2, 5), &layer).is_err());
    }
}
