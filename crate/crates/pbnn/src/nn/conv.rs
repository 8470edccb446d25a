//! 2-D cross-correlation, bias-free (batch normalization follows every
//! convolution and absorbs the shift).
//!
//! Layout: activations NCHW, weights OIkk, both row-major. The forward pass is
//! im2col + matmul per batch element; the direct nested-loop form lives in the
//! test suite as the correctness oracle.

use crate::error::{Error, Result};
use crate::nn::matmul::{matmul, matmul_nt, matmul_tn};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("conv channels must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        Ok(())
    }

    /// Spatial output size for an H×W input.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let grow = |d: usize| -> Result<usize> {
            let padded = d + 2 * self.padding;
            if padded < self.kernel_size {
                return Err(Error::shape(
                    "ConvSpec::out_size",
                    format!("input dim {d} smaller than kernel {}", self.kernel_size),
                ));
            }
            Ok((padded - self.kernel_size) / self.stride + 1)
        };
        Ok((grow(h)?, grow(w)?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    fn check_forward_shapes<F: Scalar>(&self, input: &Tensor<F>, weight: &Tensor<F>) -> Result<()> {
        if input.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be NCHW, got rank {}", input.rank()),
            ));
        }
        if input.dim(1) != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels, spec expects {}",
                    input.dim(1),
                    self.in_channels
                ),
            ));
        }
        if weight.shape() != self.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight shape {:?} does not match spec {:?}",
                    weight.shape(),
                    self.weight_shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Expand one image (C×H×W slice) into a (C·k·k) × (H'·W') patch matrix.
fn im2col<F: Scalar>(
    img: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    h_out: usize,
    w_out: usize,
    cols: &mut [F],
) {
    let k = spec.kernel_size;
    let hw_out = h_out * w_out;
    for c in 0..c_in {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * hw_out..][..hw_out];
                for oh in 0..h_out {
                    let ih = (oh * spec.stride + ki) as isize - spec.padding as isize;
                    let dst = &mut row[oh * w_out..(oh + 1) * w_out];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * spec.stride + kj) as isize - spec.padding as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            F::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back into an image gradient (inverse of im2col).
fn col2im<F: Scalar>(
    cols: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    h_out: usize,
    w_out: usize,
    img: &mut [F],
) {
    let k = spec.kernel_size;
    let hw_out = h_out * w_out;
    img.fill(F::zero());
    for c in 0..c_in {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * hw_out..][..hw_out];
                for oh in 0..h_out {
                    let ih = (oh * spec.stride + ki) as isize - spec.padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, &v) in row[oh * w_out..(oh + 1) * w_out].iter().enumerate() {
                        let iw = (ow * spec.stride + kj) as isize - spec.padding as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlate `input` (NCHW) with `weight` (OIkk).
pub fn conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    spec: &ConvSpec,
) -> Result<Tensor<F>> {
    spec.check_forward_shapes(input, weight)?;
    let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (h_out, w_out) = spec.out_size(h, w)?;
    let (c_out, k) = (spec.out_channels, spec.kernel_size);
    let hw_out = h_out * w_out;
    let patch = c_in * k * k;

    let mut out = Tensor::zeros(vec![n, c_out, h_out, w_out]);
    let in_data = input.data();
    let w_data = weight.data();
    out.data_mut()
        .par_chunks_exact_mut(c_out * hw_out)
        .enumerate()
        .for_each(|(i, out_slice)| {
            let img = &in_data[i * c_in * h * w..(i + 1) * c_in * h * w];
            let mut cols = vec![F::zero(); patch * hw_out];
            im2col(img, c_in, h, w, spec, h_out, w_out, &mut cols);
            matmul(w_data, &cols, c_out, patch, hw_out, out_slice);
        });
    Ok(out)
}

pub(crate) struct ConvGrads<F> {
    pub grad_input: Option<Tensor<F>>,
    pub grad_weight: Option<Tensor<F>>,
}

/// Backward pass; callers choose which gradients they need.
pub(crate) fn conv2d_backward_opts<F: Scalar>(
    grad_output: &Tensor<F>,
    input: &Tensor<F>,
    weight: &Tensor<F>,
    spec: &ConvSpec,
    want_input: bool,
    want_weight: bool,
) -> Result<ConvGrads<F>> {
    spec.check_forward_shapes(input, weight)?;
    let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (h_out, w_out) = spec.out_size(h, w)?;
    let (c_out, k) = (spec.out_channels, spec.kernel_size);
    let expected = [n, c_out, h_out, w_out];
    if grad_output.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_output shape {:?}, expected {:?}", grad_output.shape(), expected),
        ));
    }
    let hw_out = h_out * w_out;
    let patch = c_in * k * k;
    let chw = c_in * h * w;
    let in_data = input.data();
    let go_data = grad_output.data();
    let w_data = weight.data();

    let grad_input = if want_input {
        let mut gi = Tensor::zeros(vec![n, c_in, h, w]);
        gi.data_mut()
            .par_chunks_exact_mut(chw)
            .enumerate()
            .for_each(|(i, gi_slice)| {
                let go = &go_data[i * c_out * hw_out..(i + 1) * c_out * hw_out];
                let mut gcols = vec![F::zero(); patch * hw_out];
                matmul_tn(w_data, go, c_out, patch, hw_out, &mut gcols);
                col2im(&gcols, c_in, h, w, spec, h_out, w_out, gi_slice);
            });
        Some(gi)
    } else {
        None
    };

    let grad_weight = if want_weight {
        // Per-element partials summed in batch order keeps the reduction
        // deterministic regardless of thread count.
        let partials: Vec<Vec<F>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = &in_data[i * chw..(i + 1) * chw];
                let go = &go_data[i * c_out * hw_out..(i + 1) * c_out * hw_out];
                let mut cols = vec![F::zero(); patch * hw_out];
                im2col(img, c_in, h, w, spec, h_out, w_out, &mut cols);
                let mut gw = vec![F::zero(); c_out * patch];
                matmul_nt(go, &cols, c_out, hw_out, patch, &mut gw);
                gw
            })
            .collect();
        let mut gw = Tensor::zeros(spec.weight_shape().to_vec());
        for part in &partials {
            for (dst, &src) in gw.data_mut().iter_mut().zip(part) {
                *dst = *dst + src;
            }
        }
        Some(gw)
    } else {
        None
    };

    Ok(ConvGrads { grad_input, grad_weight })
}

/// Gradients of `sum(grad_output ⊙ conv2d_forward(input, weight))` with respect
/// to the input and the weight.
pub fn conv2d_backward<F: Scalar>(
    grad_output: &Tensor<F>,
    input: &Tensor<F>,
    weight: &Tensor<F>,
    spec: &ConvSpec,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let grads = conv2d_backward_opts(grad_output, input, weight, spec, true, true)?;
    Ok((grads.grad_input.unwrap(), grads.grad_weight.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(ci: usize, co: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
        ConvSpec {
            in_channels: ci,
            out_channels: co,
            kernel_size: k,
            stride,
            padding: pad,
        }
    }

    /// Direct nested-loop cross-correlation; the correctness oracle.
    /// Accumulates in the same (c, ki, kj) order as the im2col kernel.
    fn conv_reference<F: Scalar>(input: &Tensor<F>, weight: &Tensor<F>, s: &ConvSpec) -> Tensor<F> {
        let (n, c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (h_out, w_out) = s.out_size(h, w).unwrap();
        let k = s.kernel_size;
        let mut out = Tensor::zeros(vec![n, s.out_channels, h_out, w_out]);
        for ni in 0..n {
            for co in 0..s.out_channels {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = F::zero();
                        for ci in 0..c_in {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * s.stride + ki) as isize - s.padding as isize;
                                    let iw = (ow * s.stride + kj) as isize - s.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let x = input.at4(ni, ci, ih as usize, iw as usize);
                                    let wv = weight.at4(co, ci, ki, kj);
                                    acc = acc + x * wv;
                                }
                            }
                        }
                        let off = out.offset4(ni, co, oh, ow);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let s = spec(1, 1, 3, 1, 1);
        let input = Tensor::<f32>::zeros(vec![1, 1, 3, 3]);
        let weight = Tensor::from_fn(s.weight_shape().to_vec(), |i| i as f32 + 1.0);
        let out = conv2d_forward(&input, &weight, &s).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_scales_input() {
        let s = spec(1, 1, 1, 1, 0);
        let input =
            Tensor::<f32>::new(vec![1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let weight = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let out = conv2d_forward(&input, &weight, &s).unwrap();
        let expected: Vec<f32> = input.data().iter().map(|&v| v * 2.0).collect();
        assert_eq!(out.data(), &expected[..]);
    }

    #[test]
    fn all_ones_kernel_center_is_total_sum() {
        // Hand sum of all nine entries = 45; the rest of the map is pinned
        // by the nested-loop oracle.
        let s = spec(1, 1, 3, 1, 1);
        let input =
            Tensor::<f32>::new(vec![1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let weight = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let out = conv2d_forward(&input, &weight, &s).unwrap();
        assert_eq!(out.at4(0, 0, 1, 1), 45.0);
        let reference = conv_reference(&input, &weight, &s);
        assert_eq!(out, reference);
    }

    #[test]
    fn output_shape_follows_spec() {
        let s = spec(2, 4, 3, 2, 1);
        let input = Tensor::<f32>::zeros(vec![1, 2, 7, 9]);
        let weight = Tensor::zeros(s.weight_shape().to_vec());
        let out = conv2d_forward(&input, &weight, &s).unwrap();
        // floor((7 + 2 − 3)/2) + 1 = 4, floor((9 + 2 − 3)/2) + 1 = 5
        assert_eq!(out.shape(), [1, 4, 4, 5]);
    }

    #[test]
    fn shape_mismatch_names_the_offender() {
        let s = spec(2, 1, 3, 1, 1);
        let input = Tensor::<f32>::zeros(vec![1, 3, 5, 5]);
        let weight = Tensor::zeros(s.weight_shape().to_vec());
        let err = conv2d_forward(&input, &weight, &s).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn backward_of_zero_grad_is_zero() {
        let s = spec(2, 3, 3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(vec![2, 2, 5, 5], &mut rng);
        let weight = random_tensor(s.weight_shape().to_vec(), &mut rng);
        let grad_out = Tensor::zeros(vec![2, 3, 5, 5]);
        let (gi, gw) = conv2d_backward(&grad_out, &input, &weight, &s).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_grad_weight_is_dot_product() {
        let s = spec(1, 1, 1, 1, 0);
        let input =
            Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let weight = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let grad_out = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        let (_, gw) = conv2d_backward(&grad_out, &input, &weight, &s).unwrap();
        // Σ grad ⊙ input = 1 − 2 + 6 + 2
        assert_eq!(gw.data()[0], 7.0);
    }

    /// Central finite differences of sum(seed ⊙ conv(x, w)) at f64.
    fn check_backward_fd(seed: u64, s: &ConvSpec, in_shape: Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random_tensor(in_shape.clone(), &mut rng);
        let weight = random_tensor(s.weight_shape().to_vec(), &mut rng);
        let out = conv2d_forward(&input, &weight, s).unwrap();
        let grad_seed = random_tensor(out.shape().to_vec(), &mut rng);
        let (gi, gw) = conv2d_backward(&grad_seed, &input, &weight, s).unwrap();

        let h = 1e-3;
        let loss = |input: &Tensor<f64>, weight: &Tensor<f64>| -> f64 {
            conv2d_forward(input, weight, s)
                .unwrap()
                .data()
                .iter()
                .zip(grad_seed.data())
                .map(|(&o, &g)| o * g)
                .sum()
        };
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (loss(&plus, &weight) - loss(&minus, &weight)) / (2.0 * h);
            let analytic = gi.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-3,
                "grad_input[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
        for idx in 0..weight.len() {
            let mut plus = weight.clone();
            plus.data_mut()[idx] += h;
            let mut minus = weight.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (loss(&input, &plus) - loss(&input, &minus)) / (2.0 * h);
            let analytic = gw.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-3,
                "grad_weight[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_backward_fd(7, &spec(2, 3, 3, 1, 1), vec![1, 2, 5, 5]);
        check_backward_fd(8, &spec(2, 2, 3, 2, 1), vec![2, 2, 5, 5]);
        check_backward_fd(9, &spec(3, 2, 1, 1, 0), vec![1, 3, 4, 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn forward_matches_nested_loop_oracle(
            n in 1usize..=2,
            c_in in 1usize..=3,
            c_out in 1usize..=3,
            h in 3usize..=7,
            w in 3usize..=7,
            k in prop::sample::select(vec![1usize, 3]),
            stride in 1usize..=2,
            pad in 0usize..=1,
            seed in 0u64..1000,
        ) {
            prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            let s = spec(c_in, c_out, k, stride, pad);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input: Tensor<f32> =
                Tensor::from_fn(vec![n, c_in, h, w], |_| rng.gen::<f32>() * 2.0 - 1.0);
            let weight: Tensor<f32> =
                Tensor::from_fn(s.weight_shape().to_vec(), |_| rng.gen::<f32>() * 2.0 - 1.0);
            let ours = conv2d_forward(&input, &weight, &s).unwrap();
            let reference = conv_reference(&input, &weight, &s);
            prop_assert_eq!(ours, reference);
        }
    }
}
