//! Fully connected layer: `out = input · weight + bias`.

use crate::error::{Error, Result};
use crate::nn::matmul::{matmul, matmul_nt, matmul_tn};
use crate::tensor::{Scalar, Tensor};

fn check_dims<F: Scalar>(input: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 {
        return Err(Error::shape(
            "affine",
            format!(
                "expected input N×D, weight D×C, bias C; got ranks {}/{}/{}",
                input.rank(),
                weight.rank(),
                bias.rank()
            ),
        ));
    }
    let (n, d) = (input.dim(0), input.dim(1));
    let (dw, c) = (weight.dim(0), weight.dim(1));
    if d != dw {
        return Err(Error::shape(
            "affine",
            format!("input inner dim {d} vs weight rows {dw}"),
        ));
    }
    if bias.dim(0) != c {
        return Err(Error::shape(
            "affine",
            format!("bias length {} vs weight cols {c}", bias.dim(0)),
        ));
    }
    Ok((n, d, c))
}

pub fn affine_forward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n, d, c) = check_dims(input, weight, bias)?;
    let mut out = Tensor::zeros(vec![n, c]);
    matmul(input.data(), weight.data(), n, d, c, out.data_mut());
    for row in out.data_mut().chunks_exact_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Ok(out)
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn affine_backward<F: Scalar>(
    grad_output: &Tensor<F>,
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (n, d, c) = check_dims(input, weight, bias)?;
    if grad_output.shape() != [n, c] {
        return Err(Error::shape(
            "affine_backward",
            format!("grad_output shape {:?}, expected [{n}, {c}]", grad_output.shape()),
        ));
    }
    let mut grad_input = Tensor::zeros(vec![n, d]);
    matmul_nt(grad_output.data(), weight.data(), n, c, d, grad_input.data_mut());

    let mut grad_weight = Tensor::zeros(vec![d, c]);
    matmul_tn(input.data(), grad_output.data(), n, d, c, grad_weight.data_mut());

    let mut grad_bias = Tensor::zeros(vec![c]);
    for row in grad_output.data().chunks_exact(c) {
        for (g, &v) in grad_bias.data_mut().iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_zero_bias_is_identity() {
        let input = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let weight = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let bias = Tensor::zeros(vec![3]);
        let out = affine_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_weight_returns_bias_rows() {
        let input = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let weight = Tensor::zeros(vec![3, 4]);
        let bias = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = affine_forward(&input, &weight, &bias).unwrap();
        for row in out.data().chunks_exact(4) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let input = Tensor::<f32>::zeros(vec![2, 3]);
        let weight = Tensor::zeros(vec![4, 5]);
        let bias = Tensor::zeros(vec![5]);
        let err = affine_forward(&input, &weight, &bias).unwrap_err();
        assert!(err.to_string().contains("inner dim 3 vs weight rows 4"));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input: Tensor<f64> = Tensor::from_fn(vec![4, 6], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let weight: Tensor<f64> = Tensor::from_fn(vec![6, 7], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let bias: Tensor<f64> = Tensor::from_fn(vec![7], |_| rng.gen::<f64>() - 0.5);
        let seed: Tensor<f64> = Tensor::from_fn(vec![4, 7], |_| rng.gen::<f64>() * 2.0 - 1.0);

        let loss = |i: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            affine_forward(i, w, b)
                .unwrap()
                .data()
                .iter()
                .zip(seed.data())
                .map(|(&o, &s)| o * s)
                .sum()
        };
        let (gi, gw, gb) = affine_backward(&seed, &input, &weight, &bias).unwrap();

        let h = 1e-3;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for idx in 0..input.len() {
            let mut p = input.clone();
            p.data_mut()[idx] += h;
            let mut m = input.clone();
            m.data_mut()[idx] -= h;
            let numeric = (loss(&p, &weight, &bias) - loss(&m, &weight, &bias)) / (2.0 * h);
            assert!(rel(gi.data()[idx], numeric) <= 1e-3);
        }
        for idx in 0..weight.len() {
            let mut p = weight.clone();
            p.data_mut()[idx] += h;
            let mut m = weight.clone();
            m.data_mut()[idx] -= h;
            let numeric = (loss(&input, &p, &bias) - loss(&input, &m, &bias)) / (2.0 * h);
            assert!(rel(gw.data()[idx], numeric) <= 1e-3);
        }
        for idx in 0..bias.len() {
            let mut p = bias.clone();
            p.data_mut()[idx] += h;
            let mut m = bias.clone();
            m.data_mut()[idx] -= h;
            let numeric = (loss(&input, &weight, &p) - loss(&input, &weight, &m)) / (2.0 * h);
            assert!(rel(gb.data()[idx], numeric) <= 1e-3);
        }
    }
}
