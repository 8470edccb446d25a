//! Global average pooling over the spatial dimensions.

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

/// NCHW → N×C, mean over H·W.
pub fn global_avg_pool<F: Scalar>(input: &Tensor<F>) -> Result<Tensor<F>> {
    if input.rank() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected NCHW, got rank {}", input.rank()),
        ));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hw = h * w;
    let inv = sc::<F>(1.0 / hw as f64);
    let mut out = Tensor::zeros(vec![n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut acc = F::zero();
            for &x in &input.data()[base..base + hw] {
                acc = acc + x;
            }
            out.data_mut()[ni * c + ci] = acc * inv;
        }
    }
    Ok(out)
}

/// Spread an N×C gradient uniformly back over H×W.
pub fn global_avg_pool_backward<F: Scalar>(
    grad_output: &Tensor<F>,
    h: usize,
    w: usize,
) -> Result<Tensor<F>> {
    if grad_output.rank() != 2 {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("expected N×C, got rank {}", grad_output.rank()),
        ));
    }
    let (n, c) = (grad_output.dim(0), grad_output.dim(1));
    let hw = h * w;
    let inv = sc::<F>(1.0 / hw as f64);
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_output.data()[ni * c + ci] * inv;
            let base = (ni * c + ci) * hw;
            out.data_mut()[base..base + hw].fill(g);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_its_value() {
        let input = Tensor::<f32>::full(vec![2, 3, 6, 6], 2.5);
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.shape(), [2, 3]);
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn backward_spreads_uniformly() {
        let grad = Tensor::<f32>::new(vec![1, 2], vec![4.0, -8.0]).unwrap();
        let out = global_avg_pool_backward(&grad, 2, 2).unwrap();
        assert_eq!(out.shape(), [1, 2, 2, 2]);
        assert!(out.data()[..4].iter().all(|&v| v == 1.0));
        assert!(out.data()[4..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn pooling_is_pure() {
        let input = Tensor::<f32>::from_fn(vec![1, 2, 3, 3], |i| (i as f32).sin());
        assert_eq!(
            global_avg_pool(&input).unwrap(),
            global_avg_pool(&input).unwrap()
        );
    }
}
