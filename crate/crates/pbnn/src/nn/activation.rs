//! ReLU and row-wise softmax.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    input.map(|x| if x > F::zero() { x } else { F::zero() })
}

/// Gradient masked where the forward input was ≤ 0 (subgradient 0 at 0).
pub fn relu_backward<F: Scalar>(grad_output: &Tensor<F>, input: &Tensor<F>) -> Result<Tensor<F>> {
    grad_output.zip_map(input, "relu_backward", |g, x| {
        if x > F::zero() {
            g
        } else {
            F::zero()
        }
    })
}

/// Row-wise softmax over an N×C logit matrix, max-subtracted for stability.
pub fn softmax<F: Scalar>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            "softmax",
            format!("expected N×C logits, got rank {}", logits.rank()),
        ));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    let mut out = Tensor::zeros_like(logits);
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().fold(F::neg_infinity(), |m, &x| if x > m { x } else { m });
        let dst = &mut out.data_mut()[i * c..(i + 1) * c];
        let mut sum = F::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            let e = (x - max).exp();
            *d = e;
            sum = sum + e;
        }
        let inv = sum.recip();
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_masks_at_zero() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let up = Tensor::full(vec![3], 5.0f32);
        assert_eq!(relu_backward(&up, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let logits = Tensor::<f32>::zeros(vec![1, 7]);
        let probs = softmax(&logits).unwrap();
        for &p in probs.data() {
            assert!((p - 1.0 / 7.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_is_overflow_safe() {
        let logits = Tensor::<f32>::new(vec![1, 3], vec![1000.0, 0.0, -1000.0]).unwrap();
        let probs = softmax(&logits).unwrap();
        assert!(probs.all_finite());
        assert!((probs.data()[0] - 1.0).abs() < 1e-6);
        assert!(probs.data()[1] < 1e-6);
    }

    #[test]
    fn relu_and_softmax_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f32> = Tensor::from_fn(vec![4, 5], |_| rng.gen::<f32>() * 8.0 - 4.0);
        assert_eq!(relu(&x), relu(&x));
        assert_eq!(softmax(&x).unwrap(), softmax(&x).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..500, n in 1usize..4, c in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Tensor<f32> =
                Tensor::from_fn(vec![n, c], |_| rng.gen::<f32>() * 20.0 - 10.0);
            let probs = softmax(&logits).unwrap();
            for row in probs.data().chunks_exact(c) {
                let sum: f32 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn relu_identity_against_abs(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Tensor<f32> = Tensor::from_fn(vec![17], |_| rng.gen::<f32>() * 4.0 - 2.0);
            let neg = x.map(|v| -v);
            let sum = relu(&x).zip_map(&relu(&neg), "t", |a, b| a + b).unwrap();
            prop_assert_eq!(sum, x.map(|v| v.abs()));
        }
    }
}
