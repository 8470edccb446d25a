//! Batch normalization over NCHW activations, per-channel statistics.
//!
//! Training mode normalizes with biased batch statistics and (optionally)
//! folds them into the running estimates; eval mode depends only on the
//! running estimates. Running variance stores the biased batch variance.

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormState<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: F,
    pub epsilon: F,
}

impl<F: Scalar> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(vec![channels], F::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], F::one()),
            momentum: sc(BN_MOMENTUM),
            epsilon: sc(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a training-mode forward call.
#[derive(Debug)]
pub struct BnCache<F> {
    training: bool,
    gamma: Tensor<F>,
    inv_std: Vec<F>,
    mean: Vec<F>,
    input: Tensor<F>,
}

fn check_channels<F: Scalar>(input: &Tensor<F>, channels: usize) -> Result<()> {
    if input.rank() != 4 {
        return Err(Error::shape(
            "batchnorm",
            format!("input must be NCHW, got rank {}", input.rank()),
        ));
    }
    if input.dim(1) != channels {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {} channels, state has {channels}", input.dim(1)),
        ));
    }
    Ok(())
}

/// Eval-mode normalization with running statistics; pure in the state.
pub fn batchnorm_infer<F: Scalar>(input: &Tensor<F>, state: &BatchNormState<F>) -> Result<Tensor<F>> {
    check_channels(input, state.channels())?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hw = h * w;
    let mut out = Tensor::zeros_like(input);
    for ci in 0..c {
        let inv_std = (state.running_var.data()[ci] + state.epsilon).sqrt().recip();
        let scale = state.gamma.data()[ci] * inv_std;
        let shift = state.beta.data()[ci] - scale * state.running_mean.data()[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            let src = &input.data()[base..base + hw];
            let dst = &mut out.data_mut()[base..base + hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = scale * s + shift;
            }
        }
    }
    Ok(out)
}

/// Forward pass. In training mode the batch statistics normalize the batch
/// and, when `update_running` is set, move the running estimates by the
/// exponential moving average. Eval mode delegates to [`batchnorm_infer`].
pub fn batchnorm_forward<F: Scalar>(
    input: &Tensor<F>,
    state: &mut BatchNormState<F>,
    training: bool,
    update_running: bool,
) -> Result<(Tensor<F>, BnCache<F>)> {
    if !training {
        let out = batchnorm_infer(input, state)?;
        return Ok((
            out,
            BnCache {
                training: false,
                gamma: state.gamma.clone(),
                inv_std: Vec::new(),
                mean: Vec::new(),
                input: Tensor::zeros(vec![1]),
            },
        ));
    }
    check_channels(input, state.channels())?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let hw = h * w;
    let m = (n * hw) as f64;

    let mut mean = vec![F::zero(); c];
    let mut inv_std = vec![F::zero(); c];
    let mut out = Tensor::zeros_like(input);
    for ci in 0..c {
        // 64-bit accumulation keeps channel statistics stable at f32.
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for &x in &input.data()[base..base + hw] {
                let xf = x.to_f64();
                sum += xf;
                sum_sq += xf * xf;
            }
        }
        let mu = sum / m;
        let var = (sum_sq / m - mu * mu).max(0.0);
        mean[ci] = sc(mu);
        let istd = sc::<F>(var) + state.epsilon;
        let istd = istd.sqrt().recip();
        inv_std[ci] = istd;

        let scale = state.gamma.data()[ci] * istd;
        let shift = state.beta.data()[ci] - scale * mean[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            let src = &input.data()[base..base + hw];
            let dst = &mut out.data_mut()[base..base + hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = scale * s + shift;
            }
        }

        if update_running {
            let mom = state.momentum;
            let keep = F::one() - mom;
            state.running_mean.data_mut()[ci] = keep * state.running_mean.data()[ci] + mom * mean[ci];
            state.running_var.data_mut()[ci] = keep * state.running_var.data()[ci] + mom * sc(var);
        }
    }

    Ok((
        out,
        BnCache {
            training: true,
            gamma: state.gamma.clone(),
            inv_std,
            mean,
            input: input.clone(),
        },
    ))
}

/// Exact gradients of the batch-statistics normalization.
pub fn batchnorm_backward<F: Scalar>(
    grad_output: &Tensor<F>,
    cache: &BnCache<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if !cache.training {
        return Err(Error::EvalModeCache);
    }
    let input = &cache.input;
    if grad_output.shape() != input.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("grad {:?} vs input {:?}", grad_output.shape(), input.shape()),
        ));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let hw = h * w;
    let m = sc::<F>((n * hw) as f64);

    let mut grad_input = Tensor::zeros_like(input);
    let mut grad_gamma = Tensor::zeros(vec![c]);
    let mut grad_beta = Tensor::zeros(vec![c]);

    for ci in 0..c {
        let mu = cache.mean[ci];
        let istd = cache.inv_std[ci];

        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            let dy = &grad_output.data()[base..base + hw];
            let x = &input.data()[base..base + hw];
            for (&d, &xv) in dy.iter().zip(x) {
                let xhat = ((xv - mu) * istd).to_f64();
                sum_dy += d.to_f64();
                sum_dy_xhat += d.to_f64() * xhat;
            }
        }
        grad_beta.data_mut()[ci] = sc(sum_dy);
        grad_gamma.data_mut()[ci] = sc(sum_dy_xhat);

        let mean_dy = sc::<F>(sum_dy) / m;
        let mean_dy_xhat = sc::<F>(sum_dy_xhat) / m;
        let scale = cache.gamma.data()[ci] * istd;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            let dy = &grad_output.data()[base..base + hw];
            let x = &input.data()[base..base + hw];
            let gi = &mut grad_input.data_mut()[base..base + hw];
            for ((g, &d), &xv) in gi.iter_mut().zip(dy).zip(x) {
                let xhat = (xv - mu) * istd;
                *g = scale * (d - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }

    Ok((grad_input, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalized_input_passes_through() {
        // Per-channel mean 0, variance 1 already; γ=1, β=0.
        let input = Tensor::<f32>::new(
            vec![2, 1, 2, 2],
            vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0],
        )
        .unwrap();
        let mut state = BatchNormState::new(1);
        let (out, _) = batchnorm_forward(&input, &mut state, true, false).unwrap();
        // ε = 1e-5 shrinks unit-variance data by ≈ ε/2.
        for (o, i) in out.data().iter().zip(input.data()) {
            assert!((o - i).abs() < 1e-5, "{o} vs {i}");
        }
    }

    #[test]
    fn zero_gamma_returns_beta() {
        let mut state = BatchNormState::<f32>::new(2);
        state.gamma = Tensor::zeros(vec![2]);
        state.beta = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::from_fn(vec![3, 2, 2, 2], |_| rng.gen::<f32>());
        let (out, _) = batchnorm_forward(&input, &mut state, true, false).unwrap();
        for ni in 0..3 {
            for ci in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        assert_eq!(out.at4(ni, ci, h, w), state.beta.data()[ci]);
                    }
                }
            }
        }
    }

    #[test]
    fn eval_mode_hand_value() {
        // 2·(7−5)/√4 + 1 = 3 with ε = 0.
        let mut state = BatchNormState::<f32>::new(1);
        state.gamma = Tensor::full(vec![1], 2.0);
        state.beta = Tensor::full(vec![1], 1.0);
        state.running_mean = Tensor::full(vec![1], 5.0);
        state.running_var = Tensor::full(vec![1], 4.0);
        state.epsilon = 0.0;
        let input = Tensor::full(vec![1, 1, 1, 1], 7.0);
        let out = batchnorm_infer(&input, &state).unwrap();
        assert_eq!(out.data()[0], 3.0);
    }

    #[test]
    fn eval_mode_ignores_batch_composition() {
        let mut state = BatchNormState::<f32>::new(1);
        state.running_mean = Tensor::full(vec![1], 0.25);
        state.running_var = Tensor::full(vec![1], 2.0);
        let single = Tensor::new(vec![1, 1, 1, 2], vec![0.3, -0.7]).unwrap();
        let padded = Tensor::new(vec![2, 1, 1, 2], vec![0.3, -0.7, 99.0, -99.0]).unwrap();
        let a = batchnorm_infer(&single, &state).unwrap();
        let b = batchnorm_infer(&padded, &state).unwrap();
        assert_eq!(a.data()[0], b.data()[0]);
        assert_eq!(a.data()[1], b.data()[1]);
    }

    #[test]
    fn training_batch_of_one_is_rejected() {
        let mut state = BatchNormState::<f32>::new(1);
        let input = Tensor::zeros(vec![1, 1, 4, 4]);
        match batchnorm_forward(&input, &mut state, true, false) {
            Err(Error::DegenerateBatch(1)) => {}
            other => panic!("expected DegenerateBatch, got {other:?}"),
        }
    }

    #[test]
    fn eval_cache_rejected_by_backward() {
        let mut state = BatchNormState::<f32>::new(1);
        let input = Tensor::zeros(vec![2, 1, 2, 2]);
        let (_, cache) = batchnorm_forward(&input, &mut state, false, false).unwrap();
        let grad = Tensor::zeros(vec![2, 1, 2, 2]);
        match batchnorm_backward(&grad, &cache) {
            Err(Error::EvalModeCache) => {}
            other => panic!("expected EvalModeCache, got {other:?}"),
        }
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let mut state = BatchNormState::<f32>::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Tensor::from_fn(vec![3, 2, 2, 2], |_| rng.gen::<f32>());
        let (_, cache) = batchnorm_forward(&input, &mut state, true, false).unwrap();
        let grad = Tensor::zeros(vec![3, 2, 2, 2]);
        let (gi, gg, gb) = batchnorm_backward(&grad, &cache).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gg.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_beta_is_channel_sum_of_grad_output() {
        let mut state = BatchNormState::<f64>::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_fn(vec![2, 2, 2, 2], |_| rng.gen::<f64>());
        let grad = Tensor::from_fn(vec![2, 2, 2, 2], |_| rng.gen::<f64>() - 0.5);
        let (_, cache) = batchnorm_forward(&input, &mut state, true, false).unwrap();
        let (_, _, gb) = batchnorm_backward(&grad, &cache).unwrap();
        for ci in 0..2 {
            let mut expect = 0.0f64;
            for ni in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        expect += grad.at4(ni, ci, h, w);
                    }
                }
            }
            assert!((gb.data()[ci] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_update_only_when_asked() {
        let mut state = BatchNormState::<f32>::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = Tensor::from_fn(vec![4, 1, 2, 2], |_| rng.gen::<f32>() + 2.0);
        let before = (state.running_mean.clone(), state.running_var.clone());
        batchnorm_forward(&input, &mut state, true, false).unwrap();
        assert_eq!(state.running_mean, before.0);
        assert_eq!(state.running_var, before.1);
        batchnorm_forward(&input, &mut state, true, true).unwrap();
        assert_ne!(state.running_mean, before.0);
        assert!(state.running_var.data()[0] >= 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = vec![2, 3, 3, 3];
        let input: Tensor<f64> = Tensor::from_fn(shape.clone(), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let gamma: Tensor<f64> = Tensor::from_fn(vec![3], |_| rng.gen::<f64>() + 0.5);
        let beta: Tensor<f64> = Tensor::from_fn(vec![3], |_| rng.gen::<f64>() - 0.5);
        let seed: Tensor<f64> = Tensor::from_fn(shape.clone(), |_| rng.gen::<f64>() * 2.0 - 1.0);

        let loss = |input: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| -> f64 {
            let mut state = BatchNormState::new(3);
            state.gamma = gamma.clone();
            state.beta = beta.clone();
            let (out, _) = batchnorm_forward(input, &mut state, true, false).unwrap();
            out.data().iter().zip(seed.data()).map(|(&o, &s)| o * s).sum()
        };

        let mut state = BatchNormState::new(3);
        state.gamma = gamma.clone();
        state.beta = beta.clone();
        let (_, cache) = batchnorm_forward(&input, &mut state, true, false).unwrap();
        let (gi, gg, gb) = batchnorm_backward(&seed, &cache).unwrap();

        let h = 1e-3;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (loss(&plus, &gamma, &beta) - loss(&minus, &gamma, &beta)) / (2.0 * h);
            assert!(rel(gi.data()[idx], numeric) <= 1e-3, "input idx {idx}");
        }
        for idx in 0..3 {
            let mut plus = gamma.clone();
            plus.data_mut()[idx] += h;
            let mut minus = gamma.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (loss(&input, &plus, &beta) - loss(&input, &minus, &beta)) / (2.0 * h);
            assert!(rel(gg.data()[idx], numeric) <= 1e-3, "gamma idx {idx}");

            let mut plus = beta.clone();
            plus.data_mut()[idx] += h;
            let mut minus = beta.clone();
            minus.data_mut()[idx] -= h;
            let numeric = (loss(&input, &gamma, &plus) - loss(&input, &gamma, &minus)) / (2.0 * h);
            assert!(rel(gb.data()[idx], numeric) <= 1e-3, "beta idx {idx}");
        }
    }
}
