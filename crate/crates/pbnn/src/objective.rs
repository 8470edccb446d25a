//! The hybrid objective: cross-entropy for the certain parameters and the
//! Monte-Carlo variational free energy for the uncertain ones, plus the
//! Monte-Carlo predictive distribution and its entropy diagnostic.

use crate::error::{Error, Result};
use crate::model::{Model, WeightMode};
use crate::nn::softmax;
use crate::tensor::{sc, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// Floor applied inside the log so one bad probability cannot produce Inf.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-step loss decomposition. `total = l_cen + l_unc` and
/// `l_unc = kl_weight·kl_term + nll_term` hold bitwise by construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_cen: f64,
    pub l_unc: f64,
    pub kl_term: f64,
    pub nll_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_cen: f64, kl_term: f64, nll_term: f64, kl_weight: f64) -> Self {
        let l_unc = kl_weight * kl_term + nll_term;
        LossBreakdown {
            l_cen,
            l_unc,
            kl_term,
            nll_term,
            total: l_cen + l_unc,
        }
    }

    pub fn certain_only(l_cen: f64) -> Self {
        LossBreakdown::new(l_cen, 0.0, 0.0, 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.l_cen.is_finite() && self.l_unc.is_finite() && self.total.is_finite()
    }
}

/// Mean over the batch of −log p[i, label_i], log clamped at [`PROB_FLOOR`].
pub fn cross_entropy<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Result<F> {
    if probs.rank() != 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("expected N×C probabilities, got rank {}", probs.rank()),
        ));
    }
    let (n, c) = (probs.dim(0), probs.dim(1));
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    let mut acc = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {c} classes (batch index {i})"
            )));
        }
        let p = probs.data()[i * c + label].to_f64().max(PROB_FLOOR);
        acc -= p.ln();
    }
    Ok(sc(acc / n as f64))
}

/// Gradient of [`cross_entropy`] w.r.t. the logits: (probs − one_hot)/N.
pub fn cross_entropy_backward<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let (n, c) = (probs.dim(0), probs.dim(1));
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy_backward",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    let inv_n = sc::<F>(1.0 / n as f64);
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        grad.data_mut()[i * c + label] = grad.data()[i * c + label] - F::one();
    }
    grad.scale(inv_n);
    Ok(grad)
}

/// L_unc = kl_weight·kl + nll.
pub fn uncertain_loss<F: Scalar>(kl: F, nll: F, kl_weight: F) -> F {
    kl_weight * kl + nll
}

/// Monte-Carlo predictive distribution: mean softmax over `n_samples`
/// independent draws of the uncertain weights. BN runs in eval mode.
pub fn predictive_distribution<F: Scalar>(
    model: &Model<F>,
    input: &Tensor<F>,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let n = input.dim(0);
    let classes = model.arch().num_classes;
    // f64 accumulation; for a deterministic model the average is then exact.
    let mut acc = vec![0.0f64; n * classes];
    for _ in 0..n_samples {
        let logits = model.forward(input, WeightMode::Sampled, Some(rng))?;
        let probs = softmax(&logits)?;
        for (a, &p) in acc.iter_mut().zip(probs.data()) {
            *a += p.to_f64();
        }
    }
    let inv = 1.0 / n_samples as f64;
    Tensor::new(
        vec![n, classes],
        acc.into_iter().map(|a| sc(a * inv)).collect(),
    )
}

/// −Σ p log p in nats, with 0·log 0 = 0.
pub fn predictive_entropy<F: Scalar>(probs: &[F]) -> F {
    let mut acc = 0.0f64;
    for &p in probs {
        let p = p.to_f64();
        if p > 0.0 {
            acc -= p * p.ln();
        }
    }
    sc(acc)
}
