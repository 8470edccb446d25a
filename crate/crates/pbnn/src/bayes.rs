//! Variational weight machinery: the (μ, ρ) parameterization with
//! σ = softplus(ρ), reparameterized sampling w = μ + σ∘ε, Gaussian
//! log-densities, and both the single-sample and closed-form KL terms.

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

/// Overflow-safe softplus: log(1 + exp(x)).
pub fn softplus<F: Scalar>(x: F) -> F {
    let zero = F::zero();
    let m = if x > zero { x } else { zero };
    m + (-x.abs()).exp().ln_1p()
}

/// dσ/dρ for σ = softplus(ρ).
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Elementwise softplus of a ρ tensor.
pub fn softplus_tensor<F: Scalar>(rho: &Tensor<F>) -> Tensor<F> {
    rho.map(softplus)
}

/// One layer's uncertain parameters θ = (μ, ρ) plus the most recent sample.
#[derive(Debug, Clone)]
pub struct VariationalParams<F> {
    mu: Tensor<F>,
    rho: Tensor<F>,
    last_epsilon: Tensor<F>,
    last_weight: Tensor<F>,
}

impl<F: Scalar> VariationalParams<F> {
    pub fn new(mu: Tensor<F>, rho: Tensor<F>) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::shape(
                "VariationalParams::new",
                format!("mu {:?} vs rho {:?}", mu.shape(), rho.shape()),
            ));
        }
        let last_weight = mu.clone();
        let last_epsilon = Tensor::zeros_like(&mu);
        Ok(VariationalParams {
            mu,
            rho,
            last_epsilon,
            last_weight,
        })
    }

    pub fn mu(&self) -> &Tensor<F> {
        &self.mu
    }

    pub fn rho(&self) -> &Tensor<F> {
        &self.rho
    }

    pub fn last_epsilon(&self) -> &Tensor<F> {
        &self.last_epsilon
    }

    pub fn last_weight(&self) -> &Tensor<F> {
        &self.last_weight
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor<F> {
        softplus_tensor(&self.rho)
    }

    pub(crate) fn mu_mut(&mut self) -> &mut Tensor<F> {
        &mut self.mu
    }

    pub(crate) fn rho_mut(&mut self) -> &mut Tensor<F> {
        &mut self.rho
    }

    pub(crate) fn last_epsilon_mut(&mut self) -> &mut Tensor<F> {
        &mut self.last_epsilon
    }

    pub(crate) fn last_weight_mut(&mut self) -> &mut Tensor<F> {
        &mut self.last_weight
    }

    /// w = μ + softplus(ρ) ∘ ε for a caller-supplied noise tensor.
    pub fn weight_from_noise(&self, eps: &Tensor<F>) -> Result<Tensor<F>> {
        if eps.shape() != self.mu.shape() {
            return Err(Error::shape(
                "weight_from_noise",
                format!("eps {:?} vs mu {:?}", eps.shape(), self.mu.shape()),
            ));
        }
        let mut w = self.mu.clone();
        for ((wv, &r), &e) in w.data_mut().iter_mut().zip(self.rho.data()).zip(eps.data()) {
            *wv = *wv + softplus(r) * e;
        }
        Ok(w)
    }

    /// Sample with caller-forced noise and record it.
    pub fn sample_with_noise(&mut self, eps: Tensor<F>) -> Result<Tensor<F>> {
        let w = self.weight_from_noise(&eps)?;
        self.last_epsilon = eps;
        self.last_weight = w.clone();
        Ok(w)
    }

    /// True when `last_weight` still equals μ + softplus(ρ) ∘ last_epsilon
    /// bit for bit, i.e. (μ, ρ) have not moved since the sample was drawn.
    pub fn sample_is_fresh(&self) -> bool {
        match self.weight_from_noise(&self.last_epsilon) {
            Ok(w) => w == self.last_weight,
            Err(_) => false,
        }
    }
}

/// Draw ε ~ N(0, I) with the given generator. Noise is always drawn at f64
/// and converted, so f32 and f64 models consume identical streams.
pub fn draw_standard_normal<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| {
        sc(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Reparameterized sample w₂ = μ + softplus(ρ) ∘ ε; stores ε and w₂.
pub fn sample_weights<F: Scalar>(
    params: &mut VariationalParams<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let eps = draw_standard_normal(params.shape(), rng);
    params.sample_with_noise(eps)
}

/// Ephemeral sample for prediction paths; does not touch the stored state.
pub fn sample_weights_detached<F: Scalar>(
    params: &VariationalParams<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let eps = draw_standard_normal(params.shape(), rng);
    params.weight_from_noise(&eps)
}

/// Gaussian prior over weights, N(0, sigma_p²) per element.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriorSpec {
    sigma_p: f64,
}

impl PriorSpec {
    pub fn unit_gaussian() -> Self {
        PriorSpec { sigma_p: 1.0 }
    }

    pub fn scaled_gaussian(sigma_p: f64) -> Result<Self> {
        if !(sigma_p > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "prior sigma_p must be positive, got {sigma_p}"
            )));
        }
        Ok(PriorSpec { sigma_p })
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::unit_gaussian()
    }
}

/// Σ over elements of log N(w; μ, softplus(ρ)²), accumulated at 64 bits.
pub fn log_q<F: Scalar>(params: &VariationalParams<F>, w: &Tensor<F>) -> Result<F> {
    if w.shape() != params.shape() {
        return Err(Error::shape(
            "log_q",
            format!("w {:?} vs params {:?}", w.shape(), params.shape()),
        ));
    }
    let mut acc = 0.0f64;
    for ((&wv, &mu), &rho) in w.data().iter().zip(params.mu.data()).zip(params.rho.data()) {
        let sigma = softplus(rho).to_f64();
        let z = (wv - mu).to_f64() / sigma;
        acc += -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z;
    }
    Ok(sc(acc))
}

/// Σ over elements of log N(w; 0, sigma_p²).
pub fn log_prior<F: Scalar>(prior: &PriorSpec, w: &Tensor<F>) -> F {
    let sp = prior.sigma_p;
    let mut acc = 0.0f64;
    for &wv in w.data() {
        let z = wv.to_f64() / sp;
        acc += -0.5 * LN_2PI - sp.ln() - 0.5 * z * z;
    }
    sc(acc)
}

/// Single-sample Monte-Carlo KL estimate: log q(w|θ) − log P(w).
/// Averaging over N samples is the trainer's job.
pub fn kl_mc<F: Scalar>(
    params: &VariationalParams<F>,
    prior: &PriorSpec,
    w_sampled: &Tensor<F>,
) -> Result<F> {
    Ok(log_q(params, w_sampled)? - log_prior(prior, w_sampled))
}

/// Exact KL between the diagonal Gaussian q and the Gaussian prior:
/// Σ [ln(σ_p/σ) + (σ² + μ²)/(2σ_p²) − ½].
pub fn kl_closed_form<F: Scalar>(params: &VariationalParams<F>, prior: &PriorSpec) -> F {
    let sp = prior.sigma_p;
    let mut acc = 0.0f64;
    for (&mu, &rho) in params.mu.data().iter().zip(params.rho.data()) {
        let sigma = softplus(rho).to_f64();
        let mu = mu.to_f64();
        acc += (sp / sigma).ln() + (sigma * sigma + mu * mu) / (2.0 * sp * sp) - 0.5;
    }
    sc(acc)
}

/// Direct partials of log q(w|θ) in θ at fixed w = last_weight:
/// ∂/∂μ = (w−μ)/σ², ∂/∂ρ = (−1/σ + (w−μ)²/σ³)·sigmoid(ρ).
pub fn log_q_direct_partials<F: Scalar>(params: &VariationalParams<F>) -> (Tensor<F>, Tensor<F>) {
    let n = params.len();
    let mut dmu = Tensor::zeros(params.shape().to_vec());
    let mut drho = Tensor::zeros(params.shape().to_vec());
    for i in 0..n {
        let mu = params.mu.data()[i];
        let rho = params.rho.data()[i];
        let w = params.last_weight.data()[i];
        let sigma = softplus(rho);
        let diff = w - mu;
        dmu.data_mut()[i] = diff / (sigma * sigma);
        drho.data_mut()[i] =
            (-sigma.recip() + diff * diff / (sigma * sigma * sigma)) * sigmoid(rho);
    }
    (dmu, drho)
}

/// ∂(log q(w|θ) − log P(w))/∂w at w = last_weight: −(w−μ)/σ² + w/σ_p².
pub fn kl_grad_w<F: Scalar>(params: &VariationalParams<F>, prior: &PriorSpec) -> Tensor<F> {
    let sp2 = sc::<F>(prior.sigma_p * prior.sigma_p);
    let n = params.len();
    let mut g = Tensor::zeros(params.shape().to_vec());
    for i in 0..n {
        let mu = params.mu.data()[i];
        let sigma = softplus(params.rho.data()[i]);
        let w = params.last_weight.data()[i];
        g.data_mut()[i] = -(w - mu) / (sigma * sigma) + w / sp2;
    }
    g
}
