//! The alternating update scheme. Each minibatch runs two phases:
//!
//! 1. uncertain phase — sample w₂ per variational layer, compute the
//!    Monte-Carlo free-energy loss, and apply the analytic (Δμ, Δρ)
//!    gradients with SGD; the certain parameters are untouched;
//! 2. certain phase — fix w₂ = μ, compute cross-entropy, and update every
//!    deterministic parameter (conv weights, BN γ/β, FC head) by
//!    backpropagation; θ is untouched.

mod gradcheck;

pub use gradcheck::{gradcheck_model, CheckScope, GradcheckConfig, GradcheckReport, GroupReport};

use std::collections::BTreeMap;
use std::time::Instant;

use crate::bayes::{kl_grad_w, kl_mc, log_q_direct_partials, sigmoid, PriorSpec};
use crate::data::{batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{BackwardScope, Model, WeightMode};
use crate::nn::softmax;
use crate::objective::{cross_entropy, cross_entropy_backward, LossBreakdown};
use crate::report::{count_correct, evaluate, sigma_stats, EvalMode, TrainRecord};
use crate::tensor::{Scalar, Tensor};
use crate::seeded_rng;
use rand_chacha::ChaCha8Rng;

/// How the KL term is weighted inside L_unc.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum KlWeight {
    /// 1 / batches-per-epoch, so the per-epoch KL sum equals one full KL.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// η of the SGD update (the algorithm listing also calls it α).
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    /// Monte-Carlo sample count N for the uncertain phase.
    pub mc_samples: u32,
    pub kl_weight: KlWeight,
    pub seed: u64,
    /// Verification-set evaluation cadence, in epochs.
    pub eval_every: u32,
    /// 0 disables momentum, keeping the update rule plain SGD.
    pub momentum: f64,
    /// Scale of the Gaussian prior over uncertain weights.
    pub prior_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            mc_samples: 1,
            kl_weight: KlWeight::Auto,
            seed: 42,
            eval_every: 1,
            momentum: 0.0,
            prior_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be at least 2 (batch normalization), got {}",
                self.batch_size
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidConfig("mc_samples must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        if let KlWeight::Fixed(w) = self.kl_weight {
            if !(w > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "kl_weight must be positive, got {w}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "prior_sigma must be positive, got {}",
                self.prior_sigma
            )));
        }
        Ok(())
    }

    pub fn resolve_kl_weight(&self, batches_per_epoch: usize) -> f64 {
        match self.kl_weight {
            KlWeight::Auto => 1.0 / batches_per_epoch.max(1) as f64,
            KlWeight::Fixed(w) => w,
        }
    }
}

/// Per-epoch shuffle seed, derived from the run seed.
pub fn shuffle_seed_for(seed: u64, epoch: u32) -> u64 {
    seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Δμ and Δρ for one variational layer.
#[derive(Debug, Clone)]
pub struct GradPair<F> {
    pub delta_mu: Tensor<F>,
    pub delta_rho: Tensor<F>,
}

/// Combine the w₂-gradient of the loss with the direct partials of log q:
/// Δμ = dL/dw₂ + ∂L/∂μ and Δρ = dL/dw₂ ∘ ε ∘ sigmoid(ρ) + ∂L/∂ρ.
/// Fails if (μ, ρ) changed since the ε behind `params.last_weight` was drawn.
pub fn uncertain_backward<F: Scalar>(
    dl_dw2: &Tensor<F>,
    dlq_dmu: &Tensor<F>,
    dlq_drho: &Tensor<F>,
    params: &crate::bayes::VariationalParams<F>,
) -> Result<GradPair<F>> {
    if dl_dw2.shape() != params.shape() {
        return Err(Error::shape(
            "uncertain_backward",
            format!("dl_dw2 {:?} vs params {:?}", dl_dw2.shape(), params.shape()),
        ));
    }
    if !params.sample_is_fresh() {
        return Err(Error::StaleSample);
    }
    let delta_mu = dl_dw2.zip_map(dlq_dmu, "uncertain_backward", |g, d| g + d)?;
    let mut delta_rho = Tensor::zeros(params.shape().to_vec());
    for i in 0..params.len() {
        let gate = params.last_epsilon().data()[i] * sigmoid(params.rho().data()[i]);
        delta_rho.data_mut()[i] = dl_dw2.data()[i] * gate + dlq_drho.data()[i];
    }
    Ok(GradPair { delta_mu, delta_rho })
}

/// One plain SGD step: param ← param − η·grad.
pub fn sgd_step<F: Scalar>(param: &mut Tensor<F>, grad: &Tensor<F>, eta: F) -> Result<()> {
    param.axpy(-eta, grad)
}

/// Everything the uncertain phase produces for one Monte-Carlo sample.
pub(crate) struct UncertainPass<F> {
    pub kl: F,
    pub nll: F,
    pub grads: BTreeMap<String, GradPair<F>>,
}

/// Forward with the stored sample, assemble per-layer (Δμ, Δρ) for the
/// single-sample free energy kl_weight·(log q − log P) + NLL.
pub(crate) fn uncertain_pass<F: Scalar>(
    model: &mut Model<F>,
    images: &Tensor<F>,
    labels: &[usize],
    prior: &PriorSpec,
    kl_weight: F,
) -> Result<UncertainPass<F>> {
    let (logits, cache) = model.forward_train(images, WeightMode::Stored, false)?;
    let probs = softmax(&logits)?;
    let nll = cross_entropy(&probs, labels)?;
    let dlogits = cross_entropy_backward(&probs, labels)?;
    let nll_grads = model.backward_train(&cache, &dlogits, BackwardScope::Uncertain)?;

    let mut kl = F::zero();
    let mut grads = BTreeMap::new();
    let partition = model.partition();
    for (name, params) in &partition.uncertain {
        kl = kl + kl_mc(params, prior, params.last_weight())?;

        let dnll_dw2 = nll_grads.uncertain.get(name).ok_or_else(|| {
            Error::shape("uncertain_pass", format!("no w2 gradient for layer {name}"))
        })?;
        let mut dl_dw2 = kl_grad_w(params, prior);
        dl_dw2.scale(kl_weight);
        dl_dw2.axpy(F::one(), dnll_dw2)?;

        let (mut dlq_dmu, mut dlq_drho) = log_q_direct_partials(params);
        dlq_dmu.scale(kl_weight);
        dlq_drho.scale(kl_weight);

        let pair = uncertain_backward(&dl_dw2, &dlq_dmu, &dlq_drho, params)?;
        grads.insert(name.clone(), pair);
    }
    Ok(UncertainPass { kl, nll, grads })
}

/// The single-sample uncertain loss at frozen noise, recomputing
/// w₂ = μ + softplus(ρ) ∘ ε so parameter perturbations flow through the
/// reparameterization. Used by finite-difference checks.
pub(crate) fn uncertain_loss_replay<F: Scalar>(
    model: &mut Model<F>,
    images: &Tensor<F>,
    labels: &[usize],
    prior: &PriorSpec,
    kl_weight: F,
) -> Result<F> {
    let (logits, _) = model.forward_train(images, WeightMode::ReplayNoise, false)?;
    let probs = softmax(&logits)?;
    let nll = cross_entropy(&probs, labels)?;
    let mut kl = F::zero();
    let partition = model.partition();
    for (_, params) in &partition.uncertain {
        let w = params.weight_from_noise(params.last_epsilon())?;
        kl = kl + kl_mc(params, prior, &w)?;
    }
    Ok(kl_weight * kl + nll)
}

/// Cross-entropy pass with w₂ fixed at μ; returns the loss, the number of
/// correct argmax predictions, and the certain-parameter gradients.
pub(crate) fn certain_pass<F: Scalar>(
    model: &mut Model<F>,
    images: &Tensor<F>,
    labels: &[usize],
    update_running: bool,
) -> Result<(F, usize, crate::model::Gradients<F>)> {
    let (logits, cache) = model.forward_train(images, WeightMode::Mean, update_running)?;
    let probs = softmax(&logits)?;
    let l_cen = cross_entropy(&probs, labels)?;
    let correct = count_correct(&probs, labels);
    let dlogits = cross_entropy_backward(&probs, labels)?;
    let grads = model.backward_train(&cache, &dlogits, BackwardScope::Certain)?;
    Ok((l_cen, correct, grads))
}

/// One training step's outcome.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub correct: usize,
    pub total: usize,
}

/// Mutable training state: RNG stream for weight sampling, momentum
/// buffers, the resolved KL weight and the global step counter.
pub struct Trainer {
    config: TrainConfig,
    prior: PriorSpec,
    kl_weight: f64,
    sample_rng: ChaCha8Rng,
    velocity: BTreeMap<String, Tensor<f32>>,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, batches_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        let kl_weight = config.resolve_kl_weight(batches_per_epoch);
        let prior = PriorSpec::scaled_gaussian(config.prior_sigma)?;
        let sample_rng = seeded_rng(config.seed, 1);
        Ok(Trainer {
            config,
            prior,
            kl_weight,
            sample_rng,
            velocity: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn kl_weight(&self) -> f64 {
        self.kl_weight
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn apply_update(
        velocity: &mut BTreeMap<String, Tensor<f32>>,
        momentum: f64,
        name: &str,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
        eta: f32,
    ) -> Result<()> {
        if momentum == 0.0 {
            return sgd_step(param, grad, eta);
        }
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros_like(grad));
        v.scale(momentum as f32);
        v.axpy(1.0, grad)?;
        sgd_step(param, v, eta)
    }

    /// Phase (a): N Monte-Carlo samples, averaged (Δμ, Δρ), SGD on θ.
    /// Returns (kl, nll) averaged over the samples.
    pub(crate) fn phase_uncertain(
        &mut self,
        model: &mut Model<f32>,
        images: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<(f64, f64)> {
        let n = self.config.mc_samples;
        let mut kl_sum = 0.0f64;
        let mut nll_sum = 0.0f64;
        let mut accum: BTreeMap<String, GradPair<f32>> = BTreeMap::new();
        for _ in 0..n {
            model.sample_all(&mut self.sample_rng)?;
            let pass = uncertain_pass(model, images, labels, &self.prior, self.kl_weight as f32)?;
            kl_sum += pass.kl as f64;
            nll_sum += pass.nll as f64;
            for (name, pair) in pass.grads {
                match accum.get_mut(&name) {
                    Some(acc) => {
                        acc.delta_mu.axpy(1.0, &pair.delta_mu)?;
                        acc.delta_rho.axpy(1.0, &pair.delta_rho)?;
                    }
                    None => {
                        accum.insert(name, pair);
                    }
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        let kl_avg = kl_sum * inv_n;
        let nll_avg = nll_sum * inv_n;
        let l_unc = self.kl_weight * kl_avg + nll_avg;
        if !l_unc.is_finite() {
            let max_grad = accum
                .values()
                .flat_map(|p| [p.delta_mu.max_abs() as f64, p.delta_rho.max_abs() as f64])
                .fold(0.0, f64::max);
            return Err(Error::Diverged {
                step: self.step,
                context: "uncertain phase loss".into(),
                max_grad,
            });
        }

        let eta = self.config.learning_rate as f32;
        let momentum = self.config.momentum;
        let velocity = &mut self.velocity;
        let mut update_err: Option<Error> = None;
        model.visit_uncertain_mut(|name, params| {
            if update_err.is_some() {
                return;
            }
            let Some(pair) = accum.get_mut(name) else {
                update_err = Some(Error::shape(
                    "phase_uncertain",
                    format!("no accumulated gradient for layer {name}"),
                ));
                return;
            };
            if n > 1 {
                pair.delta_mu.scale(inv_n as f32);
                pair.delta_rho.scale(inv_n as f32);
            }
            if !pair.delta_mu.all_finite() || !pair.delta_rho.all_finite() {
                update_err = Some(Error::Diverged {
                    step: self.step,
                    context: format!("uncertain gradients of layer {name}"),
                    max_grad: pair.delta_mu.max_abs().max(pair.delta_rho.max_abs()) as f64,
                });
                return;
            }
            let r = Self::apply_update(
                velocity,
                momentum,
                &format!("{name}.mu"),
                params.mu_mut(),
                &pair.delta_mu,
                eta,
            )
            .and_then(|_| {
                Self::apply_update(
                    velocity,
                    momentum,
                    &format!("{name}.rho"),
                    params.rho_mut(),
                    &pair.delta_rho,
                    eta,
                )
            });
            if let Err(e) = r {
                update_err = Some(e);
            }
        });
        if let Some(e) = update_err {
            return Err(e);
        }
        Ok((kl_avg, nll_avg))
    }

    /// Phase (c): w₂ = μ, cross-entropy backprop, SGD on every certain
    /// parameter. BN running statistics update here.
    pub(crate) fn phase_certain(
        &mut self,
        model: &mut Model<f32>,
        images: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<(f64, usize)> {
        let (l_cen, correct, grads) = certain_pass(model, images, labels, true)?;
        if !(l_cen as f64).is_finite() || !grads.all_finite() {
            let context = grads
                .certain
                .iter()
                .find(|(_, g)| !g.all_finite())
                .map(|(name, _)| format!("certain gradients of {name}"))
                .unwrap_or_else(|| "certain phase loss".into());
            return Err(Error::Diverged {
                step: self.step,
                context,
                max_grad: grads.max_abs(),
            });
        }
        let eta = self.config.learning_rate as f32;
        let momentum = self.config.momentum;
        let velocity = &mut self.velocity;
        let mut update_err: Option<Error> = None;
        model.visit_certain_mut(|name, param| {
            if update_err.is_some() {
                return;
            }
            if let Some(grad) = grads.certain.get(name) {
                if let Err(e) = Self::apply_update(velocity, momentum, name, param, grad, eta) {
                    update_err = Some(e);
                }
            }
        });
        if let Some(e) = update_err {
            return Err(e);
        }
        Ok((l_cen as f64, correct))
    }

    /// One minibatch through both phases. With no variational layers the
    /// step degenerates to plain cross-entropy SGD and L_unc is reported 0.
    pub fn train_step(
        &mut self,
        model: &mut Model<f32>,
        images: &Tensor<f32>,
        labels: &[usize],
    ) -> Result<StepOutcome> {
        let (losses, correct) = if model.has_variational() {
            let (kl_avg, nll_avg) = self.phase_uncertain(model, images, labels)?;
            let (l_cen, correct) = self.phase_certain(model, images, labels)?;
            (
                LossBreakdown::new(l_cen, kl_avg, nll_avg, self.kl_weight),
                correct,
            )
        } else {
            let (l_cen, correct) = self.phase_certain(model, images, labels)?;
            (LossBreakdown::certain_only(l_cen), correct)
        };
        self.step += 1;
        model.set_step(self.step);
        Ok(StepOutcome {
            losses,
            correct,
            total: labels.len(),
        })
    }
}

/// Epoch loop over shuffled minibatches; every `eval_every` epochs the
/// verification split (PublicTest) is evaluated with w₂ = μ. Deterministic
/// given `config.seed`.
pub fn train(
    model: &mut Model<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<TrainRecord>> {
    config.validate()?;
    let mut records = Vec::new();
    if config.epochs == 0 {
        return Ok(records);
    }
    let train_len = dataset.split_len(Split::Training);
    if train_len == 0 {
        return Err(Error::EmptySplit(Split::Training.to_string()));
    }
    let batches_per_epoch = train_len / config.batch_size;
    if batches_per_epoch == 0 {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds Training split of {train_len}",
            config.batch_size
        )));
    }
    let mut trainer = Trainer::new(config.clone(), batches_per_epoch)?;

    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let shuffle_seed = shuffle_seed_for(config.seed, epoch);
        let mut sums = LossSums::default();
        let mut correct = 0usize;
        let mut total = 0usize;
        for (images, labels) in batches(dataset, Split::Training, config.batch_size, shuffle_seed)? {
            let out = trainer.train_step(model, &images, &labels)?;
            sums.add(&out.losses);
            correct += out.correct;
            total += out.total;
        }
        let losses = sums.mean();
        let train_accuracy = correct as f64 / total.max(1) as f64;
        let sigma = sigma_stats(model);
        records.push(TrainRecord::epoch(
            epoch,
            trainer.step_count(),
            losses,
            train_accuracy,
            sigma,
            t0.elapsed().as_secs_f64() * 1e3,
        ));

        if (epoch + 1) % config.eval_every == 0 {
            let ev = evaluate(model, dataset, Split::PublicTest, EvalMode::Mean, None)?;
            records.push(TrainRecord::eval(epoch, trainer.step_count(), &ev));
        }
    }
    Ok(records)
}

#[derive(Default)]
struct LossSums {
    l_cen: f64,
    l_unc: f64,
    kl: f64,
    nll: f64,
    total: f64,
    n: usize,
}

impl LossSums {
    fn add(&mut self, lb: &LossBreakdown) {
        self.l_cen += lb.l_cen;
        self.l_unc += lb.l_unc;
        self.kl += lb.kl_term;
        self.nll += lb.nll_term;
        self.total += lb.total;
        self.n += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let inv = 1.0 / self.n.max(1) as f64;
        LossBreakdown {
            l_cen: self.l_cen * inv,
            l_unc: self.l_unc * inv,
            kl_term: self.kl * inv,
            nll_term: self.nll * inv,
            total: self.total * inv,
        }
    }
}
