//! Finite-difference validation of the analytic gradients, run at f64.
//!
//! ε is frozen once, then every checked parameter is perturbed ±h and the
//! loss re-evaluated: the uncertain loss replays w₂ = μ + softplus(ρ) ∘ ε,
//! the certain loss fixes w₂ = μ. Failures are reported, not thrown.

use std::collections::BTreeSet;

use super::{certain_pass, uncertain_loss_replay, uncertain_pass};
use crate::bayes::PriorSpec;
use crate::error::Result;
use crate::model::{Model, WeightMode};
use crate::nn::softmax;
use crate::objective::cross_entropy;
use crate::seeded_rng;
use crate::tensor::{sc, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckScope {
    All,
    BayesOnly,
    CertainOnly,
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    /// Central-difference step h.
    pub step: f64,
    /// Cap on checked indices per tensor (deterministically subsampled).
    pub max_per_tensor: usize,
    pub scope: CheckScope,
    pub seed: u64,
    pub kl_weight: f64,
    pub prior_sigma: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tolerance: 1e-3,
            step: 1e-3,
            max_per_tensor: 16,
            scope: CheckScope::All,
            seed: 42,
            kl_weight: 1.0,
            prior_sigma: 1.0,
        }
    }
}

/// Worst errors over the checked indices of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    /// "mu", "rho" or "certain".
    pub family: &'static str,
    pub checked: usize,
    /// Max relative error where max(|analytic|, |numeric|) > 1e-6.
    pub max_rel: f64,
    /// Max absolute error over near-zero entries (the fallback regime).
    pub max_abs: f64,
}

impl GroupReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel <= tolerance && self.max_abs <= 1e-6
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.within(self.tolerance))
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

const ABS_FALLBACK_THRESHOLD: f64 = 1e-6;

fn pick_indices(len: usize, max: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut set = BTreeSet::new();
    while set.len() < max {
        set.insert(rng.gen_range(0..len));
    }
    set.into_iter().collect()
}

fn compare(analytic: f64, numeric: f64, group: &mut GroupReport) {
    let denom = analytic.abs().max(numeric.abs());
    let err = (analytic - numeric).abs();
    if denom > ABS_FALLBACK_THRESHOLD {
        group.max_rel = group.max_rel.max(err / denom);
    } else {
        group.max_abs = group.max_abs.max(err);
    }
    group.checked += 1;
}

#[derive(Clone, Copy, PartialEq)]
enum Family {
    Mu,
    Rho,
    Certain,
}

fn nudge(model: &mut Model<f64>, family: Family, name: &str, idx: usize, delta: f64) {
    match family {
        Family::Certain => model.visit_certain_mut(|n, t| {
            if n == name {
                t.data_mut()[idx] = t.data()[idx] + delta;
            }
        }),
        Family::Mu => model.visit_uncertain_mut(|n, p| {
            if n == name {
                p.mu_mut().data_mut()[idx] = p.mu().data()[idx] + delta;
            }
        }),
        Family::Rho => model.visit_uncertain_mut(|n, p| {
            if n == name {
                p.rho_mut().data_mut()[idx] = p.rho().data()[idx] + delta;
            }
        }),
    }
}

fn certain_loss(model: &mut Model<f64>, images: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (logits, _) = model.forward_train(images, WeightMode::Mean, false)?;
    let probs = softmax(&logits)?;
    cross_entropy(&probs, labels)
}

/// Check every parameter group of `model` against central finite
/// differences of the corresponding loss on the given batch.
pub fn gradcheck_model(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let prior = PriorSpec::scaled_gaussian(cfg.prior_sigma)?;
    let h = cfg.step;
    let mut pick_rng = seeded_rng(cfg.seed, 3);
    let mut groups: Vec<GroupReport> = Vec::new();

    let check_bayes = model.has_variational() && cfg.scope != CheckScope::CertainOnly;
    if check_bayes {
        // Freeze ε once; all replays below reuse it.
        let mut noise_rng = seeded_rng(cfg.seed, 1);
        model.sample_all(&mut noise_rng)?;
        let pass = uncertain_pass(model, images, labels, &prior, sc(cfg.kl_weight))?;

        let layers: Vec<(String, usize)> = model
            .partition()
            .uncertain
            .iter()
            .map(|(name, p)| (name.clone(), p.len()))
            .collect();
        for (name, len) in layers {
            let pair = &pass.grads[&name];
            let indices = pick_indices(len, cfg.max_per_tensor, &mut pick_rng);
            for (family, analytic) in [
                (Family::Mu, pair.delta_mu.clone()),
                (Family::Rho, pair.delta_rho.clone()),
            ] {
                let mut group = GroupReport {
                    name: name.clone(),
                    family: if family == Family::Mu { "mu" } else { "rho" },
                    checked: 0,
                    max_rel: 0.0,
                    max_abs: 0.0,
                };
                for &idx in &indices {
                    nudge(model, family, &name, idx, h);
                    let up = uncertain_loss_replay(model, images, labels, &prior, cfg.kl_weight)?;
                    nudge(model, family, &name, idx, -2.0 * h);
                    let down = uncertain_loss_replay(model, images, labels, &prior, cfg.kl_weight)?;
                    nudge(model, family, &name, idx, h);
                    compare(analytic.data()[idx], (up - down) / (2.0 * h), &mut group);
                }
                groups.push(group);
            }
        }
    }

    if cfg.scope != CheckScope::BayesOnly {
        let (_, _, grads) = certain_pass(model, images, labels, false)?;
        let tensors: Vec<(String, usize)> = {
            let p = model.partition();
            p.certain
                .iter()
                .map(|(name, t)| (name.clone(), t.len()))
                .collect()
        };
        for (name, len) in tensors {
            let analytic = grads.certain[&name].clone();
            let indices = pick_indices(len, cfg.max_per_tensor, &mut pick_rng);
            let mut group = GroupReport {
                name: name.clone(),
                family: "certain",
                checked: 0,
                max_rel: 0.0,
                max_abs: 0.0,
            };
            for &idx in &indices {
                nudge(model, Family::Certain, &name, idx, h);
                let up = certain_loss(model, images, labels)?;
                nudge(model, Family::Certain, &name, idx, -2.0 * h);
                let down = certain_loss(model, images, labels)?;
                nudge(model, Family::Certain, &name, idx, h);
                compare(analytic.data()[idx], (up - down) / (2.0 * h), &mut group);
            }
            groups.push(group);
        }
    }

    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        groups,
    })
}
