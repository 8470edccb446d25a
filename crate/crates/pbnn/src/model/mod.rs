//! The scaled-down residual classifier with configurable uncertainty
//! placement: a stem convolution (group 1) plus four residual groups
//! (groups 2–5) of basic blocks, global average pooling and one FC head.
//! Every convolution inside a placed group carries variational weights,
//! including a block's 1×1 projection shortcut.

mod checkpoint;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use crate::bayes::{sample_weights, sample_weights_detached, VariationalParams};
use crate::error::{Error, Result};
use crate::nn::{
    affine_backward, affine_forward, batchnorm_backward, batchnorm_forward, batchnorm_infer,
    conv2d_backward_opts, conv2d_forward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, BatchNormState, BnCache, ConvSpec,
};
use crate::tensor::{sc, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NUM_GROUPS: usize = 5;

/// ρ starts at −5 (σ ≈ 6.7e−3) so a fresh Bayesian layer is near-deterministic.
pub const RHO_INIT: f64 = -5.0;

/// Which convolution groups carry variational weights (subset of {1,...,5}).
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct PlacementConfig {
    groups: BTreeSet<u8>,
}

impl PlacementConfig {
    pub fn none() -> Self {
        PlacementConfig::default()
    }

    pub fn from_groups(groups: impl IntoIterator<Item = u8>) -> Result<Self> {
        let groups: BTreeSet<u8> = groups.into_iter().collect();
        if let Some(&bad) = groups.iter().find(|&&g| g < 1 || g > NUM_GROUPS as u8) {
            return Err(Error::InvalidConfig(format!(
                "placement group {bad} out of range 1..={NUM_GROUPS}"
            )));
        }
        Ok(PlacementConfig { groups })
    }

    pub fn single(group: u8) -> Result<Self> {
        Self::from_groups([group])
    }

    pub fn all() -> Self {
        PlacementConfig {
            groups: (1..=NUM_GROUPS as u8).collect(),
        }
    }

    pub fn contains(&self, group: u8) -> bool {
        self.groups.contains(&group)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = u8> + '_ {
        self.groups.iter().copied()
    }

    pub fn shallowest(&self) -> Option<u8> {
        self.groups.iter().next().copied()
    }

    pub fn label(&self) -> String {
        if self.groups.is_empty() {
            "none".to_string()
        } else {
            self.groups
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

/// Network geometry. The desk-scale default keeps the model well under 2M
/// parameters so gradient checks and CPU training stay tractable.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchSpec {
    /// (height, width, channels) of the input images.
    pub input_size: (usize, usize, usize),
    pub num_classes: usize,
    /// Channel width of groups 1..=5.
    pub group_channels: [usize; 5],
    pub blocks_per_group: usize,
}

impl ArchSpec {
    /// Desk-scale default: faithful ResNet-18 topology at reduced width.
    pub fn desk() -> Self {
        ArchSpec {
            input_size: (48, 48, 1),
            num_classes: 7,
            group_channels: [16, 16, 32, 64, 128],
            blocks_per_group: 2,
        }
    }

    /// Full ResNet-18 widths, for the optional full-scale run.
    pub fn full() -> Self {
        ArchSpec {
            input_size: (48, 48, 1),
            num_classes: 7,
            group_channels: [64, 64, 128, 256, 512],
            blocks_per_group: 2,
        }
    }

    /// Tiny configuration for gradient checking (small parameter count).
    pub fn tiny() -> Self {
        ArchSpec {
            input_size: (8, 8, 1),
            num_classes: 7,
            group_channels: [2, 2, 3, 3, 4],
            blocks_per_group: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_size;
        if h < 8 || w < 8 || c == 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {:?} too small; need at least 8×8×1",
                self.input_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.group_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("group channels must be positive".into()));
        }
        if self.blocks_per_group == 0 {
            return Err(Error::InvalidConfig("blocks_per_group must be positive".into()));
        }
        Ok(())
    }
}

/// How a forward pass realizes the variational weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// w₂ = μ.
    Mean,
    /// Fresh ephemeral draw per variational layer; needs an RNG.
    Sampled,
    /// Use the w₂ recorded by the last `sample_weights` call.
    Stored,
    /// Recompute w₂ = μ + softplus(ρ) ∘ last ε; equals `Stored` until (μ, ρ)
    /// move, after which it tracks the perturbed parameters at frozen noise.
    ReplayNoise,
}

pub(crate) enum ConvWeights<F> {
    Det(Tensor<F>),
    Var(VariationalParams<F>),
}

pub(crate) struct ConvLayer<F> {
    pub name: String,
    pub spec: ConvSpec,
    pub weights: ConvWeights<F>,
}

impl<F: Scalar> ConvLayer<F> {
    /// The weight tensor a mode resolves to without consuming an RNG.
    fn resolved_weight(&self, mode: WeightMode) -> Result<Cow<'_, Tensor<F>>> {
        match &self.weights {
            ConvWeights::Det(w) => Ok(Cow::Borrowed(w)),
            ConvWeights::Var(p) => match mode {
                WeightMode::Mean => Ok(Cow::Borrowed(p.mu())),
                WeightMode::Stored => Ok(Cow::Borrowed(p.last_weight())),
                WeightMode::ReplayNoise => Ok(Cow::Owned(p.weight_from_noise(p.last_epsilon())?)),
                WeightMode::Sampled => Err(Error::InvalidConfig(
                    "Sampled mode draws inside forward(); no resolved weight".into(),
                )),
            },
        }
    }

    fn forward(
        &self,
        input: &Tensor<F>,
        mode: WeightMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<F>> {
        let weight = match (&self.weights, mode) {
            (ConvWeights::Var(p), WeightMode::Sampled) => {
                let rng = rng.ok_or_else(|| {
                    Error::InvalidConfig("Sampled forward requires an RNG".into())
                })?;
                Cow::Owned(sample_weights_detached(p, rng)?)
            }
            _ => self.resolved_weight(mode)?,
        };
        conv2d_forward(input, &weight, &self.spec)
    }
}

pub(crate) struct BnLayer<F> {
    pub name: String,
    pub state: BatchNormState<F>,
}

pub(crate) struct BasicBlock<F> {
    pub conv1: ConvLayer<F>,
    pub bn1: BnLayer<F>,
    pub conv2: ConvLayer<F>,
    pub bn2: BnLayer<F>,
    /// 1×1 projection + BN when the block changes resolution or width.
    pub proj: Option<(ConvLayer<F>, BnLayer<F>)>,
}

/// Residual network with a certain/uncertain parameter split.
pub struct Model<F = f32> {
    arch: ArchSpec,
    placement: PlacementConfig,
    seed: u64,
    step: u64,
    stem_conv: ConvLayer<F>,
    stem_bn: BnLayer<F>,
    /// groups[i] is convolution group i+2.
    groups: Vec<Vec<BasicBlock<F>>>,
    fc_weight: Tensor<F>,
    fc_bias: Tensor<F>,
}

fn clone_conv<F: Scalar>(c: &ConvLayer<F>) -> ConvLayer<F> {
    ConvLayer {
        name: c.name.clone(),
        spec: c.spec,
        weights: match &c.weights {
            ConvWeights::Det(w) => ConvWeights::Det(w.clone()),
            ConvWeights::Var(p) => ConvWeights::Var(p.clone()),
        },
    }
}

fn clone_bn<F: Scalar>(b: &BnLayer<F>) -> BnLayer<F> {
    BnLayer {
        name: b.name.clone(),
        state: b.state.clone(),
    }
}

impl<F: Scalar> Clone for Model<F> {
    fn clone(&self) -> Self {
        Model {
            arch: self.arch.clone(),
            placement: self.placement.clone(),
            seed: self.seed,
            step: self.step,
            stem_conv: clone_conv(&self.stem_conv),
            stem_bn: clone_bn(&self.stem_bn),
            groups: self
                .groups
                .iter()
                .map(|blocks| {
                    blocks
                        .iter()
                        .map(|b| BasicBlock {
                            conv1: clone_conv(&b.conv1),
                            bn1: clone_bn(&b.bn1),
                            conv2: clone_conv(&b.conv2),
                            bn2: clone_bn(&b.bn2),
                            proj: b.proj.as_ref().map(|(c, bn)| (clone_conv(c), clone_bn(bn))),
                        })
                        .collect()
                })
                .collect(),
            fc_weight: self.fc_weight.clone(),
            fc_bias: self.fc_bias.clone(),
        }
    }
}

/// Both parameter families by name; disjoint and exhaustive over the
/// trainable set, ordered by depth (projection after a block's main convs).
pub struct ParamPartition<'a, F> {
    pub certain: Vec<(String, &'a Tensor<F>)>,
    pub uncertain: Vec<(String, &'a VariationalParams<F>)>,
}

/// Named gradients produced by one backward pass.
#[derive(Default)]
pub(crate) struct Gradients<F> {
    pub certain: BTreeMap<String, Tensor<F>>,
    /// dLoss/dw₂ per variational conv layer, keyed by layer name.
    pub uncertain: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn max_abs(&self) -> f64 {
        self.certain
            .values()
            .chain(self.uncertain.values())
            .map(|t| t.max_abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.certain
            .values()
            .chain(self.uncertain.values())
            .all(|t| t.all_finite())
    }
}

/// Which parameter family a backward pass collects weight gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BackwardScope {
    /// Deterministic conv weights, BN γ/β and the FC head.
    Certain,
    /// dL/dw₂ of the variational convs only; stops below the shallowest
    /// placed group.
    Uncertain,
}

pub(crate) struct StemCache<F> {
    input: Tensor<F>,
    bn: BnCache<F>,
    bn_out: Tensor<F>,
}

pub(crate) struct BlockCache<F> {
    input: Tensor<F>,
    bn1: BnCache<F>,
    bn1_out: Tensor<F>,
    bn2: BnCache<F>,
    proj_bn: Option<BnCache<F>>,
    sum: Tensor<F>,
}

pub(crate) struct TrainCache<F> {
    mode: WeightMode,
    stem: StemCache<F>,
    blocks: Vec<Vec<BlockCache<F>>>,
    feat_hw: (usize, usize),
    pooled: Tensor<F>,
}

fn init_conv_weight<F: Scalar>(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size;
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(spec.weight_shape().to_vec(), |_| {
        sc((rng.gen::<f64>() * 2.0 - 1.0) * bound)
    })
}

fn make_conv<F: Scalar>(
    name: &str,
    spec: ConvSpec,
    variational: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ConvLayer<F>> {
    spec.validate()?;
    let weight = init_conv_weight(&spec, rng);
    let weights = if variational {
        let rho = Tensor::full(spec.weight_shape().to_vec(), sc(RHO_INIT));
        ConvWeights::Var(VariationalParams::new(weight, rho)?)
    } else {
        ConvWeights::Det(weight)
    };
    Ok(ConvLayer {
        name: name.to_string(),
        spec,
        weights,
    })
}

impl<F: Scalar> Model<F> {
    /// Build the network with deterministic initialization. The RNG draw
    /// order does not depend on the placement, so two builds from one seed
    /// share every μ and deterministic weight regardless of placement.
    pub fn build(arch: ArchSpec, placement: PlacementConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let (_, _, in_ch) = arch.input_size;

        let stem_spec = ConvSpec {
            in_channels: in_ch,
            out_channels: arch.group_channels[0],
            kernel_size: 3,
            stride: 1,
            padding: 1,
        };
        let stem_conv = make_conv("g1.conv", stem_spec, placement.contains(1), rng)?;
        let stem_bn = BnLayer {
            name: "g1.bn".to_string(),
            state: BatchNormState::new(arch.group_channels[0]),
        };

        let mut groups = Vec::with_capacity(4);
        let mut in_channels = arch.group_channels[0];
        for gi in 0..4 {
            let group_no = (gi + 2) as u8;
            let out_channels = arch.group_channels[gi + 1];
            // Groups 3–5 downsample in their first block.
            let first_stride = if group_no >= 3 { 2 } else { 1 };
            let variational = placement.contains(group_no);
            let mut blocks = Vec::with_capacity(arch.blocks_per_group);
            for bi in 0..arch.blocks_per_group {
                let stride = if bi == 0 { first_stride } else { 1 };
                let block_in = if bi == 0 { in_channels } else { out_channels };
                let prefix = format!("g{group_no}.b{bi}");
                let conv1 = make_conv(
                    &format!("{prefix}.conv1"),
                    ConvSpec {
                        in_channels: block_in,
                        out_channels,
                        kernel_size: 3,
                        stride,
                        padding: 1,
                    },
                    variational,
                    rng,
                )?;
                let conv2 = make_conv(
                    &format!("{prefix}.conv2"),
                    ConvSpec {
                        in_channels: out_channels,
                        out_channels,
                        kernel_size: 3,
                        stride: 1,
                        padding: 1,
                    },
                    variational,
                    rng,
                )?;
                let proj = if stride != 1 || block_in != out_channels {
                    let conv = make_conv(
                        &format!("{prefix}.proj.conv"),
                        ConvSpec {
                            in_channels: block_in,
                            out_channels,
                            kernel_size: 1,
                            stride,
                            padding: 0,
                        },
                        variational,
                        rng,
                    )?;
                    let bn = BnLayer {
                        name: format!("{prefix}.proj.bn"),
                        state: BatchNormState::new(out_channels),
                    };
                    Some((conv, bn))
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    conv1,
                    bn1: BnLayer {
                        name: format!("{prefix}.bn1"),
                        state: BatchNormState::new(out_channels),
                    },
                    conv2,
                    bn2: BnLayer {
                        name: format!("{prefix}.bn2"),
                        state: BatchNormState::new(out_channels),
                    },
                    proj,
                });
            }
            groups.push(blocks);
            in_channels = out_channels;
        }

        let feat = arch.group_channels[4];
        let bound = (1.0 / feat as f64).sqrt();
        let fc_weight = Tensor::from_fn(vec![feat, arch.num_classes], |_| {
            sc((rng.gen::<f64>() * 2.0 - 1.0) * bound)
        });
        let fc_bias = Tensor::zeros(vec![arch.num_classes]);

        Ok(Model {
            arch,
            placement,
            seed: 0,
            step: 0,
            stem_conv,
            stem_bn,
            groups,
            fc_weight,
            fc_bias,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn placement(&self) -> &PlacementConfig {
        &self.placement
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn has_variational(&self) -> bool {
        !self.placement.is_empty()
    }

    fn check_input(&self, input: &Tensor<F>) -> Result<()> {
        let (h, w, c) = self.arch.input_size;
        if input.rank() != 4 || input.dim(1) != c || input.dim(2) != h || input.dim(3) != w {
            return Err(Error::shape(
                "Model::forward",
                format!("input shape {:?}, expected [N, {c}, {h}, {w}]", input.shape()),
            ));
        }
        Ok(())
    }

    /// Inference forward pass (BN in eval mode). `Sampled` mode draws fresh
    /// ephemeral weights per variational layer, in depth order, and needs
    /// `rng`; `Mean` mode is a pure function of the parameters.
    pub fn forward(
        &self,
        input: &Tensor<F>,
        mode: WeightMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<F>> {
        self.check_input(input)?;
        let mut x = relu(&batchnorm_infer(
            &self.stem_conv.forward(input, mode, rng.as_deref_mut())?,
            &self.stem_bn.state,
        )?);
        for blocks in &self.groups {
            for block in blocks {
                let main = relu(&batchnorm_infer(
                    &block.conv1.forward(&x, mode, rng.as_deref_mut())?,
                    &block.bn1.state,
                )?);
                let main = batchnorm_infer(
                    &block.conv2.forward(&main, mode, rng.as_deref_mut())?,
                    &block.bn2.state,
                )?;
                let shortcut = match &block.proj {
                    Some((conv, bn)) => {
                        batchnorm_infer(&conv.forward(&x, mode, rng.as_deref_mut())?, &bn.state)?
                    }
                    None => x,
                };
                let sum = main.zip_map(&shortcut, "residual_add", |a, b| a + b)?;
                x = relu(&sum);
            }
        }
        let pooled = global_avg_pool(&x)?;
        affine_forward(&pooled, &self.fc_weight, &self.fc_bias)
    }

    /// Training forward pass: BN uses batch statistics and every
    /// intermediate needed by the backward pass is cached. Valid modes are
    /// `Mean`, `Stored` and `ReplayNoise`.
    pub(crate) fn forward_train(
        &mut self,
        input: &Tensor<F>,
        mode: WeightMode,
        update_running: bool,
    ) -> Result<(Tensor<F>, TrainCache<F>)> {
        if mode == WeightMode::Sampled {
            return Err(Error::InvalidConfig(
                "training forward uses Stored/ReplayNoise/Mean; call sample_all first".into(),
            ));
        }
        self.check_input(input)?;

        let conv_out = self.stem_conv.forward(input, mode, None)?;
        let (bn_out, bn_cache) =
            batchnorm_forward(&conv_out, &mut self.stem_bn.state, true, update_running)?;
        let mut x = relu(&bn_out);
        let stem = StemCache {
            input: input.clone(),
            bn: bn_cache,
            bn_out,
        };

        let mut block_caches: Vec<Vec<BlockCache<F>>> = Vec::with_capacity(self.groups.len());
        for blocks in self.groups.iter_mut() {
            let mut caches = Vec::with_capacity(blocks.len());
            for block in blocks.iter_mut() {
                let c1 = block.conv1.forward(&x, mode, None)?;
                let (bn1_out, bn1_cache) =
                    batchnorm_forward(&c1, &mut block.bn1.state, true, update_running)?;
                let r1 = relu(&bn1_out);
                let c2 = block.conv2.forward(&r1, mode, None)?;
                let (bn2_out, bn2_cache) =
                    batchnorm_forward(&c2, &mut block.bn2.state, true, update_running)?;
                let (shortcut, proj_cache) = match &mut block.proj {
                    Some((conv, bn)) => {
                        let p = conv.forward(&x, mode, None)?;
                        let (p_out, p_cache) =
                            batchnorm_forward(&p, &mut bn.state, true, update_running)?;
                        (p_out, Some(p_cache))
                    }
                    None => (x.clone(), None),
                };
                let sum = bn2_out.zip_map(&shortcut, "residual_add", |a, b| a + b)?;
                let out = relu(&sum);
                caches.push(BlockCache {
                    input: x,
                    bn1: bn1_cache,
                    bn1_out,
                    bn2: bn2_cache,
                    proj_bn: proj_cache,
                    sum,
                });
                x = out;
            }
            block_caches.push(caches);
        }

        let feat_hw = (x.dim(2), x.dim(3));
        let pooled = global_avg_pool(&x)?;
        let logits = affine_forward(&pooled, &self.fc_weight, &self.fc_bias)?;
        Ok((
            logits,
            TrainCache {
                mode,
                stem,
                blocks: block_caches,
                feat_hw,
                pooled,
            },
        ))
    }

    fn conv_backward_into(
        &self,
        conv: &ConvLayer<F>,
        grad_out: &Tensor<F>,
        input: &Tensor<F>,
        mode: WeightMode,
        scope: BackwardScope,
        want_input: bool,
        grads: &mut Gradients<F>,
    ) -> Result<Option<Tensor<F>>> {
        let want_weight = match (&conv.weights, scope) {
            (ConvWeights::Det(_), BackwardScope::Certain) => true,
            (ConvWeights::Var(_), BackwardScope::Uncertain) => true,
            _ => false,
        };
        let weight = conv.resolved_weight(mode)?;
        let out =
            conv2d_backward_opts(grad_out, input, &weight, &conv.spec, want_input, want_weight)?;
        if let Some(gw) = out.grad_weight {
            match &conv.weights {
                ConvWeights::Det(_) => {
                    grads.certain.insert(format!("{}.weight", conv.name), gw);
                }
                ConvWeights::Var(_) => {
                    grads.uncertain.insert(conv.name.clone(), gw);
                }
            }
        }
        Ok(out.grad_input)
    }

    fn block_backward(
        &self,
        block: &BasicBlock<F>,
        cache: &BlockCache<F>,
        grad_out: &Tensor<F>,
        mode: WeightMode,
        scope: BackwardScope,
        grads: &mut Gradients<F>,
    ) -> Result<Tensor<F>> {
        let d_sum = relu_backward(grad_out, &cache.sum)?;

        // Main branch: bn2 ← conv2 ← relu ← bn1 ← conv1.
        let (d_c2out, g_gamma2, g_beta2) = batchnorm_backward(&d_sum, &cache.bn2)?;
        if scope == BackwardScope::Certain {
            grads.certain.insert(format!("{}.gamma", block.bn2.name), g_gamma2);
            grads.certain.insert(format!("{}.beta", block.bn2.name), g_beta2);
        }
        let r1 = relu(&cache.bn1_out);
        let d_r1 = self
            .conv_backward_into(&block.conv2, &d_c2out, &r1, mode, scope, true, grads)?
            .expect("grad_input requested");
        let d_bn1out = relu_backward(&d_r1, &cache.bn1_out)?;
        let (d_c1out, g_gamma1, g_beta1) = batchnorm_backward(&d_bn1out, &cache.bn1)?;
        if scope == BackwardScope::Certain {
            grads.certain.insert(format!("{}.gamma", block.bn1.name), g_gamma1);
            grads.certain.insert(format!("{}.beta", block.bn1.name), g_beta1);
        }
        let mut d_input = self
            .conv_backward_into(&block.conv1, &d_c1out, &cache.input, mode, scope, true, grads)?
            .expect("grad_input requested");

        // Shortcut branch.
        match (&block.proj, &cache.proj_bn) {
            (Some((conv, bn)), Some(p_cache)) => {
                let (d_pconv, g_gamma, g_beta) = batchnorm_backward(&d_sum, p_cache)?;
                if scope == BackwardScope::Certain {
                    grads.certain.insert(format!("{}.gamma", bn.name), g_gamma);
                    grads.certain.insert(format!("{}.beta", bn.name), g_beta);
                }
                let d_short = self
                    .conv_backward_into(conv, &d_pconv, &cache.input, mode, scope, true, grads)?
                    .expect("grad_input requested");
                d_input.axpy(F::one(), &d_short)?;
            }
            (None, None) => {
                d_input.axpy(F::one(), &d_sum)?;
            }
            _ => unreachable!("projection cache out of sync with block"),
        }
        Ok(d_input)
    }

    /// Backpropagate `dlogits` through the cached forward pass.
    pub(crate) fn backward_train(
        &self,
        cache: &TrainCache<F>,
        dlogits: &Tensor<F>,
        scope: BackwardScope,
    ) -> Result<Gradients<F>> {
        let mut grads = Gradients::default();
        let (d_pooled, g_fcw, g_fcb) =
            affine_backward(dlogits, &cache.pooled, &self.fc_weight, &self.fc_bias)?;
        if scope == BackwardScope::Certain {
            grads.certain.insert("fc.weight".to_string(), g_fcw);
            grads.certain.insert("fc.bias".to_string(), g_fcb);
        }
        let mut d = global_avg_pool_backward(&d_pooled, cache.feat_hw.0, cache.feat_hw.1)?;

        let stop_group = match scope {
            BackwardScope::Uncertain => self.placement.shallowest(),
            BackwardScope::Certain => None,
        };

        for gi in (0..self.groups.len()).rev() {
            for (block, bcache) in self.groups[gi].iter().zip(&cache.blocks[gi]).rev() {
                d = self.block_backward(block, bcache, &d, cache.mode, scope, &mut grads)?;
            }
            if let Some(stop) = stop_group {
                if (gi + 2) as u8 == stop {
                    return Ok(grads);
                }
            }
        }

        // Stem (group 1); its input gradient is never needed.
        let needs_stem = match scope {
            BackwardScope::Certain => true,
            BackwardScope::Uncertain => self.placement.contains(1),
        };
        if needs_stem {
            let d_bnout = relu_backward(&d, &cache.stem.bn_out)?;
            let (d_conv, g_gamma, g_beta) = batchnorm_backward(&d_bnout, &cache.stem.bn)?;
            if scope == BackwardScope::Certain {
                grads
                    .certain
                    .insert(format!("{}.gamma", self.stem_bn.name), g_gamma);
                grads
                    .certain
                    .insert(format!("{}.beta", self.stem_bn.name), g_beta);
            }
            self.conv_backward_into(
                &self.stem_conv,
                &d_conv,
                &cache.stem.input,
                cache.mode,
                scope,
                false,
                &mut grads,
            )?;
        }
        Ok(grads)
    }

    fn conv_layers(&self) -> Vec<&ConvLayer<F>> {
        let mut v = vec![&self.stem_conv];
        for blocks in &self.groups {
            for block in blocks {
                v.push(&block.conv1);
                v.push(&block.conv2);
                if let Some((conv, _)) = &block.proj {
                    v.push(conv);
                }
            }
        }
        v
    }

    fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<F>> {
        let mut v: Vec<&mut ConvLayer<F>> = vec![&mut self.stem_conv];
        for blocks in self.groups.iter_mut() {
            for block in blocks.iter_mut() {
                v.push(&mut block.conv1);
                v.push(&mut block.conv2);
                if let Some((conv, _)) = block.proj.as_mut() {
                    v.push(conv);
                }
            }
        }
        v
    }

    fn bn_layers(&self) -> Vec<&BnLayer<F>> {
        let mut v = vec![&self.stem_bn];
        for blocks in &self.groups {
            for block in blocks {
                v.push(&block.bn1);
                v.push(&block.bn2);
                if let Some((_, bn)) = &block.proj {
                    v.push(bn);
                }
            }
        }
        v
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BnLayer<F>> {
        let mut v: Vec<&mut BnLayer<F>> = vec![&mut self.stem_bn];
        for blocks in self.groups.iter_mut() {
            for block in blocks.iter_mut() {
                v.push(&mut block.bn1);
                v.push(&mut block.bn2);
                if let Some((_, bn)) = block.proj.as_mut() {
                    v.push(bn);
                }
            }
        }
        v
    }

    /// Draw fresh w₂ for every variational layer, in depth order.
    pub fn sample_all(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        for conv in self.conv_layers_mut() {
            if let ConvWeights::Var(p) = &mut conv.weights {
                sample_weights(p, rng)?;
            }
        }
        Ok(())
    }

    /// Visit every trainable certain parameter (w₁) mutably, depth order.
    pub(crate) fn visit_certain_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        {
            let conv = &mut self.stem_conv;
            if let ConvWeights::Det(w) = &mut conv.weights {
                f(&format!("{}.weight", conv.name), w);
            }
            let bn = &mut self.stem_bn;
            f(&format!("{}.gamma", bn.name), &mut bn.state.gamma);
            f(&format!("{}.beta", bn.name), &mut bn.state.beta);
        }
        for blocks in self.groups.iter_mut() {
            for block in blocks.iter_mut() {
                if let ConvWeights::Det(w) = &mut block.conv1.weights {
                    f(&format!("{}.weight", block.conv1.name), w);
                }
                f(&format!("{}.gamma", block.bn1.name), &mut block.bn1.state.gamma);
                f(&format!("{}.beta", block.bn1.name), &mut block.bn1.state.beta);
                if let ConvWeights::Det(w) = &mut block.conv2.weights {
                    f(&format!("{}.weight", block.conv2.name), w);
                }
                f(&format!("{}.gamma", block.bn2.name), &mut block.bn2.state.gamma);
                f(&format!("{}.beta", block.bn2.name), &mut block.bn2.state.beta);
                if let Some((conv, bn)) = block.proj.as_mut() {
                    if let ConvWeights::Det(w) = &mut conv.weights {
                        f(&format!("{}.weight", conv.name), w);
                    }
                    f(&format!("{}.gamma", bn.name), &mut bn.state.gamma);
                    f(&format!("{}.beta", bn.name), &mut bn.state.beta);
                }
            }
        }
        f("fc.weight", &mut self.fc_weight);
        f("fc.bias", &mut self.fc_bias);
    }

    /// Visit every variational layer (θ) mutably, depth order.
    pub(crate) fn visit_uncertain_mut(
        &mut self,
        mut f: impl FnMut(&str, &mut VariationalParams<F>),
    ) {
        for conv in self.conv_layers_mut() {
            if let ConvWeights::Var(p) = &mut conv.weights {
                f(&conv.name.clone(), p);
            }
        }
    }

    /// Partition the trainable parameters into the certain and uncertain
    /// families.
    pub fn partition(&self) -> ParamPartition<'_, F> {
        let mut certain: Vec<(String, &Tensor<F>)> = Vec::new();
        let mut uncertain: Vec<(String, &VariationalParams<F>)> = Vec::new();
        for conv in self.conv_layers() {
            match &conv.weights {
                ConvWeights::Det(w) => certain.push((format!("{}.weight", conv.name), w)),
                ConvWeights::Var(p) => uncertain.push((conv.name.clone(), p)),
            }
        }
        for bn in self.bn_layers() {
            certain.push((format!("{}.gamma", bn.name), &bn.state.gamma));
            certain.push((format!("{}.beta", bn.name), &bn.state.beta));
        }
        certain.push(("fc.weight".to_string(), &self.fc_weight));
        certain.push(("fc.bias".to_string(), &self.fc_bias));
        ParamPartition { certain, uncertain }
    }

    /// Total trainable scalar parameters (μ and ρ both counted).
    pub fn num_parameters(&self) -> usize {
        let p = self.partition();
        let certain: usize = p.certain.iter().map(|(_, t)| t.len()).sum();
        let uncertain: usize = p.uncertain.iter().map(|(_, v)| 2 * v.len()).sum();
        certain + uncertain
    }

    /// Every persistent tensor, including BN running statistics and the
    /// sampling state; the canonical checkpoint order.
    pub(crate) fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor<F>)) {
        for conv in self.conv_layers() {
            match &conv.weights {
                ConvWeights::Det(w) => f(&format!("{}.weight", conv.name), w),
                ConvWeights::Var(p) => {
                    f(&format!("{}.mu", conv.name), p.mu());
                    f(&format!("{}.rho", conv.name), p.rho());
                    f(&format!("{}.eps", conv.name), p.last_epsilon());
                    f(&format!("{}.w", conv.name), p.last_weight());
                }
            }
        }
        for bn in self.bn_layers() {
            f(&format!("{}.gamma", bn.name), &bn.state.gamma);
            f(&format!("{}.beta", bn.name), &bn.state.beta);
            f(&format!("{}.running_mean", bn.name), &bn.state.running_mean);
            f(&format!("{}.running_var", bn.name), &bn.state.running_var);
        }
        f("fc.weight", &self.fc_weight);
        f("fc.bias", &self.fc_bias);
    }

    /// Mutable counterpart of [`Model::for_each_tensor`], used by the
    /// checkpoint loader.
    pub(crate) fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        for conv in self.conv_layers_mut() {
            let name = conv.name.clone();
            match &mut conv.weights {
                ConvWeights::Det(w) => f(&format!("{name}.weight"), w),
                ConvWeights::Var(p) => {
                    f(&format!("{name}.mu"), p.mu_mut());
                    f(&format!("{name}.rho"), p.rho_mut());
                    f(&format!("{name}.eps"), p.last_epsilon_mut());
                    f(&format!("{name}.w"), p.last_weight_mut());
                }
            }
        }
        for bn in self.bn_layers_mut() {
            let name = bn.name.clone();
            f(&format!("{name}.gamma"), &mut bn.state.gamma);
            f(&format!("{name}.beta"), &mut bn.state.beta);
            f(&format!("{name}.running_mean"), &mut bn.state.running_mean);
            f(&format!("{name}.running_var"), &mut bn.state.running_var);
        }
        f("fc.weight", &mut self.fc_weight);
        f("fc.bias", &mut self.fc_bias);
    }
}
