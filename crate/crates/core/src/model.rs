//! The backend network and its multi-task variants.
//!
//! Every variant has the same main branch: hidden blocks of
//! `affine → ReLU (or sReLU) → batch norm`, then `affine → log-softmax` over
//! the three trial classes (target, non-target, spoof). Variants differ in
//! how the auxiliary regression branch is attached:
//!
//! * `BASE`: no auxiliary branch.
//! * `SPS`: regression head sits on the last shared hidden layer.
//! * `HPS`: a separate hidden stack runs on the input; its learned features
//!   are appended to the input of the main branch.
//! * `*-ATTR`: the auxiliary branch additionally has an attribute
//!   classification head next to the regression head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    log_softmax, log_softmax_backward, relu, relu_backward, Affine, BatchNorm, BnCache, BnMode,
    SRelu,
};
use crate::seed::rng_for;
use crate::tensor::Matrix;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_TARGET: usize = 0;
pub const CLASS_NONTARGET: usize = 1;
pub const CLASS_SPOOF: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "SPS")]
    Sps,
    #[serde(rename = "HPS")]
    Hps,
    #[serde(rename = "SPS-ATTR")]
    SpsAttr,
    #[serde(rename = "HPS-ATTR")]
    HpsAttr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::Sps,
        Variant::Hps,
        Variant::SpsAttr,
        Variant::HpsAttr,
    ];

    pub fn has_regression(self) -> bool {
        self != Variant::Base
    }

    pub fn has_attribute(self) -> bool {
        matches!(self, Variant::SpsAttr | Variant::HpsAttr)
    }

    /// Separate hidden stack for the auxiliary branch.
    pub fn is_hard_sharing(self) -> bool {
        matches!(self, Variant::Hps | Variant::HpsAttr)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "BASE",
            Variant::Sps => "SPS",
            Variant::Hps => "HPS",
            Variant::SpsAttr => "SPS-ATTR",
            Variant::HpsAttr => "HPS-ATTR",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

/// What the HPS auxiliary branch hands to the main branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HpsFeature {
    /// Final hidden activation of the auxiliary stack.
    #[default]
    Hidden,
    /// Output of the regression head.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub variant: Variant,
    pub use_srelu: bool,
    pub reg_target_dim: Option<usize>,
    pub attr_classes: Option<usize>,
    pub hps_feature: HpsFeature,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 512,
            hidden_dims: vec![256, 256],
            num_classes: NUM_CLASSES,
            variant: Variant::Base,
            use_srelu: false,
            reg_target_dim: None,
            attr_classes: None,
            hps_feature: HpsFeature::Hidden,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("input_dim and hidden_dims must be non-empty and positive".into()));
        }
        if self.variant.has_regression() && !matches!(self.reg_target_dim, Some(d) if d > 0) {
            return Err(Error::Config(format!(
                "variant {} requires reg_target_dim",
                self.variant
            )));
        }
        if self.variant.has_attribute() && !matches!(self.attr_classes, Some(c) if c >= 2) {
            return Err(Error::Config(format!(
                "variant {} requires attr_classes >= 2",
                self.variant
            )));
        }
        Ok(())
    }

    fn last_hidden(&self) -> usize {
        *self.hidden_dims.last().expect("validated non-empty")
    }

    /// Width of the input seen by the first main-branch layer.
    pub fn main_input_dim(&self) -> usize {
        if self.variant.is_hard_sharing() {
            self.input_dim
                + match self.hps_feature {
                    HpsFeature::Hidden => self.last_hidden(),
                    HpsFeature::Projection => self.reg_target_dim.unwrap_or(0),
                }
        } else {
            self.input_dim
        }
    }
}

/// Named parameter groups used for selective updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Fc,
    Bn,
    Srelu,
    RegBranch,
    AttrHead,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Fc,
        Group::Bn,
        Group::Srelu,
        Group::RegBranch,
        Group::AttrHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Fc => "FC",
            Group::Bn => "BN",
            Group::Srelu => "SRELU",
            Group::RegBranch => "REG_BRANCH",
            Group::AttrHead => "ATTR_HEAD",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of parameter groups. `NETWORK` is an alias for `FC ∪ BN`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn empty() -> Self {
        GroupSet(0)
    }

    pub fn all() -> Self {
        Group::ALL.into_iter().collect()
    }

    pub fn network() -> Self {
        [Group::Fc, Group::Bn].into_iter().collect()
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn insert(&mut self, g: Group) {
        self.0 |= g.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }

    /// Parses comma/space separated names, e.g. `"NETWORK,SRELU"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut set = GroupSet::empty();
        for name in spec.split([',', ' ', '+']).filter(|s| !s.is_empty()) {
            set = set.union(GroupSet::parse_one(name)?);
        }
        Ok(set)
    }

    pub fn parse_one(name: &str) -> Result<Self> {
        let upper = name.trim().to_ascii_uppercase();
        if upper == "NETWORK" {
            return Ok(GroupSet::network());
        }
        // "RELU" is accepted as the name used for sReLU weights in result tables.
        if upper == "RELU" {
            return Ok([Group::Srelu].into_iter().collect());
        }
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == upper)
            .map(|g| [g].into_iter().collect())
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{name}`")))
    }

    pub fn union(self, other: GroupSet) -> Self {
        GroupSet(self.0 | other.0)
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(Group::as_str).collect()
    }
}

impl FromIterator<Group> for GroupSet {
    fn from_iter<I: IntoIterator<Item = Group>>(iter: I) -> Self {
        let mut s = GroupSet::empty();
        for g in iter {
            s.insert(g);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: Group,
    pub len: usize,
}

/// Tensors (by position in the canonical parameter order) selected for update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSelection {
    pub mask: Vec<bool>,
    pub scalars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBlock {
    pub affine: Affine,
    pub srelu: Option<SRelu>,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Matrix,
    pre: Matrix,
    bn: BnCache,
}

impl HiddenBlock {
    fn forward(&self, x: &Matrix, mode: BnMode) -> Result<(Matrix, BlockCache)> {
        let pre = self.affine.forward(x)?;
        let act = match &self.srelu {
            Some(s) => s.forward(&pre)?,
            None => relu(&pre),
        };
        let (out, bn) = self.bn.forward(&act, mode)?;
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                pre,
                bn,
            },
        ))
    }

    /// Writes parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, cache: &BlockCache, dy: &Matrix, grad: &mut HiddenBlock) -> Result<Matrix> {
        let g_bn = self.bn.backward(&cache.bn, dy)?;
        grad.bn.gamma = g_bn.gamma;
        grad.bn.beta = g_bn.beta;
        let d_pre = match (&self.srelu, &mut grad.srelu) {
            (Some(s), Some(gs)) => {
                let (d_scale, d_pre) = s.backward(&cache.pre, &g_bn.input)?;
                gs.scale = d_scale;
                d_pre
            }
            _ => relu_backward(&cache.pre, &g_bn.input)?,
        };
        let g_fc = self.affine.backward(&cache.input, &d_pre)?;
        grad.affine.weight = g_fc.weight;
        grad.affine.bias = g_fc.bias;
        Ok(g_fc.input)
    }
}

fn stack_forward(
    blocks: &[HiddenBlock],
    x: &Matrix,
    mode: BnMode,
) -> Result<(Matrix, Vec<BlockCache>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut h = x.clone();
    for b in blocks {
        let (out, c) = b.forward(&h, mode)?;
        caches.push(c);
        h = out;
    }
    Ok((h, caches))
}

fn stack_backward(
    blocks: &[HiddenBlock],
    caches: &[BlockCache],
    dy: Matrix,
    grads: &mut [HiddenBlock],
) -> Result<Matrix> {
    let mut d = dy;
    for ((b, c), g) in blocks.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d = b.backward(c, &d, g)?;
    }
    Ok(d)
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub log_posteriors: Matrix,
    pub reg_prediction: Option<Matrix>,
    pub attr_log_probs: Option<Matrix>,
}

/// Intermediate values kept by [`Model::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    main: Vec<BlockCache>,
    main_hidden: Matrix,
    aux: Vec<BlockCache>,
    aux_hidden: Option<Matrix>,
}

impl ForwardCache {
    /// Smallest |pre-activation| (after sReLU scaling) over all hidden units
    /// and rows: the distance of this point from the nearest ReLU kink.
    pub fn kink_margin(&self, model: &Model) -> f64 {
        let mut m = f64::INFINITY;
        let blocks = model.main.iter().zip(&self.main).chain(model.aux.iter().zip(&self.aux));
        for (b, c) in blocks {
            for r in 0..c.pre.rows() {
                for (j, v) in c.pre.row(r).iter().enumerate() {
                    let s = b.srelu.as_ref().map_or(1.0, |s| s.scale[j]);
                    m = m.min((s * v).abs());
                }
            }
        }
        m
    }

    /// Number of hidden units that are active on every row of the batch.
    /// Under batch statistics such a unit's incoming bias has an exactly
    /// zero gradient.
    pub fn always_active_units(&self, model: &Model) -> usize {
        let blocks = model.main.iter().zip(&self.main).chain(model.aux.iter().zip(&self.aux));
        let mut count = 0;
        for (b, c) in blocks {
            for j in 0..c.pre.cols() {
                let s = b.srelu.as_ref().map_or(1.0, |s| s.scale[j]);
                if (0..c.pre.rows()).all(|r| s * c.pre.get(r, j) > 0.0) {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Loss gradients w.r.t. the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub log_posteriors: Matrix,
    pub reg_prediction: Option<Matrix>,
    pub attr_log_probs: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    main: Vec<HiddenBlock>,
    class_head: Affine,
    /// Separate hidden stack of the auxiliary branch (hard sharing only).
    aux: Vec<HiddenBlock>,
    reg_head: Option<Affine>,
    attr_head: Option<Affine>,
}

fn init_affine(rng: &mut impl Rng, input: usize, output: usize) -> Affine {
    let bound = 1.0 / (input as f64).sqrt();
    let w = (0..input * output)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let b = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
    Affine::new(Matrix::from_vec(output, input, w).expect("sized"), b).expect("sized")
}

fn init_stack(
    rng: &mut impl Rng,
    input: usize,
    dims: &[usize],
    srelu: bool,
    cfg: &ModelConfig,
) -> Result<Vec<HiddenBlock>> {
    let mut blocks = Vec::with_capacity(dims.len());
    let mut prev = input;
    for &d in dims {
        blocks.push(HiddenBlock {
            affine: init_affine(rng, prev, d),
            srelu: srelu.then(|| SRelu::identity(d)),
            bn: BatchNorm::new(d, cfg.bn_momentum, cfg.bn_epsilon)?,
        });
        prev = d;
    }
    Ok(blocks)
}

impl Model {
    /// Deterministic initialisation from `cfg.seed`: affine weights and
    /// biases uniform in ±1/√fan_in, BN γ=1 β=0, sReLU diagonal 1.
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, "model-init");
        let last = cfg.last_hidden();
        let main = init_stack(&mut rng, cfg.main_input_dim(), &cfg.hidden_dims, cfg.use_srelu, &cfg)?;
        let class_head = init_affine(&mut rng, last, cfg.num_classes);
        let aux = if cfg.variant.is_hard_sharing() {
            init_stack(&mut rng, cfg.input_dim, &cfg.hidden_dims, false, &cfg)?
        } else {
            Vec::new()
        };
        let reg_head = cfg
            .reg_target_dim
            .filter(|_| cfg.variant.has_regression())
            .map(|d| init_affine(&mut rng, last, d));
        let attr_head = cfg
            .attr_classes
            .filter(|_| cfg.variant.has_attribute())
            .map(|c| init_affine(&mut rng, last, c));
        Ok(Model {
            config: cfg,
            main,
            class_head,
            aux,
            reg_head,
            attr_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn has_srelu(&self) -> bool {
        self.main.iter().any(|b| b.srelu.is_some())
    }

    pub fn main_blocks(&self) -> &[HiddenBlock] {
        &self.main
    }

    /// Inserts identity-initialised sReLU into every main-branch hidden block.
    /// A no-op on blocks that already have one.
    pub fn add_srelu(&mut self) {
        for b in &mut self.main {
            if b.srelu.is_none() {
                b.srelu = Some(SRelu::identity(b.affine.out_dim()));
            }
        }
        self.config.use_srelu = true;
    }

    /// Copy of the model with every trainable scalar set to zero; used as the
    /// container for gradients.
    pub fn zeros_like(&self) -> Model {
        let mut m = self.clone();
        for (_, t) in m.param_tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    /// Trainable tensors in canonical order: main blocks (fc weight, fc bias,
    /// srelu, bn gamma, bn beta), class head, auxiliary blocks, regression
    /// head, attribute head.
    pub fn param_tensors(&self) -> Vec<(ParamInfo, &[f64])> {
        let mut out: Vec<(ParamInfo, &[f64])> = Vec::new();
        let info = |name: String, group, len| ParamInfo { name, group, len };
        for (i, b) in self.main.iter().enumerate() {
            out.push((info(format!("main.{i}.fc.weight"), Group::Fc, b.affine.weight.data().len()), b.affine.weight.data()));
            out.push((info(format!("main.{i}.fc.bias"), Group::Fc, b.affine.bias.len()), &b.affine.bias));
            if let Some(s) = &b.srelu {
                out.push((info(format!("main.{i}.srelu.scale"), Group::Srelu, s.scale.len()), &s.scale));
            }
            out.push((info(format!("main.{i}.bn.gamma"), Group::Bn, b.bn.gamma.len()), &b.bn.gamma));
            out.push((info(format!("main.{i}.bn.beta"), Group::Bn, b.bn.beta.len()), &b.bn.beta));
        }
        out.push((info("class_head.weight".into(), Group::Fc, self.class_head.weight.data().len()), self.class_head.weight.data()));
        out.push((info("class_head.bias".into(), Group::Fc, self.class_head.bias.len()), &self.class_head.bias));
        for (i, b) in self.aux.iter().enumerate() {
            out.push((info(format!("aux.{i}.fc.weight"), Group::RegBranch, b.affine.weight.data().len()), b.affine.weight.data()));
            out.push((info(format!("aux.{i}.fc.bias"), Group::RegBranch, b.affine.bias.len()), &b.affine.bias));
            out.push((info(format!("aux.{i}.bn.gamma"), Group::RegBranch, b.bn.gamma.len()), &b.bn.gamma));
            out.push((info(format!("aux.{i}.bn.beta"), Group::RegBranch, b.bn.beta.len()), &b.bn.beta));
        }
        if let Some(h) = &self.reg_head {
            out.push((info("reg_head.weight".into(), Group::RegBranch, h.weight.data().len()), h.weight.data()));
            out.push((info("reg_head.bias".into(), Group::RegBranch, h.bias.len()), &h.bias));
        }
        if let Some(h) = &self.attr_head {
            out.push((info("attr_head.weight".into(), Group::AttrHead, h.weight.data().len()), h.weight.data()));
            out.push((info("attr_head.bias".into(), Group::AttrHead, h.bias.len()), &h.bias));
        }
        out
    }

    /// Mutable view of the same tensors, in the same order as [`Model::param_tensors`].
    pub fn param_tensors_mut(&mut self) -> Vec<(ParamInfo, &mut [f64])> {
        let infos: Vec<ParamInfo> = self.param_tensors().into_iter().map(|(i, _)| i).collect();
        let mut slices: Vec<&mut [f64]> = Vec::with_capacity(infos.len());
        for b in self.main.iter_mut() {
            slices.push(b.affine.weight.data_mut());
            slices.push(&mut b.affine.bias);
            if let Some(s) = &mut b.srelu {
                slices.push(&mut s.scale);
            }
            slices.push(&mut b.bn.gamma);
            slices.push(&mut b.bn.beta);
        }
        slices.push(self.class_head.weight.data_mut());
        slices.push(&mut self.class_head.bias);
        for b in self.aux.iter_mut() {
            slices.push(b.affine.weight.data_mut());
            slices.push(&mut b.affine.bias);
            slices.push(&mut b.bn.gamma);
            slices.push(&mut b.bn.beta);
        }
        if let Some(h) = &mut self.reg_head {
            slices.push(h.weight.data_mut());
            slices.push(&mut h.bias);
        }
        if let Some(h) = &mut self.attr_head {
            slices.push(h.weight.data_mut());
            slices.push(&mut h.bias);
        }
        debug_assert_eq!(infos.len(), slices.len());
        infos.into_iter().zip(slices).collect()
    }

    /// Batch-norm layers in canonical order (main first, then auxiliary).
    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.main.iter().chain(&self.aux).map(|b| &b.bn)
    }

    pub(crate) fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.main.iter_mut().chain(self.aux.iter_mut()).map(|b| &mut b.bn)
    }

    pub fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|(i, _)| i.len).sum()
    }

    pub fn group_sizes(&self) -> Vec<(Group, usize)> {
        let tensors = self.param_tensors();
        Group::ALL
            .into_iter()
            .map(|g| {
                let n = tensors.iter().filter(|(i, _)| i.group == g).map(|(i, _)| i.len).sum();
                (g, n)
            })
            .collect()
    }

    /// All trainable scalars flattened in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(Error::shape("set_flat_params", format!("{n} params"), format!("{} values", values.len())));
        }
        let mut off = 0;
        for (_, t) in self.param_tensors_mut() {
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    /// Resolves a group selector to the tensors it covers. Every named group
    /// must contribute at least one scalar in this model.
    pub fn select_params(&self, selector: GroupSet) -> Result<ParamSelection> {
        if selector.is_empty() {
            return Err(Error::Config("empty parameter group selection".into()));
        }
        let sizes = self.group_sizes();
        for g in selector.iter() {
            let n = sizes.iter().find(|(s, _)| *s == g).map_or(0, |(_, n)| *n);
            if n == 0 {
                return Err(Error::Config(format!(
                    "group {} has no parameters in a {} model{}",
                    g.as_str(),
                    self.variant(),
                    if g == Group::Srelu { " without sReLU" } else { "" }
                )));
            }
        }
        let tensors = self.param_tensors();
        let mask: Vec<bool> = tensors.iter().map(|(i, _)| selector.contains(i.group)).collect();
        let scalars = tensors.iter().zip(&mask).filter(|(_, m)| **m).map(|((i, _), _)| i.len).sum();
        Ok(ParamSelection { mask, scalars })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::shape("model forward", x.shape_str(), format!("input_dim {}", self.config.input_dim)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, mode: BnMode) -> Result<ForwardOutput> {
        Ok(self.forward_cached(x, mode)?.0)
    }

    /// Pure forward pass; running statistics are not touched. Use
    /// [`Model::commit_running_stats`] to fold batch statistics in afterwards.
    pub fn forward_cached(&self, x: &Matrix, mode: BnMode) -> Result<(ForwardOutput, ForwardCache)> {
        self.check_input(x)?;
        let (main_in, aux_caches, aux_hidden, aux_reg) = if self.variant().is_hard_sharing() {
            let (h, caches) = stack_forward(&self.aux, x, mode)?;
            let reg = self.reg_head.as_ref().expect("hard sharing has a regression head").forward(&h)?;
            let feature = match self.config.hps_feature {
                HpsFeature::Hidden => &h,
                HpsFeature::Projection => &reg,
            };
            (x.hcat(feature)?, caches, Some(h), Some(reg))
        } else {
            (x.clone(), Vec::new(), None, None)
        };
        let (h, main_caches) = stack_forward(&self.main, &main_in, mode)?;
        let log_posteriors = log_softmax(&self.class_head.forward(&h)?);

        let aux_source = aux_hidden.as_ref().unwrap_or(&h);
        let reg_prediction = match aux_reg {
            Some(r) => Some(r),
            None => self.reg_head.as_ref().map(|head| head.forward(aux_source)).transpose()?,
        };
        let attr_log_probs = self
            .attr_head
            .as_ref()
            .map(|head| head.forward(aux_source).map(|z| log_softmax(&z)))
            .transpose()?;
        Ok((
            ForwardOutput {
                log_posteriors,
                reg_prediction,
                attr_log_probs,
            },
            ForwardCache {
                main: main_caches,
                main_hidden: h,
                aux: aux_caches,
                aux_hidden,
            },
        ))
    }

    pub fn commit_running_stats(&mut self, cache: &ForwardCache) {
        for (b, c) in self.main.iter_mut().zip(&cache.main) {
            b.bn.update_running(&c.bn);
        }
        for (b, c) in self.aux.iter_mut().zip(&cache.aux) {
            b.bn.update_running(&c.bn);
        }
    }

    /// Training-mode forward: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(ForwardOutput, ForwardCache)> {
        let (out, cache) = self.forward_cached(x, BnMode::Batch)?;
        self.commit_running_stats(&cache);
        Ok((out, cache))
    }

    /// Reverse pass. Returns a model-shaped container holding the gradient of
    /// every trainable scalar.
    pub fn backward(&self, out: &ForwardOutput, cache: &ForwardCache, grads: &OutputGrads) -> Result<Model> {
        let mut g = self.zeros_like();

        let d_logits = log_softmax_backward(&out.log_posteriors, &grads.log_posteriors)?;
        let gc = self.class_head.backward(&cache.main_hidden, &d_logits)?;
        g.class_head.weight = gc.weight;
        g.class_head.bias = gc.bias;
        let mut d_main_hidden = Some(gc.input);

        // Gradient arriving at the auxiliary hidden representation (hard sharing)
        // or at the shared hidden representation (soft sharing).
        let aux_source = cache.aux_hidden.as_ref().unwrap_or(&cache.main_hidden);
        let mut d_aux_source = Matrix::zeros(aux_source.rows(), aux_source.cols());

        if let (Some(head), Some(lp), Some(d)) = (&self.attr_head, &out.attr_log_probs, &grads.attr_log_probs) {
            let dz = log_softmax_backward(lp, d)?;
            let ga = head.backward(aux_source, &dz)?;
            let gh = g.attr_head.as_mut().expect("same layout");
            gh.weight = ga.weight;
            gh.bias = ga.bias;
            d_aux_source = d_aux_source.add(&ga.input)?;
        }

        let hard = self.variant().is_hard_sharing();
        let mut d_reg = grads.reg_prediction.clone();

        if hard {
            let d_main_in = stack_backward(&self.main, &cache.main, d_main_hidden.take().expect("unused"), &mut g.main)?;
            let (_, d_feature) = d_main_in.hsplit(self.config.input_dim);
            match self.config.hps_feature {
                HpsFeature::Hidden => d_aux_source = d_aux_source.add(&d_feature)?,
                HpsFeature::Projection => {
                    d_reg = Some(match d_reg {
                        Some(d) => d.add(&d_feature)?,
                        None => d_feature,
                    })
                }
            }
        }

        if let (Some(head), Some(d)) = (&self.reg_head, &d_reg) {
            let gr = head.backward(aux_source, d)?;
            let gh = g.reg_head.as_mut().expect("same layout");
            gh.weight = gr.weight;
            gh.bias = gr.bias;
            d_aux_source = d_aux_source.add(&gr.input)?;
        }

        if hard {
            stack_backward(&self.aux, &cache.aux, d_aux_source, &mut g.aux)?;
        } else {
            let d = d_main_hidden.take().expect("unused").add(&d_aux_source)?;
            stack_backward(&self.main, &cache.main, d, &mut g.main)?;
        }
        Ok(g)
    }

    pub(crate) fn parts_for_checkpoint(&self) -> (&ModelConfig, Vec<f64>, Vec<f64>) {
        let stats = self
            .batch_norms()
            .flat_map(|bn| bn.running_mean.iter().chain(&bn.running_var).copied())
            .collect();
        (&self.config, self.flat_params(), stats)
    }

    pub(crate) fn set_running_stats(&mut self, stats: &[f64]) -> Result<()> {
        let need: usize = self.batch_norms().map(|b| 2 * b.dim()).sum();
        if stats.len() != need {
            return Err(Error::shape("running stats", format!("{need} values"), format!("{}", stats.len())));
        }
        let mut off = 0;
        for bn in self.batch_norms_mut() {
            let d = bn.dim();
            bn.running_mean.copy_from_slice(&stats[off..off + d]);
            bn.running_var.copy_from_slice(&stats[off + d..off + 2 * d]);
            off += 2 * d;
        }
        Ok(())
    }
}

impl ForwardOutput {
    /// `exp` of the log-posteriors, row per trial: (θ_tar, θ_non, θ_spf).
    pub fn posteriors(&self) -> Vec<[f64; 3]> {
        self.log_posteriors
            .row_iter()
            .map(|r| [r[0].exp(), r[1].exp(), r[2].exp()])
            .collect()
    }
}
