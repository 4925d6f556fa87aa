//! Adam optimisation, step learning-rate decay, training and selective
//! adaptation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::batching::{one_hot_rows, Batch, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::layers::BnMode;
use crate::losses::{cosine_loss, cross_entropy, mse_loss, smooth_labels, ClassTarget, CosineDenominator, LossWeights, SmoothingConfig};
use crate::model::{Group, GroupSet, Model, OutputGrads, Variant};
use crate::seed::derive_seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegLoss {
    Mse,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_step_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    /// Label smoothing on the attribute branch.
    pub smoothing_epsilon: f64,
    pub reg_loss: RegLoss,
    pub cosine_denominator: CosineDenominator,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 0.001,
            lr_decay_factor: 0.1,
            lr_step_epochs: 10,
            weight_decay: 1e-7,
            batch_size: 128,
            epochs: 20,
            loss_weights: LossWeights::default(),
            smoothing_epsilon: 0.0,
            reg_loss: RegLoss::Cosine,
            cosine_denominator: CosineDenominator::Product,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if self.lr_step_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("lr_step_epochs and batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.smoothing_epsilon) {
            return Err(Error::Config(format!(
                "smoothing_epsilon {} outside [0, 1]",
                self.smoothing_epsilon
            )));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// `lr_init · γ_m^⌊epoch / step⌋`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    lr_schedule(cfg.lr_init, epoch, cfg)
}

fn lr_schedule(lr_init: f64, epoch: usize, cfg: &TrainConfig) -> f64 {
    lr_init * cfg.lr_decay_factor.powi((epoch / cfg.lr_step_epochs.max(1)) as i32)
}

/// First and second moment accumulators for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            hyper,
        }
    }

    /// Updates `params` (stored at `offset` in the moment vectors) using the
    /// current step count.
    fn update_slice(&mut self, offset: usize, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        let AdamConfig { beta1, beta2, epsilon } = self.hyper;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i] + weight_decay * params[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + epsilon);
        }
    }
}

/// One Adam update with L2 weight decay added to the gradient.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params", params.len()),
            format!("{} grads, {} moments", grads.len(), state.m.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at index {i}")));
    }
    state.step += 1;
    state.update_slice(0, params, grads, lr, weight_decay);
    Ok(())
}

/// Applies one Adam step to the tensors selected by `mask`.
fn model_step(model: &mut Model, grads: &Model, mask: &[bool], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    let g = grads.param_tensors();
    for ((info, t), on) in g.iter().zip(mask) {
        if *on {
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in group {} (tensor {}, index {i})",
                    info.group.as_str(),
                    info.name
                )));
            }
        }
    }
    state.step += 1;
    let mut offset = 0;
    for (((_, p), (_, gt)), on) in model.param_tensors_mut().into_iter().zip(&g).zip(mask) {
        let n = p.len();
        if *on {
            state.update_slice(offset, p, gt, lr, weight_decay);
        }
        offset += n;
    }
    Ok(())
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_reg: Option<f64>,
    pub loss_attr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Single-row batches skipped because batch statistics need two rows.
    pub skipped_batches: usize,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tlr\tloss_total\tloss_ce\tloss_reg\tloss_attr\n");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
        for e in &self.epochs {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                e.lr,
                e.loss_total,
                e.loss_ce,
                opt(e.loss_reg),
                opt(e.loss_attr)
            )
            .unwrap();
        }
        s
    }
}

/// Coefficients on (ce, reg, attr) in the total loss.
fn loss_coefficients(variant: Variant, w: &LossWeights) -> (f64, f64, f64) {
    match variant {
        Variant::Base => (1.0, 0.0, 0.0),
        Variant::Sps | Variant::Hps => (w.lambda, 1.0 - w.lambda, 0.0),
        Variant::SpsAttr | Variant::HpsAttr => (
            w.lambda,
            (1.0 - w.lambda) * (1.0 - w.gamma),
            (1.0 - w.lambda) * w.gamma,
        ),
    }
}

struct StepLosses {
    total: f64,
    ce: f64,
    reg: Option<f64>,
    attr: Option<f64>,
}

/// Loss value and output gradients of one batch.
fn batch_objective(model: &Model, batch: &Batch, cfg: &TrainConfig, out: &crate::model::ForwardOutput) -> Result<(StepLosses, OutputGrads)> {
    let variant = model.variant();
    let (kc, kr, ka) = loss_coefficients(variant, &cfg.loss_weights);
    let ce = cross_entropy(&out.log_posteriors, &batch.class_targets())?;
    let mut total = kc * ce.value;
    let mut grads = OutputGrads {
        log_posteriors: ce.grad.scale(kc),
        reg_prediction: None,
        attr_log_probs: None,
    };
    let mut losses = StepLosses {
        total: 0.0,
        ce: ce.value,
        reg: None,
        attr: None,
    };
    if variant.has_regression() {
        let pred = out.reg_prediction.as_ref().expect("regression variant");
        let target = batch
            .reg
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{variant} training needs regression targets")))?;
        let r = match cfg.reg_loss {
            RegLoss::Mse => mse_loss(pred, target)?,
            RegLoss::Cosine => cosine_loss(pred, target, cfg.cosine_denominator)?,
        };
        total += kr * r.value;
        losses.reg = Some(r.value);
        grads.reg_prediction = Some(r.grad.scale(kr));
    }
    if variant.has_attribute() {
        let lp = out.attr_log_probs.as_ref().expect("attribute variant");
        let idx = batch
            .attr
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{variant} training needs attribute targets")))?;
        let k = lp.cols();
        let mut targets = one_hot_rows(idx, k);
        if cfg.smoothing_epsilon > 0.0 {
            let sc = SmoothingConfig {
                epsilon: cfg.smoothing_epsilon,
                classes: k,
            };
            for (r, &c) in idx.iter().enumerate() {
                let q = smooth_labels(&ClassTarget::one_hot(c, k)?, &sc)?;
                targets.row_mut(r).copy_from_slice(q.probs());
            }
        }
        let a = cross_entropy(lp, &targets)?;
        total += ka * a.value;
        losses.attr = Some(a.value);
        grads.attr_log_probs = Some(a.grad.scale(ka));
    }
    losses.total = total;
    Ok((losses, grads))
}

/// Total loss of one batch as used in training.
pub fn batch_loss(model: &Model, batch: &Batch, cfg: &TrainConfig, mode: BnMode) -> Result<f64> {
    let (out, _) = model.forward_cached(&batch.x, mode)?;
    Ok(batch_objective(model, batch, cfg, &out)?.0.total)
}

/// Total loss of one batch and its gradient w.r.t. every trainable scalar,
/// flattened in canonical parameter order.
pub fn batch_loss_and_grad(model: &Model, batch: &Batch, cfg: &TrainConfig, mode: BnMode) -> Result<(f64, Vec<f64>)> {
    let (out, cache) = model.forward_cached(&batch.x, mode)?;
    let (l, grads) = batch_objective(model, batch, cfg, &out)?;
    Ok((l.total, model.backward(&out, &cache, &grads)?.flat_params()))
}

/// Compares [`batch_loss_and_grad`] with central finite differences of
/// [`batch_loss`] over every trainable scalar.
pub fn model_grad_check(model: &Model, batch: &Batch, cfg: &TrainConfig, mode: BnMode, h: f64) -> Result<GradCheckReport> {
    let (_, analytic) = batch_loss_and_grad(model, batch, cfg, mode)?;
    let params = model.flat_params();
    let mut probe = model.clone();
    grad_check(&params, &analytic, h, |p| {
        probe.set_flat_params(p)?;
        batch_loss(&probe, batch, cfg, mode)
    })
}

/// Mask of tensors to update: the selected groups minus heads whose loss
/// term carries zero weight.
fn update_mask(model: &Model, groups: GroupSet, cfg: &TrainConfig) -> Result<Vec<bool>> {
    let sel = model.select_params(groups)?;
    let (_, kr, ka) = loss_coefficients(model.variant(), &cfg.loss_weights);
    let mask: Vec<bool> = model
        .param_tensors()
        .iter()
        .zip(&sel.mask)
        .map(|((info, _), on)| {
            let dead = (kr == 0.0 && info.name.starts_with("reg_head.")) || (ka == 0.0 && info.name.starts_with("attr_head."));
            *on && !dead
        })
        .collect();
    if !mask.iter().any(|m| *m) {
        return Err(Error::Config("no trainable parameters selected".into()));
    }
    Ok(mask)
}

fn check_targets(model: &Model, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if data.input_dim() != cfg.input_dim {
        return Err(Error::Config(format!(
            "model input_dim {} but trials give {}-d inputs",
            cfg.input_dim,
            data.input_dim()
        )));
    }
    if model.variant().has_regression() && data.reg_dim() != cfg.reg_target_dim {
        return Err(Error::Config(format!(
            "model reg_target_dim {:?} but data provides {:?}",
            cfg.reg_target_dim,
            data.reg_dim()
        )));
    }
    if model.variant().has_attribute() && data.attr_classes() != cfg.attr_classes {
        return Err(Error::Config(format!(
            "model attr_classes {:?} but data provides {:?}",
            cfg.attr_classes,
            data.attr_classes()
        )));
    }
    Ok(())
}

struct LoopSpec<'a> {
    mask: Vec<bool>,
    bn_mode: BnMode,
    lr_init: f64,
    epochs: usize,
    shuffle_seed: u64,
    cfg: &'a TrainConfig,
}

fn run_epochs(model: &mut Model, data: &Dataset, spec: LoopSpec) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Data("no training trials".into()));
    }
    let cfg = spec.cfg;
    let mut state = AdamState::new(model.num_params(), cfg.adam);
    let mut log = TrainLog::default();
    for epoch in 0..spec.epochs {
        let lr = lr_schedule(spec.lr_init, epoch, cfg);
        let (mut n, mut tot, mut ce, mut reg, mut attr) = (0usize, 0.0, 0.0, 0.0, 0.0);
        let (mut has_reg, mut has_attr) = (false, false);
        for (b, batch) in data.batches(cfg.batch_size, spec.shuffle_seed, epoch).enumerate() {
            if spec.bn_mode == BnMode::Batch && batch.len() < 2 {
                log.skipped_batches += 1;
                continue;
            }
            let (out, cache) = model.forward_cached(&batch.x, spec.bn_mode)?;
            let (l, grads) = batch_objective(model, &batch, cfg, &out)?;
            if !l.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            let g = model.backward(&out, &cache, &grads)?;
            if spec.bn_mode == BnMode::Batch {
                model.commit_running_stats(&cache);
            }
            model_step(model, &g, &spec.mask, &mut state, lr, cfg.weight_decay)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
            let k = batch.len() as f64;
            n += batch.len();
            tot += k * l.total;
            ce += k * l.ce;
            if let Some(r) = l.reg {
                reg += k * r;
                has_reg = true;
            }
            if let Some(a) = l.attr {
                attr += k * a;
                has_attr = true;
            }
        }
        let nf = n.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            lr,
            loss_total: tot / nf,
            loss_ce: ce / nf,
            loss_reg: has_reg.then_some(reg / nf),
            loss_attr: has_attr.then_some(attr / nf),
        });
    }
    Ok(log)
}

/// Trains every parameter of `model` on `data`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    check_targets(model, data)?;
    let all: GroupSet = model
        .group_sizes()
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(g, _)| g)
        .collect();
    let mask = update_mask(model, all, cfg)?;
    run_epochs(
        model,
        data,
        LoopSpec {
            mask,
            bn_mode: BnMode::Batch,
            lr_init: cfg.lr_init,
            epochs: cfg.epochs,
            shuffle_seed: derive_seed(cfg.seed, "train"),
            cfg,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Group selector such as `BN` or `NETWORK,SRELU`.
    pub groups: String,
    pub add_srelu: bool,
    pub epochs: usize,
    pub lr_init: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            groups: "NETWORK".into(),
            add_srelu: false,
            epochs: 2,
            lr_init: 0.001,
        }
    }
}

impl AdaptConfig {
    pub fn group_set(&self) -> Result<GroupSet> {
        let set = GroupSet::parse(&self.groups)?;
        let allowed = GroupSet::network().union([Group::Srelu].into_iter().collect());
        if let Some(g) = set.iter().find(|g| !allowed.contains(*g)) {
            return Err(Error::Config(format!(
                "adaptation group {} not allowed; use NETWORK, FC, BN or SRELU",
                g.as_str()
            )));
        }
        Ok(set)
    }
}

/// Fine-tunes the selected parameter groups on (typically spoof-domain)
/// data with a fresh optimiser. Batch-norm layers use batch statistics only
/// when BN is among the selected groups; otherwise they run on their stored
/// statistics and stay untouched.
pub fn adapt(model: &mut Model, data: &Dataset, cfg: &AdaptConfig, train_cfg: &TrainConfig) -> Result<TrainLog> {
    train_cfg.validate()?;
    let groups = cfg.group_set()?;
    if !(cfg.lr_init > 0.0 && cfg.lr_init.is_finite()) {
        return Err(Error::Config("adapt lr_init must be positive".into()));
    }
    if groups.contains(Group::Srelu) && !cfg.add_srelu && !model.has_srelu() {
        return Err(Error::Config("SRELU adaptation needs add_srelu or an sReLU model".into()));
    }
    check_targets(model, data)?;
    if cfg.add_srelu {
        model.add_srelu();
    }
    let mask = update_mask(model, groups, train_cfg)?;
    let bn_mode = if groups.contains(Group::Bn) { BnMode::Batch } else { BnMode::Running };
    run_epochs(
        model,
        data,
        LoopSpec {
            mask,
            bn_mode,
            lr_init: cfg.lr_init,
            epochs: cfg.epochs,
            shuffle_seed: derive_seed(train_cfg.seed, "adapt"),
            cfg: train_cfg,
        },
    )
}

/// Inputs-only forward pass over a whole dataset, in trial order.
pub fn predict(model: &Model, data: &Dataset, chunk: usize) -> Result<Vec<Matrix>> {
    data.sequential(chunk)
        .map(|b| model.forward(&b.x, BnMode::Running).map(|o| o.log_posteriors))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::batching::{RegTarget, TargetSources, TargetSpec};
    use crate::data::metadata::AttributeKind;
    use crate::data::synth::{synth_generate, SynthConfig, SynthData};
    use crate::data::trials::{generate_trials, TrialOptions, TrialPair};
    use crate::model::ModelConfig;

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert!((lr_at(10, &cfg) - 0.0001).abs() < 1e-18);
        assert_eq!(lr_at(9, &cfg), 0.001);
        let flat = TrainConfig {
            lr_decay_factor: 1.0,
            ..cfg.clone()
        };
        assert!((0..50).all(|e| lr_at(e, &flat) == 0.001));
        assert!((0..50).all(|e| lr_at(e + 1, &cfg) <= lr_at(e, &cfg)));
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let mut p = vec![0.3, -2.0];
        let mut st = AdamState::new(2, AdamConfig::default());
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![0.3, -2.0]);

        let mut w = vec![0.0];
        let mut st = AdamState::new(1, AdamConfig::default());
        adam_step(&mut w, &[1.0], &mut st, 0.1, 0.0).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-8, "{}", w[0]);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut w = vec![1.5f64];
        let mut st = AdamState::new(1, AdamConfig::default());
        for _ in 0..5 {
            let before = w[0].abs();
            let g = 2.0 * w[0];
            adam_step(&mut w, &[g], &mut st, 0.01, 0.0).unwrap();
            assert!(w[0].abs() < before);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut w = vec![0.0];
        let mut st = AdamState::new(1, AdamConfig::default());
        assert!(matches!(adam_step(&mut w, &[f64::NAN], &mut st, 0.1, 0.0), Err(Error::Numerical(_))));
    }

    fn small_data() -> (SynthData, Vec<TrialPair>) {
        let cfg = SynthConfig {
            asv_dim: 8,
            cm_dim: 6,
            ..SynthConfig::preset("tiny").unwrap()
        };
        let d = synth_generate(&cfg).unwrap();
        let t = generate_trials(&d.meta.records, &TrialOptions::default()).unwrap();
        (d, t)
    }

    fn small_model(d: &Dataset, variant: Variant, seed: u64) -> Model {
        Model::new(ModelConfig {
            input_dim: d.input_dim(),
            hidden_dims: vec![10, 10],
            variant,
            reg_target_dim: d.reg_dim(),
            attr_classes: d.attr_classes(),
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn sources(d: &SynthData) -> TargetSources<'_> {
        TargetSources {
            meta: &d.meta,
            cm: &d.cm,
            spec: TargetSpec {
                reg: Some(RegTarget::Spoof),
                attr: Some(AttributeKind::Attack),
            },
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 32,
            lr_init: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (d, t) = small_data();
        let ds = Dataset::new(&t, &d.asv, Some(sources(&d))).unwrap();
        for v in Variant::ALL {
            let mut a = small_model(&ds, v, 1);
            let mut b = small_model(&ds, v, 1);
            let la = train(&mut a, &ds, &quick_cfg()).unwrap();
            let lb = train(&mut b, &ds, &quick_cfg()).unwrap();
            assert_eq!(la, lb);
            assert_eq!(a, b);
            assert_eq!(la.to_tsv(), lb.to_tsv());
            let first = la.epochs.first().unwrap().loss_total;
            let last = la.epochs.last().unwrap().loss_total;
            assert!(last < first, "{v}: {first} -> {last}");
            assert_eq!(la.epochs[0].loss_reg.is_some(), v.has_regression());
            assert_eq!(la.epochs[0].loss_attr.is_some(), v.has_attribute());
        }
    }

    #[test]
    fn lambda_one_freezes_the_regression_head() {
        let (d, t) = small_data();
        let ds = Dataset::new(&t, &d.asv, Some(sources(&d))).unwrap();
        let mut m = small_model(&ds, Variant::Sps, 2);
        let before = m.clone();
        let cfg = TrainConfig {
            loss_weights: LossWeights { lambda: 1.0, gamma: 0.5 },
            ..quick_cfg()
        };
        train(&mut m, &ds, &cfg).unwrap();
        let pick = |m: &Model| -> Vec<Vec<f64>> {
            m.param_tensors()
                .into_iter()
                .filter(|(i, _)| i.name.starts_with("reg_head."))
                .map(|(_, t)| t.to_vec())
                .collect()
        };
        assert!(!pick(&before).is_empty());
        assert_eq!(pick(&before), pick(&m));
        assert_ne!(before.flat_params(), m.flat_params());
    }

    #[test]
    fn missing_targets_is_a_config_error() {
        let (d, t) = small_data();
        let with = Dataset::new(&t, &d.asv, Some(sources(&d))).unwrap();
        let bare = Dataset::new(&t, &d.asv, None).unwrap();
        let mut m = small_model(&with, Variant::Sps, 0);
        assert!(matches!(train(&mut m, &bare, &quick_cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn adaptation_touches_only_selected_groups() {
        let (d, t) = small_data();
        let ds = Dataset::new(&t, &d.asv, Some(sources(&d))).unwrap();
        let mut base = small_model(&ds, Variant::Base, 3);
        train(&mut base, &ds, &quick_cfg()).unwrap();
        for (sel, srelu) in [("BN", false), ("FC", false), ("NETWORK", false), ("SRELU", true), ("NETWORK,SRELU", true)] {
            let mut m = base.clone();
            let cfg = AdaptConfig {
                groups: sel.into(),
                add_srelu: srelu,
                epochs: 2,
                lr_init: 0.01,
            };
            adapt(&mut m, &ds, &cfg, &quick_cfg()).unwrap();
            let set = cfg.group_set().unwrap();
            let mut reference = base.clone();
            if srelu {
                reference.add_srelu();
            }
            let mut moved = false;
            for ((info, a), (_, b)) in reference.param_tensors().iter().zip(m.param_tensors()) {
                if set.contains(info.group) {
                    moved |= *a != b;
                } else {
                    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{sel}: {}", info.name);
                }
            }
            assert!(moved, "{sel}");
        }
    }

    #[test]
    fn network_alias_matches_fc_bn() {
        let (d, t) = small_data();
        let ds = Dataset::new(&t, &d.asv, None).unwrap();
        let base = small_model(&ds, Variant::Base, 4);
        let run = |g: &str| {
            let mut m = base.clone();
            let cfg = AdaptConfig {
                groups: g.into(),
                ..AdaptConfig::default()
            };
            adapt(&mut m, &ds, &cfg, &quick_cfg()).unwrap();
            m
        };
        assert_eq!(run("NETWORK"), run("FC,BN"));
    }

    #[test]
    fn srelu_insertion_with_no_epochs_is_identity() {
        let (d, t) = small_data();
        let ds = Dataset::new(&t, &d.asv, None).unwrap();
        let mut base = small_model(&ds, Variant::Base, 5);
        train(&mut base, &ds, &quick_cfg()).unwrap();
        let mut m = base.clone();
        let cfg = AdaptConfig {
            groups: "SRELU".into(),
            add_srelu: true,
            epochs: 0,
            lr_init: 0.01,
        };
        adapt(&mut m, &ds, &cfg, &quick_cfg()).unwrap();
        assert!(m.has_srelu());
        assert_eq!(predict(&base, &ds, 50).unwrap(), predict(&m, &ds, 50).unwrap());
    }

    #[test]
    fn adaptation_rejects_bad_selections() {
        let (d, t) = small_data();
        let ds = Dataset::new(&t, &d.asv, None).unwrap();
        let base = small_model(&ds, Variant::Base, 6);
        for (g, s) in [("SRELU", false), ("", false), ("REG_BRANCH", false), ("BOGUS", false)] {
            let mut m = base.clone();
            let cfg = AdaptConfig {
                groups: g.into(),
                add_srelu: s,
                ..AdaptConfig::default()
            };
            assert!(matches!(adapt(&mut m, &ds, &cfg, &quick_cfg()), Err(Error::Config(_))), "{g}");
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for v in Variant::ALL {
            for srelu in [false, true] {
                let o = crate::check::model_suite(v, srelu, 0, 2).unwrap();
                assert!(o.points == 2 && o.passed(), "{o:?}");
            }
        }
    }
}
