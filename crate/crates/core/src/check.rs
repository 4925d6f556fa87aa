//! Self-check suites: finite-difference gradient checks for every layer,
//! loss and model variant, and an O(n²) cross-check of the EER estimator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::batching::Batch;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::layers::{log_softmax, log_softmax_backward, relu, relu_backward, Affine, BatchNorm, BnMode, SRelu};
use crate::losses::{cosine_loss, cross_entropy, mse_loss, smooth_labels, ClassTarget, CosineDenominator, LossOutput, LossWeights, SmoothingConfig};
use crate::model::{Group, Model, ModelConfig, Variant};
use crate::scoring::compute_eer;
use crate::seed::rng_for;
use crate::tensor::Matrix;
use crate::trainer::{batch_loss_and_grad, model_grad_check, TrainConfig};

/// Tolerance for smooth primitives and losses.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for whole models (piecewise-linear activations, longer chains).
pub const MODEL_TOL: f64 = 1e-4;
pub const EER_TOL: f64 = 1e-9;

/// Worst result of one suite over its sample points.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.points > 0 && self.max_rel_error < self.tolerance
    }

    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            points: 0,
            max_rel_error: 0.0,
            tolerance,
        }
    }

    fn add(&mut self, r: &GradCheckReport) {
        self.points += 1;
        self.max_rel_error = self.max_rel_error.max(r.max_rel_error);
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Entries at least `margin` away from zero.
fn rand_off_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, margin: f64) -> Matrix {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Matrix::from_vec(r, c, data).expect("shape")
}

fn probe(y: &Matrix, w: &Matrix) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

const H: f64 = 1e-5;

fn check_affine(rng: &mut ChaCha8Rng) -> Result<[GradCheckReport; 2]> {
    let x = rand_matrix(rng, 4, 3);
    let layer = Affine::new(rand_matrix(rng, 2, 3), vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])?;
    let w = rand_matrix(rng, 4, 2);
    let g = layer.backward(&x, &w)?;
    let mut params = layer.weight.data().to_vec();
    params.extend(&layer.bias);
    let mut analytic = g.weight.data().to_vec();
    analytic.extend(&g.bias);
    let rp = grad_check(&params, &analytic, H, |p| {
        let l = Affine::new(Matrix::from_vec(2, 3, p[..6].to_vec())?, p[6..].to_vec())?;
        Ok(probe(&l.forward(&x)?, &w))
    })?;
    let rx = grad_check(x.data(), g.input.data(), H, |p| Ok(probe(&layer.forward(&Matrix::from_vec(4, 3, p.to_vec())?)?, &w)))?;
    Ok([rp, rx])
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = rand_off_zero(rng, 4, 5, 1e-3);
    let w = rand_matrix(rng, 4, 5);
    let dx = relu_backward(&x, &w)?;
    grad_check(x.data(), dx.data(), H, |p| Ok(probe(&relu(&Matrix::from_vec(4, 5, p.to_vec())?), &w)))
}

fn check_srelu(rng: &mut ChaCha8Rng) -> Result<[GradCheckReport; 2]> {
    let z = rand_off_zero(rng, 5, 3, 1e-3);
    let s = SRelu {
        scale: (0..3).map(|_| rng.random_range(0.3..2.0)).collect(),
    };
    let w = rand_matrix(rng, 5, 3);
    let (ds, dz) = s.backward(&z, &w)?;
    let ra = grad_check(&s.scale, &ds, H, |p| Ok(probe(&SRelu { scale: p.to_vec() }.forward(&z)?, &w)))?;
    let rz = grad_check(z.data(), dz.data(), H, |p| Ok(probe(&s.forward(&Matrix::from_vec(5, 3, p.to_vec())?)?, &w)))?;
    Ok([ra, rz])
}

fn check_batchnorm(rng: &mut ChaCha8Rng, mode: BnMode) -> Result<[GradCheckReport; 3]> {
    let x = rand_matrix(rng, 8, 4);
    let mut bn = BatchNorm::new(4, 0.1, 1e-5)?;
    bn.gamma = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.beta = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    bn.running_mean = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    bn.running_var = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = rand_matrix(rng, 8, 4);
    let (_, cache) = bn.forward(&x, mode)?;
    let g = bn.backward(&cache, &w)?;
    let with = |gamma: &[f64], beta: &[f64]| {
        let mut b = bn.clone();
        b.gamma = gamma.to_vec();
        b.beta = beta.to_vec();
        b
    };
    let rg = grad_check(&bn.gamma, &g.gamma, H, |p| Ok(probe(&with(p, &bn.beta).forward(&x, mode)?.0, &w)))?;
    let rb = grad_check(&bn.beta, &g.beta, H, |p| Ok(probe(&with(&bn.gamma, p).forward(&x, mode)?.0, &w)))?;
    let rx = grad_check(x.data(), g.input.data(), H, |p| Ok(probe(&bn.forward(&Matrix::from_vec(8, 4, p.to_vec())?, mode)?.0, &w)))?;
    Ok([rg, rb, rx])
}

fn check_log_softmax(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = rand_matrix(rng, 4, 3).scale(3.0);
    let w = rand_matrix(rng, 4, 3);
    let dx = log_softmax_backward(&log_softmax(&x), &w)?;
    grad_check(x.data(), dx.data(), H, |p| Ok(probe(&log_softmax(&Matrix::from_vec(4, 3, p.to_vec())?), &w)))
}

/// Gradient checks of every layer primitive, `points` random draws each.
pub fn primitive_suite(seed: u64, points: usize) -> Result<Vec<CheckOutcome>> {
    let names = ["affine", "relu", "srelu", "batchnorm (batch)", "batchnorm (running)", "log_softmax"];
    let mut out: Vec<CheckOutcome> = names.iter().map(|n| CheckOutcome::new(*n, SMOOTH_TOL)).collect();
    for i in 0..points {
        let rng = &mut rng_for(seed, &format!("primitives-{i}"));
        check_affine(rng)?.iter().for_each(|r| out[0].add(r));
        out[1].add(&check_relu(rng)?);
        check_srelu(rng)?.iter().for_each(|r| out[2].add(r));
        check_batchnorm(rng, BnMode::Batch)?.iter().for_each(|r| out[3].add(r));
        check_batchnorm(rng, BnMode::Running)?.iter().for_each(|r| out[4].add(r));
        out[5].add(&check_log_softmax(rng)?);
    }
    for o in &mut out {
        o.points = points;
    }
    Ok(out)
}

/// Gradient checks of every loss w.r.t. its prediction argument.
pub fn loss_suite(seed: u64, points: usize) -> Result<Vec<CheckOutcome>> {
    let mut ce = CheckOutcome::new("cross_entropy (smoothed targets, through log_softmax)", SMOOTH_TOL);
    let mut mse = CheckOutcome::new("mse", SMOOTH_TOL);
    let mut cos = CheckOutcome::new("cosine", SMOOTH_TOL);
    let mut lit = CheckOutcome::new("cosine (literal max denominator)", SMOOTH_TOL);
    let mut comp = CheckOutcome::new("composite weights", SMOOTH_TOL);
    for i in 0..points {
        let rng = &mut rng_for(seed, &format!("losses-{i}"));
        let (n, c) = (5, 4);
        let x = rand_matrix(rng, n, c).scale(2.0);
        let eps = rng.random_range(0.0..1.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let t = ClassTarget::one_hot(r % c, c)?;
                Ok(smooth_labels(&t, &SmoothingConfig { epsilon: eps, classes: c })?.probs().to_vec())
            })
            .collect::<Result<_>>()?;
        let targets = Matrix::from_rows(&rows);
        let f = |x: &Matrix| -> Result<LossOutput> { cross_entropy(&log_softmax(x), &targets) };
        let logp = log_softmax(&x);
        let dl = cross_entropy(&logp, &targets)?.grad;
        let dx = log_softmax_backward(&logp, &dl)?;
        ce.add(&grad_check(x.data(), dx.data(), H, |p| Ok(f(&Matrix::from_vec(n, c, p.to_vec())?)?.value))?);

        let out = rand_matrix(rng, n, c);
        let tar = rand_matrix(rng, n, c);
        type LossFn<'a> = Box<dyn Fn(&Matrix) -> Result<LossOutput> + 'a>;
        let cases: [(&mut CheckOutcome, LossFn); 3] = [
            (&mut mse, Box::new(|o| mse_loss(o, &tar))),
            (&mut cos, Box::new(|o| cosine_loss(o, &tar, CosineDenominator::Product))),
            (&mut lit, Box::new(|o| cosine_loss(o, &tar, CosineDenominator::LiteralMax))),
        ];
        for (slot, f) in cases {
            let g = f(&out)?.grad;
            slot.add(&grad_check(out.data(), g.data(), H, |p| Ok(f(&Matrix::from_vec(n, c, p.to_vec())?)?.value))?);
        }

        // the composite is linear in its three parts; its gradient is the weight vector
        let w = LossWeights {
            lambda: rng.random_range(0.0..1.0),
            gamma: rng.random_range(0.0..1.0),
        };
        let parts = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
        let analytic = [w.lambda, (1.0 - w.lambda) * (1.0 - w.gamma), (1.0 - w.lambda) * w.gamma];
        comp.add(&grad_check(&parts, &analytic, H, |p| Ok(crate::losses::total_mt_attr(p[0], p[1], p[2], &w)))?);
    }
    Ok(vec![ce, mse, cos, lit, comp])
}

/// Small random model and batch for gradient checks. BN and sReLU
/// parameters are moved off their initial values so their gradients are
/// generic.
pub fn random_model_case(variant: Variant, srelu: bool, seed: u64) -> Result<(Model, Batch)> {
    let mut rng = rng_for(seed, "gradcheck-case");
    let mut m = Model::new(ModelConfig {
        input_dim: 12,
        hidden_dims: vec![7, 5],
        variant,
        use_srelu: srelu,
        reg_target_dim: Some(4),
        attr_classes: Some(3),
        seed,
        ..ModelConfig::default()
    })?;
    for (info, t) in m.param_tensors_mut() {
        if matches!(info.group, Group::Srelu | Group::Bn) {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.4..0.4));
        }
    }
    let n = 8;
    let x = rand_matrix(&mut rng, n, 12);
    let reg = rand_matrix(&mut rng, n, 4);
    let batch = Batch {
        indices: (0..n).collect(),
        x,
        labels: (0..n).map(|i| i % 3).collect(),
        reg: Some(reg),
        attr: Some((0..n).map(|i| (i * 2) % 3).collect()),
    };
    Ok((m, batch))
}

/// Whether finite differences are meaningful at this point: every ReLU
/// pre-activation at least 1e-3 from its kink, no unit active on the whole
/// batch under batch statistics (BN makes such units scale-invariant, so
/// their scale gradient is pure roundoff), and every gradient coordinate
/// either exactly zero or at least 1e-6 in magnitude.
pub fn non_degenerate(m: &Model, b: &Batch, cfg: &TrainConfig, mode: BnMode) -> Result<bool> {
    let (_, cache) = m.forward_cached(&b.x, mode)?;
    if cache.kink_margin(m) < 1e-3 || (mode == BnMode::Batch && cache.always_active_units(m) > 0) {
        return Ok(false);
    }
    let (_, g) = batch_loss_and_grad(m, b, cfg, mode)?;
    Ok(g.iter().all(|v| *v == 0.0 || v.abs() >= 1e-6))
}

/// Objective settings that switch on every term of every variant.
pub fn gradcheck_train_config() -> TrainConfig {
    TrainConfig {
        smoothing_epsilon: 0.3,
        loss_weights: LossWeights { lambda: 0.4, gamma: 0.6 },
        ..TrainConfig::default()
    }
}

/// Whole-model gradient check at `points` non-degenerate random points.
/// ReLU models use batch statistics; sReLU models use running statistics
/// (set from a shifted batch) because batch-normalised sReLU scales are
/// nearly gradient-free.
pub fn model_suite(variant: Variant, srelu: bool, seed: u64, points: usize) -> Result<CheckOutcome> {
    let cfg = gradcheck_train_config();
    let mode = if srelu { BnMode::Running } else { BnMode::Batch };
    let act = if srelu { "srelu" } else { "relu" };
    let mut out = CheckOutcome::new(format!("model {variant} ({act})"), MODEL_TOL);
    let mut draw = 0u64;
    while out.points < points && draw < 100 * points as u64 {
        draw += 1;
        let (mut m, b) = random_model_case(variant, srelu, crate::seed::derive_seed(seed, &format!("{variant}-{act}-{draw}")))?;
        if mode == BnMode::Running {
            m.forward_train(&b.x.map(|x| 1.3 * x + 0.2))?;
        }
        if !non_degenerate(&m, &b, &cfg, mode)? {
            continue;
        }
        out.add(&model_grad_check(&m, &b, &cfg, mode, 1e-5)?);
    }
    Ok(out)
}

/// Threshold sweep over midpoints between distinct scores, counting
/// accepts and rejects directly, with linear interpolation at the first
/// point where FRR ≥ FAR. Returns EER in percent.
pub fn brute_force_eer(pos: &[f64], neg: &[f64]) -> f64 {
    let mut u: Vec<f64> = pos.iter().chain(neg).copied().collect();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut taus = vec![u[0] - 1.0];
    taus.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    taus.push(u[u.len() - 1] + 1.0);
    let rate = |t: f64| {
        let far = neg.iter().filter(|s| **s >= t).count() as f64 / neg.len() as f64;
        let frr = pos.iter().filter(|s| **s < t).count() as f64 / pos.len() as f64;
        (far, frr)
    };
    let pts: Vec<(f64, f64)> = taus.iter().map(|t| rate(*t)).collect();
    for k in 1..pts.len() {
        let (far1, frr1) = pts[k];
        if frr1 >= far1 {
            let (far0, frr0) = pts[k - 1];
            let d0 = far0 - frr0;
            let d1 = frr1 - far1;
            let w = if d0 + d1 > 0.0 { d0 / (d0 + d1) } else { 0.0 };
            return 100.0 * (far0 + w * (far1 - far0));
        }
    }
    unreachable!("the last threshold rejects everything")
}

/// Random score lists: half with heavy ties (quantised), sizes up to `max_len`.
pub fn random_score_lists(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<f64>, Vec<f64>) {
    let np = rng.random_range(1..=max_len);
    let nn = rng.random_range(1..=max_len);
    let coarse = rng.random_bool(0.5);
    let shift = rng.random_range(0.0..2.0);
    let mut draw = |s: f64| {
        let v: f64 = rng.random_range(-2.0..2.0) + s;
        if coarse {
            (v * 4.0).round() / 4.0
        } else {
            v
        }
    };
    let pos = (0..np).map(|_| draw(shift)).collect();
    let neg = (0..nn).map(|_| draw(0.0)).collect();
    (pos, neg)
}

/// `compute_eer` against [`brute_force_eer`] on `instances` random lists.
pub fn eer_suite(seed: u64, instances: usize, max_len: usize) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("eer vs brute force", EER_TOL);
    let mut rng = rng_for(seed, "eer-oracle");
    for _ in 0..instances {
        let (pos, neg) = random_score_lists(&mut rng, max_len);
        let d = (compute_eer(&pos, &neg)?.eer - brute_force_eer(&pos, &neg)).abs();
        out.points += 1;
        out.max_rel_error = out.max_rel_error.max(d);
    }
    Ok(out)
}

/// Everything the `check` command runs.
pub fn full_suite(seed: u64, points: usize) -> Result<Vec<CheckOutcome>> {
    let mut all = primitive_suite(seed, points)?;
    all.extend(loss_suite(seed, points)?);
    for v in Variant::ALL {
        for srelu in [false, true] {
            all.push(model_suite(v, srelu, seed, points)?);
        }
    }
    all.push(eer_suite(seed, 100, 1000)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_hand_values() {
        assert_eq!(brute_force_eer(&[2.0, 3.0], &[0.0, 1.0]), 0.0);
        assert!((brute_force_eer(&[1.0, 2.0], &[1.0, 2.0]) - 50.0).abs() < 1e-12);
        assert_eq!(brute_force_eer(&[0.0], &[1.0]), 100.0);
    }

    #[test]
    fn primitive_and_loss_suites_pass() {
        for o in primitive_suite(1, 3).unwrap().into_iter().chain(loss_suite(1, 3).unwrap()) {
            assert!(o.passed(), "{o:?}");
        }
    }

    #[test]
    fn model_suite_passes_for_every_variant() {
        for v in Variant::ALL {
            for srelu in [false, true] {
                let o = model_suite(v, srelu, 2, 2).unwrap();
                assert_eq!(o.points, 2);
                assert!(o.passed(), "{o:?}");
            }
        }
    }

    #[test]
    fn eer_suite_passes() {
        assert!(eer_suite(3, 30, 200).unwrap().passed());
    }
}
