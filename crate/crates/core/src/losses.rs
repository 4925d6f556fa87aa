//! Training objectives and their gradients.
//!
//! All batch losses reduce with the arithmetic mean over examples, so the
//! interpolation weights of the composite objectives do not depend on the
//! batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor on the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Scalar loss together with its gradient w.r.t. the first argument.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
}

/// Target distribution over `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTarget {
    probs: Vec<f64>,
}

impl ClassTarget {
    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::Domain(format!(
                "class index {class} out of range for {num_classes} classes"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Ok(ClassTarget { probs })
    }

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("not a distribution: {probs:?}")));
        }
        Ok(ClassTarget { probs })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Label-smoothing weight `epsilon` towards the uniform distribution over `classes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub classes: usize,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Domain(format!(
                "smoothing epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// `q'(k) = (1 − ε)·q(k) + ε/K`
pub fn smooth_labels(target: &ClassTarget, cfg: &SmoothingConfig) -> Result<ClassTarget> {
    cfg.validate()?;
    if cfg.classes != target.num_classes() {
        return Err(Error::shape(
            "smooth_labels",
            format!("{} classes", target.num_classes()),
            format!("K={}", cfg.classes),
        ));
    }
    let k = cfg.classes as f64;
    let probs = target
        .probs
        .iter()
        .map(|q| (1.0 - cfg.epsilon) * q + cfg.epsilon / k)
        .collect();
    Ok(ClassTarget { probs })
}

/// Interpolation weights of the multi-task objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the main classification loss.
    pub lambda: f64,
    /// Share of the auxiliary budget given to the attribute classifier.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn total_mt(ce: f64, reg: f64, w: &LossWeights) -> f64 {
    w.lambda * ce + (1.0 - w.lambda) * reg
}

pub fn total_mt_attr(ce: f64, reg: f64, attr: f64, w: &LossWeights) -> f64 {
    w.lambda * ce + (1.0 - w.lambda) * ((1.0 - w.gamma) * reg + w.gamma * attr)
}

/// Mean over the batch of `−(1/C)·Σ_i y_i·log x_i`.
///
/// The `1/C` factor is kept even though it only rescales the usual
/// cross-entropy. `targets` is `batch × C` with one distribution per row.
pub fn cross_entropy(logp: &Matrix, targets: &Matrix) -> Result<LossOutput> {
    logp.check_same(targets, "cross_entropy")?;
    let (n, c) = logp.shape();
    if n == 0 {
        return Err(Error::Data("cross_entropy on an empty batch".into()));
    }
    let scale = 1.0 / (c as f64 * n as f64);
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for r in 0..n {
        for (j, (lp, y)) in logp.row(r).iter().zip(targets.row(r)).enumerate() {
            if *y != 0.0 {
                value -= y * lp;
            }
            grad.set(r, j, -y * scale);
        }
    }
    Ok(LossOutput {
        value: value * scale,
        grad,
    })
}

/// `‖out − target‖² / N` with `N` the batch size.
pub fn mse_loss(out: &Matrix, target: &Matrix) -> Result<LossOutput> {
    out.check_same(target, "mse_loss")?;
    let n = out.rows();
    if n == 0 {
        return Err(Error::Data("mse_loss on an empty batch".into()));
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, out.cols());
    for ((g, o), t) in grad.data_mut().iter_mut().zip(out.data()).zip(target.data()) {
        let d = o - t;
        value += d * d;
        *g = 2.0 * d / nf;
    }
    Ok(LossOutput {
        value: value / nf,
        grad,
    })
}

/// Denominator used by [`cosine_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineDenominator {
    /// `max(‖out‖·‖tar‖, ε)`: the normalised cosine.
    #[default]
    Product,
    /// `max(‖out‖, ‖tar‖, ε)`: not bounded to [−1, 1].
    LiteralMax,
}

/// Negated mean cosine similarity between rows of `out` and `target`.
pub fn cosine_loss(out: &Matrix, target: &Matrix, denom: CosineDenominator) -> Result<LossOutput> {
    out.check_same(target, "cosine_loss")?;
    let (n, d) = out.shape();
    if n == 0 {
        return Err(Error::Data("cosine_loss on an empty batch".into()));
    }
    let nf = n as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, d);
    for r in 0..n {
        let o = out.row(r);
        let t = target.row(r);
        let dot: f64 = o.iter().zip(t).map(|(a, b)| a * b).sum();
        let no = o.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        // d(similarity)/d(out) = t/den − dot·(d den/d out)/den²
        let (den, dden_coef) = match denom {
            CosineDenominator::Product => {
                let p = no * nt;
                if p > COSINE_EPS {
                    // d(no·nt)/d o = nt·o/no
                    (p, nt / no)
                } else {
                    (COSINE_EPS, 0.0)
                }
            }
            CosineDenominator::LiteralMax => {
                if no >= nt && no > COSINE_EPS {
                    (no, 1.0 / no)
                } else if nt > COSINE_EPS {
                    (nt, 0.0)
                } else {
                    (COSINE_EPS, 0.0)
                }
            }
        };
        let sim = dot / den;
        total += sim;
        let g = grad.row_mut(r);
        for j in 0..d {
            let ds = t[j] / den - dot * dden_coef * o[j] / (den * den);
            g[j] = -ds / nf;
        }
    }
    Ok(LossOutput {
        value: -total / nf,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::layers::log_softmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn targets(rows: &[ClassTarget]) -> Matrix {
        let r: Vec<Vec<f64>> = rows.iter().map(|t| t.probs().to_vec()).collect();
        Matrix::from_rows(&r)
    }

    #[test]
    fn cross_entropy_spot_values() {
        let perfect = Matrix::from_rows(&[[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        let y = targets(&[ClassTarget::one_hot(0, 3).unwrap()]);
        assert_eq!(cross_entropy(&perfect, &y).unwrap().value, 0.0);

        let l3 = (3.0f64).ln();
        let uniform = Matrix::from_rows(&[[-l3, -l3, -l3]]);
        let v = cross_entropy(&uniform, &y).unwrap().value;
        assert!((v - l3 / 3.0).abs() < 1e-15);
        assert!((v - 0.3662).abs() < 1e-4);

        let smooth = smooth_labels(
            &ClassTarget::one_hot(1, 3).unwrap(),
            &SmoothingConfig {
                epsilon: 1.0,
                classes: 3,
            },
        )
        .unwrap();
        let v = cross_entropy(&uniform, &targets(&[smooth])).unwrap().value;
        assert!((v - l3 / 3.0).abs() < 1e-15);

        assert!(cross_entropy(&uniform, &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn cross_entropy_gradient_through_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let y = targets(
            &(0..4)
                .map(|i| ClassTarget::one_hot(i % 3, 3).unwrap())
                .collect::<Vec<_>>(),
        );
        let out = log_softmax(&logits);
        let g = cross_entropy(&out, &y).unwrap().grad;
        let dx = crate::layers::log_softmax_backward(&out, &g).unwrap();
        let r = grad_check(logits.data(), dx.data(), 1e-6, |p| {
            let l = log_softmax(&Matrix::from_vec(4, 3, p.to_vec()).unwrap());
            Ok(cross_entropy(&l, &y)?.value)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn mse_spot_values() {
        let t = Matrix::from_rows(&[[1.0, 2.0]]);
        assert_eq!(mse_loss(&t, &t).unwrap().value, 0.0);
        let v = mse_loss(&Matrix::from_rows(&[[1.0, 1.0]]), &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(v.value, 2.0);
        assert!(mse_loss(&t, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn cosine_spot_values() {
        let a = Matrix::from_rows(&[[1.0, 2.0, -1.0]]);
        let v = cosine_loss(&a, &a, CosineDenominator::Product).unwrap().value;
        assert!((v + 1.0).abs() < 1e-15);

        let x = Matrix::from_rows(&[[1.0, 0.0]]);
        let y = Matrix::from_rows(&[[0.0, 3.0]]);
        assert_eq!(cosine_loss(&x, &y, CosineDenominator::Product).unwrap().value, 0.0);

        let zero = Matrix::zeros(1, 3);
        let out = cosine_loss(&zero, &a, CosineDenominator::Product).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.is_finite());
    }

    #[test]
    fn literal_cosine_can_leave_unit_interval() {
        let a = Matrix::from_rows(&[[2.0, 0.0]]);
        let v = cosine_loss(&a, &a, CosineDenominator::LiteralMax).unwrap().value;
        assert_eq!(v, -2.0);
    }

    #[test]
    fn regression_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = |r, c| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let out = m(5, 4);
        let tar = m(5, 4);
        let cases: [(&str, Box<dyn Fn(&Matrix) -> Result<LossOutput>>); 3] = [
            ("mse", Box::new(|o| mse_loss(o, &tar))),
            ("cos", Box::new(|o| cosine_loss(o, &tar, CosineDenominator::Product))),
            ("lit", Box::new(|o| cosine_loss(o, &tar, CosineDenominator::LiteralMax))),
        ];
        for (name, f) in cases.iter() {
            let g = f(&out).unwrap().grad;
            let r = grad_check(out.data(), g.data(), 1e-6, |p| {
                Ok(f(&Matrix::from_vec(5, 4, p.to_vec()).unwrap())?.value)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
        }
    }

    #[test]
    fn smoothing_spot_values() {
        let y = ClassTarget::one_hot(0, 3).unwrap();
        let cfg = |e| SmoothingConfig {
            epsilon: e,
            classes: 3,
        };
        assert_eq!(smooth_labels(&y, &cfg(0.0)).unwrap(), y);
        let half = smooth_labels(&y, &cfg(0.5)).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in half.probs().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let seven = smooth_labels(
            &ClassTarget::one_hot(4, 7).unwrap(),
            &SmoothingConfig {
                epsilon: 1.0,
                classes: 7,
            },
        )
        .unwrap();
        assert!(seven.probs().iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-15));
        assert!(matches!(smooth_labels(&y, &cfg(1.5)), Err(Error::Domain(_))));
        assert!(matches!(smooth_labels(&y, &cfg(-0.1)), Err(Error::Domain(_))));
    }

    #[test]
    fn composite_spot_values() {
        let w = |lambda, gamma| LossWeights { lambda, gamma };
        assert_eq!(total_mt(2.0, 4.0, &w(1.0, 0.5)), 2.0);
        assert_eq!(total_mt(2.0, 4.0, &w(0.0, 0.5)), 4.0);
        assert_eq!(total_mt(2.0, 4.0, &w(0.5, 0.5)), 3.0);
        assert!((total_mt_attr(1.0, 2.0, 4.0, &w(0.3, 0.5)) - 2.4).abs() < 1e-12);
        assert_eq!(total_mt_attr(1.5, 2.0, 4.0, &w(1.0, 0.3)), 1.5);
        assert_eq!(total_mt_attr(1.0, 2.0, 4.0, &w(0.5, 1.0)), 0.5 + 0.5 * 4.0);
        assert_eq!(total_mt_attr(1.0, 2.0, 4.0, &w(0.4, 0.0)), total_mt(1.0, 2.0, &w(0.4, 0.0)));
        assert!(w(1.1, 0.5).validate().is_err());
    }

    proptest! {
        #[test]
        fn smoothing_sums_to_one(class in 0usize..12, extra in 1usize..12, eps in 0.0f64..=1.0) {
            let k = class + extra;
            let y = ClassTarget::one_hot(class, k).unwrap();
            let s = smooth_labels(&y, &SmoothingConfig { epsilon: eps, classes: k }).unwrap();
            let sum: f64 = s.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn mse_is_quadratic_in_residual(vals in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let out = Matrix::from_vec(2, 3, vals.clone()).unwrap();
            let tar = Matrix::zeros(2, 3);
            let l1 = mse_loss(&out, &tar).unwrap().value;
            let l2 = mse_loss(&out.scale(2.0), &tar).unwrap().value;
            prop_assert!((l2 - 4.0 * l1).abs() <= 1e-9 * l2.max(1.0));
        }

        #[test]
        fn cosine_is_bounded_and_scale_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            k in 0.1f64..10.0,
        ) {
            let x = Matrix::from_vec(1, 4, a).unwrap();
            let y = Matrix::from_vec(1, 4, b).unwrap();
            let l = cosine_loss(&x, &y, CosineDenominator::Product).unwrap().value;
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
            let norms = x.data().iter().map(|v| v * v).sum::<f64>().sqrt()
                * y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norms > 1e-3);
            let ls = cosine_loss(&x.scale(k), &y, CosineDenominator::Product).unwrap().value;
            prop_assert!((l - ls).abs() < 1e-12);
        }

        #[test]
        fn composites_are_affine_in_lambda(ce in 0.0f64..5.0, reg in -1.0f64..5.0, l in 0.0f64..=1.0) {
            let w = LossWeights { lambda: l, gamma: 0.5 };
            let expect = total_mt(ce, reg, &LossWeights { lambda: 0.0, gamma: 0.5 }) * (1.0 - l)
                + total_mt(ce, reg, &LossWeights { lambda: 1.0, gamma: 0.5 }) * l;
            prop_assert!((total_mt(ce, reg, &w) - expect).abs() < 1e-12);
        }
    }
}
