//! Layer primitives with hand-written backward rules.
//!
//! Every primitive is a pure function of its parameters and inputs. Backward
//! passes take whatever the forward pass needs (the input, or a cache) and the
//! upstream gradient, and return gradients for parameters and inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Fully-connected layer `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AffineGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(
                "Affine::new",
                weight.shape_str(),
                format!("bias[{}]", bias.len()),
            ));
        }
        Ok(Affine { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("affine", x.shape_str(), self.weight.shape_str()));
        }
        let mut out = x.matmul_nt(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<AffineGrad> {
        if dy.cols() != self.out_dim() || dy.rows() != x.rows() {
            return Err(Error::shape("affine backward", dy.shape_str(), x.shape_str()));
        }
        Ok(AffineGrad {
            weight: dy.matmul_tn(x)?,
            bias: dy.col_sums(),
            input: dy.matmul(&self.weight)?,
        })
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at exactly zero is 0.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    x.check_same(dy, "relu backward")?;
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(dx)
}

/// Scaled ReLU `max(diag(a)·z, 0)`. Only the diagonal of the scaling matrix
/// is stored; there is no bias and the negative side is not parameterised.
#[derive(Debug, Clone, PartialEq)]
pub struct SRelu {
    pub scale: Vec<f64>,
}

impl SRelu {
    pub fn identity(dim: usize) -> Self {
        SRelu {
            scale: vec![1.0; dim],
        }
    }

    fn check(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.scale.len() {
            return Err(Error::shape(
                "srelu",
                z.shape_str(),
                format!("diag[{}]", self.scale.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        self.check(z)?;
        let mut out = z.clone();
        for r in 0..out.rows() {
            for (v, a) in out.row_mut(r).iter_mut().zip(&self.scale) {
                let s = a * *v;
                *v = if s > 0.0 { s } else { 0.0 };
            }
        }
        Ok(out)
    }

    /// Returns `(d_scale, d_z)`.
    pub fn backward(&self, z: &Matrix, dy: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        self.check(z)?;
        z.check_same(dy, "srelu backward")?;
        let mut d_scale = vec![0.0; self.scale.len()];
        let mut dz = Matrix::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            let zr = z.row(r);
            let gr = dy.row(r);
            let out = dz.row_mut(r);
            for j in 0..zr.len() {
                if self.scale[j] * zr[j] > 0.0 {
                    out[j] = self.scale[j] * gr[j];
                    d_scale[j] += gr[j] * zr[j];
                }
            }
        }
        Ok((d_scale, dz))
    }
}

/// Which statistics batch normalisation normalises with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Per-batch statistics (training).
    Batch,
    /// Running statistics (evaluation, or frozen normalisation).
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub mode: BnMode,
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased (divide-by-n) batch variance.
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrad {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub input: Matrix,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("batchnorm momentum {momentum} not in (0,1]")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("batchnorm epsilon {epsilon} must be > 0")));
        }
        Ok(BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Matrix, mode: BnMode) -> Result<(Matrix, BnCache)> {
        let dim = self.dim();
        if x.cols() != dim {
            return Err(Error::shape("batchnorm", x.shape_str(), format!("dim {dim}")));
        }
        let n = x.rows();
        let (mean, var) = match mode {
            BnMode::Batch => {
                if n < 2 {
                    return Err(Error::Data(format!(
                        "batchnorm in batch mode needs at least 2 rows, got {n}"
                    )));
                }
                let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n as f64).collect();
                let mut var = vec![0.0; dim];
                for row in x.row_iter() {
                    for j in 0..dim {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            BnMode::Running => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, dim);
        let mut out = Matrix::zeros(n, dim);
        for r in 0..n {
            let xr = x.row(r);
            for j in 0..dim {
                let h = (xr[j] - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                out.set(r, j, self.gamma[j] * h + self.beta[j]);
            }
        }
        let cache = BnCache {
            mode,
            xhat,
            inv_std,
            batch_mean: if mode == BnMode::Batch { mean } else { Vec::new() },
            batch_var: if mode == BnMode::Batch { var } else { Vec::new() },
        };
        Ok((out, cache))
    }

    /// Folds the batch statistics of a batch-mode forward pass into the
    /// running estimates. The running variance uses the unbiased estimate.
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != BnMode::Batch {
            return;
        }
        let n = cache.xhat.rows() as f64;
        let m = self.momentum;
        for j in 0..self.dim() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * cache.batch_mean[j];
            let unbiased = cache.batch_var[j] * n / (n - 1.0);
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * unbiased;
        }
    }

    pub fn backward(&self, cache: &BnCache, dy: &Matrix) -> Result<BnGrad> {
        cache.xhat.check_same(dy, "batchnorm backward")?;
        let (n, dim) = dy.shape();
        let mut d_gamma = vec![0.0; dim];
        let mut d_beta = vec![0.0; dim];
        for r in 0..n {
            let g = dy.row(r);
            let h = cache.xhat.row(r);
            for j in 0..dim {
                d_gamma[j] += g[j] * h[j];
                d_beta[j] += g[j];
            }
        }
        let mut dx = Matrix::zeros(n, dim);
        match cache.mode {
            BnMode::Running => {
                for r in 0..n {
                    let g = dy.row(r);
                    let out = dx.row_mut(r);
                    for j in 0..dim {
                        out[j] = g[j] * self.gamma[j] * cache.inv_std[j];
                    }
                }
            }
            BnMode::Batch => {
                // dx = γ·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                let nf = n as f64;
                for r in 0..n {
                    let g = dy.row(r);
                    let h = cache.xhat.row(r);
                    let out = dx.row_mut(r);
                    for j in 0..dim {
                        out[j] = self.gamma[j] * cache.inv_std[j] / nf
                            * (nf * g[j] - d_beta[j] - h[j] * d_gamma[j]);
                    }
                }
            }
        }
        Ok(BnGrad {
            gamma: d_gamma,
            beta: d_beta,
            input: dx,
        })
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Backward of [`log_softmax`] given its output: `dx = dy − softmax·Σdy`.
pub fn log_softmax_backward(out: &Matrix, dy: &Matrix) -> Result<Matrix> {
    out.check_same(dy, "log_softmax backward")?;
    let mut dx = dy.clone();
    for r in 0..out.rows() {
        let total: f64 = dy.row(r).iter().sum();
        for (g, lp) in dx.row_mut(r).iter_mut().zip(out.row(r)) {
            *g -= lp.exp() * total;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckReport};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Random matrix with every entry at least `margin` away from zero.
    fn rand_away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, margin: f64) -> Matrix {
        let data = (0..r * c)
            .map(|_| {
                let mag = rng.random_range(margin..1.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    /// Weighted-sum probe so the scalar objective has a non-trivial gradient.
    fn probe(y: &Matrix, w: &Matrix) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn affine_identity_and_hand_values() {
        let id = Affine::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]), vec![0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(id.forward(&x).unwrap().data(), &[3.0, 4.0]);

        let two = Affine::new(Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]), vec![1.0, 1.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]);
        assert_eq!(two.forward(&x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn affine_shape_error() {
        let a = Affine::new(Matrix::zeros(2, 3), vec![0.0; 2]).unwrap();
        let err = a.forward(&Matrix::zeros(1, 4)).unwrap_err().to_string();
        assert!(err.contains("1x4") && err.contains("2x3"), "{err}");
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(&mut rng, 4, 3);
        let layer = Affine::new(rand_matrix(&mut rng, 2, 3), vec![0.3, -0.2]).unwrap();
        let probe_w = rand_matrix(&mut rng, 4, 2);

        let y = layer.forward(&x).unwrap();
        let g = layer.backward(&x, &probe_w).unwrap();
        assert_eq!(y.shape(), (4, 2));

        // weights + bias
        let mut params: Vec<f64> = layer.weight.data().to_vec();
        params.extend(&layer.bias);
        let mut analytic = g.weight.data().to_vec();
        analytic.extend(&g.bias);
        let report = grad_check(&params, &analytic, 1e-6, |p| {
            let l = Affine::new(
                Matrix::from_vec(2, 3, p[..6].to_vec()).unwrap(),
                p[6..].to_vec(),
            )
            .unwrap();
            Ok(probe(&l.forward(&x)?, &probe_w))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        // input
        let report = grad_check(x.data(), g.input.data(), 1e-6, |p| {
            let xx = Matrix::from_vec(4, 3, p.to_vec()).unwrap();
            Ok(probe(&layer.forward(&xx)?, &probe_w))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn relu_values_and_gradient() {
        assert_eq!(relu(&Matrix::from_rows(&[[-1.0, 2.0]])).data(), &[0.0, 2.0]);
        assert_eq!(relu(&Matrix::zeros(2, 3)), Matrix::zeros(2, 3));
        let zero_grad = relu_backward(&Matrix::zeros(1, 2), &Matrix::from_rows(&[[1.0, 1.0]]))
            .unwrap();
        assert_eq!(zero_grad.data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_away_from_zero(&mut rng, 4, 5, 1e-3);
        let w = rand_matrix(&mut rng, 4, 5);
        let dx = relu_backward(&x, &w).unwrap();
        let report = grad_check(x.data(), dx.data(), 1e-6, |p| {
            Ok(probe(&relu(&Matrix::from_vec(4, 5, p.to_vec()).unwrap()), &w))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn srelu_identity_matches_relu_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = rand_matrix(&mut rng, 6, 4);
        let dy = rand_matrix(&mut rng, 6, 4);
        let s = SRelu::identity(4);
        assert_eq!(s.forward(&z).unwrap(), relu(&z));
        let (_, dz) = s.backward(&z, &dy).unwrap();
        assert_eq!(dz, relu_backward(&z, &dy).unwrap());
    }

    #[test]
    fn srelu_scales_before_max() {
        let s = SRelu {
            scale: vec![2.0, 0.5],
        };
        let out = s.forward(&Matrix::from_rows(&[[1.0, -4.0]])).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0]);
        assert!(s.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn srelu_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = rand_away_from_zero(&mut rng, 5, 3, 1e-3);
        let s = SRelu {
            scale: vec![1.3, 0.7, 2.0],
        };
        let w = rand_matrix(&mut rng, 5, 3);
        let (ds, dz) = s.backward(&z, &w).unwrap();
        let r = grad_check(&s.scale, &ds, 1e-6, |p| {
            Ok(probe(&SRelu { scale: p.to_vec() }.forward(&z)?, &w))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = grad_check(z.data(), dz.data(), 1e-6, |p| {
            Ok(probe(&s.forward(&Matrix::from_vec(5, 3, p.to_vec()).unwrap())?, &w))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let bn = BatchNorm::new(3, 0.1, 1e-5).unwrap();
        let x = Matrix::from_rows(&[[0.5, -2.0, 3.0]]);
        let (y, _) = bn.forward(&x, BnMode::Running).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_train_hand_values_and_running_update() {
        let mut bn = BatchNorm::new(1, 0.1, 1e-5).unwrap();
        let x = Matrix::from_rows(&[[0.0], [2.0]]);
        let (y, cache) = bn.forward(&x, BnMode::Batch).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0) + expect).abs() < 1e-12);
        assert!((y.get(1, 0) - expect).abs() < 1e-12);
        bn.update_running(&cache);
        // mean 1, unbiased var 2
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_rejects_single_row_batches() {
        let bn = BatchNorm::new(2, 0.1, 1e-5).unwrap();
        assert!(bn.forward(&Matrix::zeros(1, 2), BnMode::Batch).is_err());
        assert!(bn.forward(&Matrix::zeros(1, 2), BnMode::Running).is_ok());
        assert!(BatchNorm::new(2, 0.1, 0.0).is_err());
    }

    fn bn_check(mode: BnMode) -> [GradCheckReport; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_matrix(&mut rng, 8, 4);
        let mut bn = BatchNorm::new(4, 0.1, 1e-5).unwrap();
        bn.gamma = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        bn.beta = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        bn.running_mean = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        bn.running_var = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        let w = rand_matrix(&mut rng, 8, 4);
        let (_, cache) = bn.forward(&x, mode).unwrap();
        let g = bn.backward(&cache, &w).unwrap();

        let with = |gamma: &[f64], beta: &[f64]| {
            let mut b = bn.clone();
            b.gamma = gamma.to_vec();
            b.beta = beta.to_vec();
            b
        };
        let rg = grad_check(&bn.gamma, &g.gamma, 1e-6, |p| {
            Ok(probe(&with(p, &bn.beta).forward(&x, mode)?.0, &w))
        })
        .unwrap();
        let rb = grad_check(&bn.beta, &g.beta, 1e-6, |p| {
            Ok(probe(&with(&bn.gamma, p).forward(&x, mode)?.0, &w))
        })
        .unwrap();
        let rx = grad_check(x.data(), g.input.data(), 1e-6, |p| {
            let xx = Matrix::from_vec(8, 4, p.to_vec()).unwrap();
            Ok(probe(&bn.forward(&xx, mode)?.0, &w))
        })
        .unwrap();
        [rg, rb, rx]
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        for mode in [BnMode::Batch, BnMode::Running] {
            for r in bn_check(mode) {
                assert!(r.max_rel_error < 1e-5, "{mode:?}: {r:?}");
            }
        }
    }

    #[test]
    fn log_softmax_values() {
        let out = log_softmax(&Matrix::from_rows(&[[0.0, 0.0, 0.0]]));
        for v in out.data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
        let big = log_softmax(&Matrix::from_rows(&[[1000.0, 0.0, 0.0]]));
        assert!(big.is_finite());
        assert!(big.get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_matrix(&mut rng, 4, 3).scale(3.0);
        let w = rand_matrix(&mut rng, 4, 3);
        let out = log_softmax(&x);
        for row in out.row_iter() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let dx = log_softmax_backward(&out, &w).unwrap();
        let r = grad_check(x.data(), dx.data(), 1e-6, |p| {
            Ok(probe(&log_softmax(&Matrix::from_vec(4, 3, p.to_vec()).unwrap()), &w))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
