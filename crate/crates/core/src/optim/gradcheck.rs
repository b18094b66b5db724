//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{Model, ModelConfig, ParamGroupMut};
use crate::numkernel::Tensor4;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Below it the comparison is
/// effectively absolute, which keeps round-off on near-zero gradients from
/// reading as a failure.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Anything with named parameter groups, a scalar loss and an analytic
/// gradient per group.
pub trait Differentiable {
    fn param_groups_mut(&mut self) -> Vec<ParamGroupMut<'_>>;
    fn loss(&self) -> Result<f64>;
    /// One entry per parameter group, same order and lengths as
    /// [`param_groups_mut`](Self::param_groups_mut).
    fn gradients(&self) -> Result<Vec<(String, Vec<f64>)>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub count: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| !g.passed).collect()
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<22} n={:<6} max_rel_err={:.3e} {}",
                g.name,
                g.count,
                g.max_rel_err,
                if g.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares every analytic gradient entry against
/// `(L(p + h) - L(p - h)) / 2h`.
pub fn check_gradients<T: Differentiable>(
    target: &mut T,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let analytic = target.gradients()?;
    let mut groups = Vec::with_capacity(analytic.len());
    for (g, (name, grad)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let orig = target.param_groups_mut()[g].values[j];
            target.param_groups_mut()[g].values[j] = orig + step;
            let plus = target.loss()?;
            target.param_groups_mut()[g].values[j] = orig - step;
            let minus = target.loss()?;
            target.param_groups_mut()[g].values[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        groups.push(GroupCheck {
            name: name.clone(),
            count: grad.len(),
            max_rel_err: worst,
            passed: worst < tolerance,
        });
    }
    Ok(GradcheckReport { tolerance, groups })
}

/// A model plus a fixed mini-batch; the loss is mean cross-entropy.
#[derive(Debug, Clone)]
pub struct ModelProblem {
    pub model: Model,
    pub images: Vec<Tensor4>,
    pub labels: Vec<usize>,
}

impl ModelProblem {
    /// Random model and `batch` random images in `[0, 1)` with random labels.
    pub fn random(config: ModelConfig, seed: u64, batch: usize) -> Result<Self> {
        let model = Model::new(config.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let side = config.image_size;
        let mut images = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let px = (0..config.in_channels * side * side)
                .map(|_| rng.random::<f64>())
                .collect();
            images.push(Tensor4::from_vec([1, config.in_channels, side, side], px)?);
            labels.push(rng.random_range(0..config.classes));
        }
        Ok(ModelProblem {
            model,
            images,
            labels,
        })
    }
}

impl Differentiable for ModelProblem {
    fn param_groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
        self.model.params.groups_mut()
    }

    fn loss(&self) -> Result<f64> {
        let refs: Vec<&Tensor4> = self.images.iter().collect();
        let logits = self.model.logits_batch(&refs)?;
        let rows = logits.len();
        let cols = self.model.config.classes;
        let m = crate::numkernel::Matrix::from_vec(rows, cols, logits.concat())?;
        Ok(crate::numkernel::softmax_xent(&m, &self.labels)?.0)
    }

    fn gradients(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let refs: Vec<&Tensor4> = self.images.iter().collect();
        let (_, g) = self.model.loss_and_grads(&refs, &self.labels)?;
        Ok(g.groups()
            .into_iter()
            .map(|g| (g.name, g.values.to_vec()))
            .collect())
    }
}

/// Gradient check of the full model on a random two-image instance.
pub fn gradcheck(config: &ModelConfig, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let mut problem = ModelProblem::random(config.clone(), seed, 2)?;
    check_gradients(&mut problem, FD_STEP, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Empty;

    impl Differentiable for Empty {
        fn param_groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
            Vec::new()
        }
        fn loss(&self) -> Result<f64> {
            Ok(0.0)
        }
        fn gradients(&self) -> Result<Vec<(String, Vec<f64>)>> {
            Ok(Vec::new())
        }
    }

    #[test]
    fn empty_model_gives_empty_report() {
        let r = check_gradients(&mut Empty, FD_STEP, 1e-4).unwrap();
        assert!(r.groups.is_empty());
        assert!(r.all_passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
