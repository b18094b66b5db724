use crate::error::{Error, Result};
use crate::fusion::{GradBundle, ModelParams};

/// Momentum buffers, one per parameter, owned by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ModelParams,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        SgdState {
            velocity: params.zeros_like(),
        }
    }
}

/// `v ← μv − lr·g; p ← p + v` on every group, fusion logits and smoothing
/// factors included.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradBundle,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let g_groups = grads.groups();
    let v_groups = state.velocity.groups_mut();
    let p_groups = params.groups_mut();
    if g_groups.len() != p_groups.len() || v_groups.len() != p_groups.len() {
        return Err(Error::shape("gradient bundle does not mirror the parameters"));
    }
    for ((p, v), g) in p_groups.into_iter().zip(v_groups).zip(g_groups) {
        if p.values.len() != g.values.len() || p.values.len() != v.values.len() {
            return Err(Error::shape(format!(
                "group {}: {} params, {} grads, {} velocity",
                p.name,
                p.values.len(),
                g.values.len(),
                v.values.len()
            )));
        }
        for ((pv, vv), &gv) in p.values.iter_mut().zip(v.values.iter_mut()).zip(g.values) {
            *vv = momentum * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            widths: [2, 2, 2],
            dict_size: 2,
            shared_dim: 3,
            classes: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = ModelParams::init_seeded(&cfg(), 1).unwrap();
        let before = p.clone();
        let g = GradBundle::zeros_like(&p);
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut st, 0.1, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = ModelParams::init_seeded(&cfg(), 1).unwrap();
        let before = p.clone();
        let mut g = GradBundle::zeros_like(&p);
        for grp in g.groups_mut() {
            for (i, v) in grp.values.iter_mut().enumerate() {
                *v = i as f64 * 0.5 - 1.0;
            }
        }
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &g, &mut st, 0.1, 0.0).unwrap();
        for ((a, b), gg) in p.groups().iter().zip(before.groups()).zip(g.groups()) {
            for ((x, y), z) in a.values.iter().zip(b.values).zip(gg.values) {
                assert_eq!(*x, y - 0.1 * z);
            }
        }
    }

    #[test]
    fn mismatched_bundle_rejected() {
        let mut p = ModelParams::init_seeded(&cfg(), 1).unwrap();
        let other = ModelConfig {
            levels: vec![3],
            ..cfg()
        };
        let g = GradBundle::zeros_like(&ModelParams::zeros(&other).unwrap());
        let mut st = SgdState::new(&p);
        assert!(sgd_step(&mut p, &g, &mut st, 0.1, 0.0).is_err());
    }
}
