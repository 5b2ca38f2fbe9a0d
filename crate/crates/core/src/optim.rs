//! SGD with momentum (coupled weight decay) and AdamW (decoupled weight decay).
//!
//! Only parameters present in the gradient map are updated, which is how
//! frozen parameters are expressed. Training-time updates skip weight decay
//! for the names matched by [`exempt_from_decay`]; [`step_with`] takes any
//! other exemption rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{exempt_from_decay, Gradients, OptState, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    /// AdamW only.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr,
            momentum: 0.0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// One update with the configured optimizer at its configured rate.
pub fn step<T: Scalar>(params: &mut ParamSet<T>, grads: &Gradients<T>, cfg: &OptimizerConfig) -> Result<()> {
    step_with_lr(params, grads, cfg, cfg.lr)
}

/// One update using `lr` in place of `cfg.lr` (for schedules).
pub fn step_with_lr<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    step_with(params, grads, cfg, lr, exempt_from_decay)
}

/// Exemption rule that decays every updated parameter.
pub fn decay_everything(_: &str) -> bool {
    false
}

/// One update at rate `lr`, skipping weight decay where `exempt` holds.
pub fn step_with<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    cfg: &OptimizerConfig,
    lr: f64,
    exempt: fn(&str) -> bool,
) -> Result<()> {
    match cfg.kind {
        OptimizerKind::SgdMomentum => sgd_update(params, grads, cfg, lr, exempt),
        OptimizerKind::Adamw => adamw_update(params, grads, cfg, lr, exempt),
    }
}

fn entry<'p, T: Scalar>(
    params: &'p mut ParamSet<T>,
    name: &str,
    grad: &crate::tensor::Tensor<T>,
) -> Result<(&'p mut crate::tensor::Tensor<T>, &'p mut OptState<T>)> {
    let (value, state) = params
        .value_and_state_mut(name)
        .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
    if value.shape() != grad.shape() {
        return Err(Error::shape(format!("gradient of `{name}`"), value.shape(), grad.shape()));
    }
    Ok((value, state))
}

/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    sgd_update(params, grads, cfg, lr, exempt_from_decay)
}

fn sgd_update<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    cfg: &OptimizerConfig,
    lr: f64,
    exempt: fn(&str) -> bool,
) -> Result<()> {
    if cfg.kind != OptimizerKind::SgdMomentum {
        return Err(Error::Config("sgd_momentum_step called with a non-SGD config".into()));
    }
    let (mu, lr) = (T::lit(cfg.momentum), T::lit(lr));
    for (name, grad) in grads.iter() {
        let wd = if exempt(name) { T::zero() } else { T::lit(cfg.weight_decay) };
        let (value, state) = entry(params, name, grad)?;
        let n = value.len();
        if !matches!(state, OptState::Momentum(_)) {
            *state = OptState::Momentum(vec![T::zero(); n]);
        }
        let OptState::Momentum(buf) = state else { unreachable!() };
        if buf.len() != n {
            return Err(Error::shape(format!("momentum of `{name}`"), &[n], &[buf.len()]));
        }
        for ((p, v), &g) in value.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
            let g = g + wd * *p;
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Adam with bias correction and decoupled decay `p ← p − lr·wd·p`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    adamw_update(params, grads, cfg, lr, exempt_from_decay)
}

fn adamw_update<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    cfg: &OptimizerConfig,
    lr: f64,
    exempt: fn(&str) -> bool,
) -> Result<()> {
    if cfg.kind != OptimizerKind::Adamw {
        return Err(Error::Config("adamw_step called with a non-AdamW config".into()));
    }
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    for (name, grad) in grads.iter() {
        let wd = if exempt(name) { 0.0 } else { cfg.weight_decay };
        let (value, state) = entry(params, name, grad)?;
        let n = value.len();
        if !matches!(state, OptState::Adam { .. }) {
            *state = OptState::Adam {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            };
        }
        let OptState::Adam { m, v, step } = state else { unreachable!() };
        if m.len() != n || v.len() != n {
            return Err(Error::shape(format!("adam moments of `{name}`"), &[n], &[m.len()]));
        }
        *step += 1;
        let c1 = T::one() / (T::one() - b1.powi(*step as i32));
        let c2 = T::one() / (T::one() - b2.powi(*step as i32));
        let decay = T::lit(lr * wd);
        let lr = T::lit(lr);
        for (((p, mi), vi), &g) in value
            .data_mut()
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(grad.data())
        {
            *p -= decay * *p;
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi * c1;
            let vhat = *vi * c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `base` to 0 over `total` steps after `warmup` linear
/// warm-up steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[1], vec![v]).unwrap());
        p
    }

    fn grad(v: f64) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.insert("w", Tensor::new(&[1], vec![v]).unwrap());
        g
    }

    fn w(p: &ParamSet<f64>) -> f64 {
        p.expect("w").item()
    }

    #[test]
    fn sgd_single_step_arithmetic() {
        let mut p = one(1.0);
        let cfg = OptimizerConfig::sgd(0.1, 0.9, 0.0);
        step(&mut p, &grad(0.5), &cfg).unwrap();
        assert!((w(&p) - 0.95).abs() < 1e-15);
        assert_eq!(p.state("w"), Some(&OptState::Momentum(vec![0.5])));
    }

    #[test]
    fn sgd_zero_rate_updates_buffers_only() {
        let mut p = one(1.0);
        let cfg = OptimizerConfig::sgd(0.0, 0.9, 0.0);
        step(&mut p, &grad(0.5), &cfg).unwrap();
        assert_eq!(w(&p), 1.0);
        assert_eq!(p.state("w"), Some(&OptState::Momentum(vec![0.5])));
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = one(1.0);
        let cfg = OptimizerConfig::sgd(0.1, 0.9, 0.0);
        step(&mut p, &grad(1.0), &cfg).unwrap();
        let after1 = w(&p);
        step(&mut p, &grad(1.0), &cfg).unwrap();
        assert!((1.0 - after1 - 0.1).abs() < 1e-12);
        assert!((after1 - w(&p) - 0.19).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_is_coupled() {
        let mut p = one(2.0);
        let cfg = OptimizerConfig::sgd(0.1, 0.0, 0.5);
        step(&mut p, &grad(0.0), &cfg).unwrap();
        assert!((w(&p) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_exempt_names() {
        let mut p = ParamSet::new();
        p.insert("layer.bias", Tensor::new(&[1], vec![2.0]).unwrap());
        let mut g = Gradients::new();
        g.insert("layer.bias", Tensor::new(&[1], vec![0.0]).unwrap());
        step(&mut p, &g, &OptimizerConfig::sgd(0.1, 0.0, 0.5)).unwrap();
        step(&mut p, &g, &OptimizerConfig::adamw(0.1, 0.5)).unwrap();
        assert_eq!(p.expect("layer.bias").item(), 2.0);
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut p = one(1.0);
        let cfg = OptimizerConfig::adamw(0.1, 0.0);
        for _ in 0..10 {
            step(&mut p, &grad(0.0), &cfg).unwrap();
        }
        assert_eq!(w(&p), 1.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let mut p = one(1.0);
        step(&mut p, &grad(1.0), &OptimizerConfig::adamw(0.1, 0.0)).unwrap();
        assert!((w(&p) - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w(&p) - 0.9).abs() < 1e-8);
        assert!(matches!(p.state("w"), Some(OptState::Adam { step: 1, .. })));
    }

    #[test]
    fn adamw_pure_decoupled_decay() {
        let mut p = one(1.0);
        step(&mut p, &grad(0.0), &OptimizerConfig::adamw(0.1, 0.1)).unwrap();
        assert!((w(&p) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = one(1.0);
        let mut g = Gradients::new();
        g.insert("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        assert!(matches!(
            step(&mut p, &g, &OptimizerConfig::sgd(0.1, 0.9, 0.0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn stepping_a_clone_leaves_original_untouched() {
        let mut a = one(1.0);
        let cfg = OptimizerConfig::sgd(0.1, 0.9, 0.0);
        step(&mut a, &grad(1.0), &cfg).unwrap();
        let snapshot = (a.digest(), a.state_digest());
        let mut b = a.clone();
        step(&mut b, &grad(1.0), &cfg).unwrap();
        assert_eq!((a.digest(), a.state_digest()), snapshot);
        assert_ne!(b.digest(), snapshot.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(-1.0, 0.9, 0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0, 0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.9, -0.1).validate().is_err());
        assert!(OptimizerConfig::sgd(5e-3, 0.9, 0.2).validate().is_ok());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0), 1.0);
        assert!(cosine_lr(1.0, 10, 10, 0).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10, 0) - 0.5).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0, 10, 2) - 0.5).abs() < 1e-12);
    }
}
