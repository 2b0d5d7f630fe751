use std::f64::consts::PI;

use super::{TrainConfig, TrainError};
use crate::model::ModelParams;

/// Learning rate at a global step: linear warm-up from `lr_base / 10` to
/// `lr_base` over the warm-up epochs, then cosine decay to `lr_base * lr_final_ratio`
/// at the final step.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.lr_base;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    if step < warmup {
        return warmup_lr(base, step as f64 / warmup as f64);
    }
    let total = cfg.epochs * steps_per_epoch;
    let span = total.saturating_sub(1).saturating_sub(warmup);
    let u = if span == 0 { 0.0 } else { ((step - warmup) as f64 / span as f64).min(1.0) };
    let final_lr = base * cfg.lr_final_ratio;
    final_lr + (base - final_lr) * (1.0 + (PI * u).cos()) / 2.0
}

/// Warm-up ramp at fractional progress `p` in `[0, 1]`.
pub fn warmup_lr(base: f64, p: f64) -> f64 {
    base / 10.0 + (base - base / 10.0) * p
}

/// One SGD step with L2 weight decay and (Nesterov) momentum, in place.
///
/// `g = grad + wd * p; v = m * v + g; p -= lr * (g + m * v)` with Nesterov,
/// `p -= lr * v` without.
pub fn sgd_update(
    params: &mut ModelParams,
    grads: &ModelParams,
    buffers: &mut ModelParams,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.shape != grads.shape || params.shape != buffers.shape {
        return Err(TrainError::ShapeMismatch);
    }
    if grads.check_finite().is_err() {
        return Err(TrainError::NonFinite("gradient"));
    }
    let (m, wd) = (cfg.momentum, cfg.weight_decay);
    for ((p, g), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(buffers.tensors_mut()) {
        for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let g = gi + wd * *pi;
            *vi = m * *vi + g;
            *pi -= if cfg.nesterov { lr * (g + m * *vi) } else { lr * *vi };
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 10, ..TrainConfig::default() }
    }

    fn filled(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(ModelShape { grid: 1, channels: 1, hidden_dim: 2, num_classes: 2 });
        p.tensors_mut().into_iter().for_each(|t| t.fill(v));
        p
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        let spe = 25;
        assert!((lr_at(0, spe, &c) - 1.25e-3).abs() < 1e-15);
        assert_eq!(lr_at(spe, spe, &c), c.lr_base);
        assert!((lr_at(10 * spe - 1, spe, &c) - c.lr_base * 0.01).abs() < 1e-9);
        assert!((warmup_lr(c.lr_base, 1.0) - c.lr_base).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let c = cfg();
        let lrs: Vec<f64> = (0..250).map(|s| lr_at(s, 25, &c)).collect();
        assert!(lrs[..25].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[25..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs.iter().all(|&l| l > 0.0 && l <= c.lr_base));
    }

    #[test]
    fn vanilla_sgd() {
        let c = TrainConfig { momentum: 0.0, weight_decay: 0.0, ..cfg() };
        let mut p = filled(1.0);
        let mut v = filled(0.0);
        sgd_update(&mut p, &filled(0.5), &mut v, 0.1, &c).unwrap();
        assert!(p.tensors().iter().all(|t| t.iter().all(|&x| x == 1.0 - 0.1 * 0.5)));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let c = TrainConfig { weight_decay: 0.0, ..cfg() };
        let mut p = filled(0.3);
        let mut v = filled(0.0);
        sgd_update(&mut p, &filled(0.0), &mut v, 0.1, &c).unwrap();
        assert_eq!(p, filled(0.3));
    }

    #[test]
    fn nesterov_first_step() {
        let c = TrainConfig { momentum: 0.9, nesterov: true, weight_decay: 0.0, ..cfg() };
        let mut p = filled(0.0);
        let mut v = filled(0.0);
        sgd_update(&mut p, &filled(1.0), &mut v, 0.1, &c).unwrap();
        assert!(p.tensors().iter().all(|t| t.iter().all(|&x| (x + 0.19).abs() < 1e-15)));
        assert!(v.tensors().iter().all(|t| t.iter().all(|&x| x == 1.0)));

        let plain = TrainConfig { nesterov: false, ..c };
        let mut p = filled(0.0);
        let mut v = filled(0.0);
        sgd_update(&mut p, &filled(1.0), &mut v, 0.1, &plain).unwrap();
        assert!(p.tensors().iter().all(|t| t.iter().all(|&x| (x + 0.1).abs() < 1e-15)));
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = filled(0.0);
        let mut v = filled(0.0);
        let mut g = filled(0.0);
        g.b1[0] = f64::INFINITY;
        assert!(matches!(sgd_update(&mut p, &g, &mut v, 0.1, &cfg()), Err(TrainError::NonFinite(_))));
    }
}
