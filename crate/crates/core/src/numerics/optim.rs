use std::f64::consts::PI;

use super::{Matrix, NumericsError, ParamId, ParamStore};

/// AdamW moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub base_lr: f64,
}

impl OptimizerState {
    /// Zero moments shaped like `params`, with β₁=0.9, β₂=0.999, ε=1e-8.
    pub fn new(params: &ParamStore, base_lr: f64, weight_decay: f64, max_grad_norm: f64) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            second_moment: zeros.clone(),
            first_moment: zeros,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            max_grad_norm,
            base_lr,
        }
    }
}

pub fn global_norm(grads: &[(ParamId, Matrix)]) -> f64 {
    grads.iter().map(|(_, g)| g.frobenius_norm_sq()).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> Result<f64, NumericsError> {
    if !(max_norm > 0.0) {
        return Err(NumericsError::Invalid(format!("max gradient norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= factor;
            }
        }
    }
    Ok(norm)
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂+ε) + λ·θ)`.
///
/// Parameters absent from `grads` are updated as if their gradient were zero.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[(ParamId, Matrix)],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), NumericsError> {
    if state.first_moment.len() != params.len() {
        return Err(NumericsError::Invalid(format!(
            "optimizer tracks {} tensors but store has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(NumericsError::Invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    for (id, g) in grads {
        let p = params.get(*id);
        if p.shape() != g.shape() {
            return Err(NumericsError::Shape { op: "adamw_step", left: p.shape(), right: g.shape() });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.epsilon, state.weight_decay);

    let mut lookup: Vec<Option<&Matrix>> = vec![None; params.len()];
    for (id, g) in grads {
        lookup[id.0] = Some(g);
    }
    for (i, grad) in lookup.into_iter().enumerate() {
        let theta = params.get_mut(ParamId(i));
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..theta.len() {
            let gj = grad.map_or(0.0, |g| g.as_slice()[j]);
            let mj = b1 * m.as_slice()[j] + (1.0 - b1) * gj;
            let vj = b2 * v.as_slice()[j] + (1.0 - b2) * gj * gj;
            m.as_mut_slice()[j] = mj;
            v.as_mut_slice()[j] = vj;
            if lr != 0.0 {
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let th = &mut theta.as_mut_slice()[j];
                *th -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *th);
            }
        }
    }
    Ok(())
}

/// Linear warmup from 0 over `warmup_frac · total_steps`, then cosine decay to 0.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_frac: f64, base_lr: f64) -> Result<f64, NumericsError> {
    if step > total_steps {
        return Err(NumericsError::StepOutOfRange { step, total: total_steps });
    }
    if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
        return Err(NumericsError::Invalid(format!("warmup fraction must lie in (0, 1), got {warmup_frac}")));
    }
    let warmup = warmup_frac * total_steps as f64;
    let s = step as f64;
    if s <= warmup {
        return Ok(base_lr * s / warmup);
    }
    let progress = (s - warmup) / (total_steps as f64 - warmup);
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Matrix::filled(1, 1, value));
        p
    }

    #[test]
    fn clip_halves_when_norm_is_two() {
        let mut g = vec![(ParamId(0), Matrix::row_vector(&[2.0, 0.0])), (ParamId(1), Matrix::row_vector(&[0.0]))];
        let n = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(n, 2.0);
        assert_eq!(g[0].1.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn clip_leaves_small_norm_alone() {
        let mut g = vec![(ParamId(0), Matrix::row_vector(&[0.3, 0.4]))];
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g[0].1.as_slice(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_three_four_five() {
        let mut g = vec![(ParamId(0), Matrix::row_vector(&[3.0])), (ParamId(1), Matrix::row_vector(&[4.0]))];
        clip_global_norm(&mut g, 1.0).unwrap();
        assert!((g[0].1.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((g[1].1.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_params_but_moves_moments() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p, 1e-4, 0.01, 1.0);
        adamw_step(&mut p, &[(ParamId(0), Matrix::filled(1, 1, 0.5))], &mut st, 0.0).unwrap();
        assert_eq!(p.get(ParamId(0)).get(0, 0), 1.0);
        assert!((st.first_moment[0].get(0, 0) - 0.05).abs() < 1e-15);
        assert!((st.second_moment[0].get(0, 0) - 0.00025).abs() < 1e-15);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p, 0.1, 0.0, 1.0);
        adamw_step(&mut p, &[(ParamId(0), Matrix::filled(1, 1, 1.0))], &mut st, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.get(ParamId(0)).get(0, 0) - expected).abs() < 1e-15);
        assert!((p.get(ParamId(0)).get(0, 0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn pure_decay_with_zero_gradient() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p, 0.1, 0.01, 1.0);
        adamw_step(&mut p, &[(ParamId(0), Matrix::filled(1, 1, 0.0))], &mut st, 0.1).unwrap();
        assert!((p.get(ParamId(0)).get(0, 0) - 0.999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p, 0.1, 0.0, 1.0);
        let err = adamw_step(&mut p, &[(ParamId(0), Matrix::zeros(2, 1))], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, NumericsError::Shape { .. }));
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn schedule_examples() {
        let total = 1000;
        assert!((lr_schedule(200, total, 0.2, 1e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_schedule(total, total, 0.2, 1e-4).unwrap().abs() < 1e-20);
        let mid = lr_schedule(600, total, 0.2, 1e-4).unwrap();
        assert!((mid - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(0, total, 0.2, 1e-4).unwrap(), 0.0);
        assert!(matches!(lr_schedule(1001, total, 0.2, 1e-4), Err(NumericsError::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_is_continuous_at_warmup_boundary() {
        let total = 1000;
        let left = lr_schedule(200, total, 0.2, 1.0).unwrap();
        let right = lr_schedule(201, total, 0.2, 1.0).unwrap();
        assert_eq!(left, 1.0);
        assert!((right - 1.0).abs() < 1e-4);
    }
}
