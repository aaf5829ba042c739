//! Adam / AdamW updates and the warmup learning-rate schedule.

use crate::numcore::{Real, Tensor};

/// First/second-moment accumulators, aligned with the canonical parameter
/// order.
pub struct AdamState<R> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn for_shapes(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug)]
pub enum AdamError {
    NonFiniteGradient { param_index: usize },
    Misaligned { params: usize, grads: usize, state: usize },
}

impl std::fmt::Display for AdamError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdamError::NonFiniteGradient { param_index } => {
                write!(f, "non-finite gradient in parameter {param_index}")
            }
            AdamError::Misaligned { params, grads, state } => write!(
                f,
                "adam inputs misaligned: {params} params, {grads} grads, {state} state slots"
            ),
        }
    }
}

impl std::error::Error for AdamError {}

/// Bias-corrected Adam update, decoupled weight decay when configured.
/// `step` is 1-based.
pub fn adam_step<R: Real>(
    params: &mut [&mut Tensor<R>],
    grads: &[Tensor<R>],
    state: &mut AdamState<R>,
    hyper: &AdamHyper,
    lr: f64,
    step: usize,
) -> Result<(), AdamError> {
    debug_assert!(step >= 1);
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AdamError::Misaligned {
            params: params.len(),
            grads: grads.len(),
            state: state.m.len(),
        });
    }
    let b1 = R::from_f64(hyper.beta1);
    let b2 = R::from_f64(hyper.beta2);
    let one_m_b1 = R::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = R::from_f64(1.0 - hyper.beta2);
    let eps = R::from_f64(hyper.eps);
    let corr1 = R::from_f64(1.0 / (1.0 - hyper.beta1.powi(step as i32)));
    let corr2 = R::from_f64(1.0 / (1.0 - hyper.beta2.powi(step as i32)));
    let lr_r = R::from_f64(lr);
    let decay = R::from_f64(lr * hyper.weight_decay);

    for (idx, ((param, grad), (m, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .enumerate()
    {
        if !grad.all_finite() {
            return Err(AdamError::NonFiniteGradient { param_index: idx });
        }
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *m = b1 * *m + one_m_b1 * g;
            *v = b2 * *v + one_m_b2 * g * g;
            let m_hat = *m * corr1;
            let v_hat = *v * corr2;
            *p -= lr_r * m_hat / (v_hat.sqrt() + eps);
            if hyper.weight_decay > 0.0 {
                *p -= decay * *p;
            }
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr` over `warmup` steps, constant afterwards.
pub fn lr_at(step: usize, lr: f64, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

/// Scale gradients in place so their global L2 norm is at most `clip`.
pub fn clip_global_norm<R: Real>(grads: &mut [Tensor<R>], clip: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = R::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> Tensor<f64> {
        Tensor::scalar(x)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut p = single(3.5);
        let mut state = AdamState::for_shapes(&[vec![1]]);
        adam_step(
            &mut [&mut p],
            &[single(0.0)],
            &mut state,
            &AdamHyper::default(),
            0.1,
            1,
        )
        .unwrap();
        assert_eq!(p.item(), 3.5);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = x², grad 2x from x = 1
        let mut p = single(1.0);
        let mut state = AdamState::for_shapes(&[vec![1]]);
        adam_step(
            &mut [&mut p],
            &[single(2.0)],
            &mut state,
            &AdamHyper::default(),
            0.1,
            1,
        )
        .unwrap();
        assert!(p.item() < 1.0);
    }

    /// Plain transcription of the update equations, kept separate from the
    /// production kernel.
    struct ReferenceAdam {
        m: f64,
        v: f64,
    }

    impl ReferenceAdam {
        fn step(&mut self, x: f64, g: f64, h: &AdamHyper, lr: f64, t: usize) -> f64 {
            self.m = h.beta1 * self.m + (1.0 - h.beta1) * g;
            self.v = h.beta2 * self.v + (1.0 - h.beta2) * g * g;
            let m_hat = self.m / (1.0 - h.beta1.powi(t as i32));
            let v_hat = self.v / (1.0 - h.beta2.powi(t as i32));
            x - lr * m_hat / (v_hat.sqrt() + h.eps)
        }
    }

    #[test]
    fn five_steps_match_reference_implementation() {
        let h = AdamHyper { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0 };
        let mut p = single(1.0);
        let mut state = AdamState::for_shapes(&[vec![1]]);
        let mut reference = ReferenceAdam { m: 0.0, v: 0.0 };
        let mut x = 1.0f64;
        for t in 1..=5 {
            let g = 2.0 * x; // f(x) = x²
            x = reference.step(x, g, &h, 0.05, t);
            let g_prod = 2.0 * p.item();
            adam_step(&mut [&mut p], &[single(g_prod)], &mut state, &h, 0.05, t).unwrap();
            assert!((p.item() - x).abs() < 1e-7, "step {t}: {} vs {x}", p.item());
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient, nonzero decay: pure shrink by lr·wd
        let h = AdamHyper { weight_decay: 0.1, ..AdamHyper::default() };
        let mut p = single(2.0);
        let mut state = AdamState::for_shapes(&[vec![1]]);
        adam_step(&mut [&mut p], &[single(0.0)], &mut state, &h, 0.5, 1).unwrap();
        assert!((p.item() - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut p = single(1.0);
        let mut state = AdamState::for_shapes(&[vec![1]]);
        let err = adam_step(
            &mut [&mut p],
            &[single(f64::NAN)],
            &mut state,
            &AdamHyper::default(),
            0.1,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, AdamError::NonFiniteGradient { param_index: 0 }));
    }

    #[test]
    fn warmup_schedule_values() {
        assert_eq!(lr_at(0, 3e-4, 100), 0.0);
        assert_eq!(lr_at(50, 3e-4, 100), 1.5e-4);
        assert_eq!(lr_at(100, 3e-4, 100), 3e-4);
        assert_eq!(lr_at(5000, 3e-4, 100), 3e-4);
        assert_eq!(lr_at(0, 3e-4, 0), 3e-4);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = vec![
            Tensor::<f64>::from_f64_slice(vec![2], &[3.0, 0.0]).unwrap(),
            Tensor::<f64>::from_f64_slice(vec![1], &[4.0]).unwrap(),
        ];
        clip_global_norm(&mut grads, 1.0);
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // already-small gradients are untouched
        let mut grads = vec![Tensor::<f64>::from_f64_slice(vec![1], &[0.5]).unwrap()];
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads[0].item(), 0.5);
    }
}
