use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per tensor, plus a trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub trainable: Vec<bool>,
}

impl OptimizerState {
    pub fn new<'t>(shapes: impl IntoIterator<Item = (&'t Tensor, bool)>) -> Self {
        let mut s = OptimizerState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            trainable: Vec::new(),
        };
        for (t, train) in shapes {
            s.m.push(Tensor::zeros(t.shape()));
            s.v.push(Tensor::zeros(t.shape()));
            s.trainable.push(train);
        }
        s
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
///
/// The step counter is incremented before the moments are corrected.
/// Tensors flagged as not trainable are left untouched.
pub fn adam_update(
    params: &mut [&mut Tensor],
    state: &mut OptimizerState,
    grads: &[Tensor],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam got {} tensors, {} gradients, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !state.trainable[i] {
            continue;
        }
        let g = &grads[i];
        p.same_shape(g, "adam gradient")?;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, th) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            *th -= cfg.lr * cfg.weight_decay * *th;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *th -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(theta: f64, g: f64, wd: f64, steps: usize) -> f64 {
        let mut p = Tensor::scalar(theta);
        let mut st = OptimizerState::new([(&p, true)]);
        let cfg = AdamConfig { weight_decay: wd, ..AdamConfig::with_lr(0.01) };
        for _ in 0..steps {
            adam_update(&mut [&mut p], &mut st, &[Tensor::scalar(g)], &cfg).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        assert!((run(0.0, 1.0, 0.0, 1) + 0.01).abs() < 1e-9);
        assert!((run(0.0, -250.0, 0.0, 1) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        assert_eq!(run(0.75, 0.0, 0.0, 5), 0.75);
    }

    #[test]
    fn decoupled_decay_precedes_the_step() {
        // wd shrinks θ by lr·wd·θ; the zero gradient adds nothing
        assert!((run(2.0, 0.0, 0.5, 1) - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut st = OptimizerState::new([(&a, false), (&b, true)]);
        let g = [Tensor::scalar(1.0), Tensor::scalar(1.0)];
        adam_update(&mut [&mut a, &mut b], &mut st, &g, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(a.data()[0], 1.0);
        assert!(b.data()[0] < 1.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let a = run(0.3, 0.7, 0.01, 100);
        let b = run(0.3, 0.7, 0.01, 100);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
