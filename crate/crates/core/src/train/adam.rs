use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0, "learning rate must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, "Adam epsilon must be positive");
        Ok(())
    }
}

/// First and second moments per parameter, in parameter order, plus the
/// number of steps taken.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar = f32> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros_like(p), Tensor::zeros_like(p)))
            .unzip();
        AdamState { t: 0, m, v }
    }

    /// Advances the step counter; call once before the per-tensor updates
    /// of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates parameter `index` in place with gradient `g`.
    pub fn update(&mut self, index: usize, param: &mut Tensor<T>, g: &Tensor<T>, cfg: &AdamConfig) -> Result<()> {
        ensure!(index < self.m.len(), "no Adam slot for parameter {index}");
        ensure!(
            param.shape() == g.shape() && param.shape() == self.m[index].shape(),
            "Adam shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            g.shape(),
            self.m[index].shape()
        );
        ensure!(self.t > 0, "begin_step must be called before update");
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(cfg.learning_rate);
        let eps = T::from_f64(cfg.eps);
        let t = self.t as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let m = self.m[index].data_mut();
        let v = self.v[index].data_mut();
        for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam step over `params` with matching `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len(),
        "Adam: {} params, {} grads, {} state slots",
        params.len(),
        grads.len(),
        state.m.len()
    );
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g, cfg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = vec![Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p[0].clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut st, &AdamConfig::default()).unwrap();
        }
        assert!(p[0].bit_eq(&before));
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(3.0)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
        let moved = 3.0 - p[0].data()[0];
        assert!((moved - cfg.learning_rate / (1.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(vec![2])];
        let mut st = AdamState::new(&p);
        let r = adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut st, &AdamConfig::default());
        assert!(r.is_err());
    }
}
