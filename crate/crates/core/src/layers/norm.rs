use super::{join, Ctx, Mode, Module, TensorRole};
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Batch normalization over `(N, H, W)` per channel.
///
/// `key` must equal the path under which the owning module visits this
/// layer; training-mode forwards queue running-statistic updates under it.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    key: String,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(key: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            key: key.into(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Train mode normalizes with biased batch statistics and queues
    /// `run ← (1−m)·run + m·batch` on the context; eval mode uses the
    /// running statistics and changes nothing.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, _, _] = x.dims4()?;
        ensure!(
            c == self.channels(),
            "batchnorm2d: input has {c} channels, layer has {}",
            self.channels()
        );
        match ctx.mode {
            Mode::Eval => {
                let out = ctx.graph.batch_norm(
                    x,
                    &self.gamma,
                    &self.beta,
                    Some((&self.running_mean, &self.running_var)),
                    self.eps,
                )?;
                Ok(out.output)
            }
            Mode::Train => {
                let out = ctx.graph.batch_norm(x, &self.gamma, &self.beta, None, self.eps)?;
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                let blend = |run: &Tensor<T>, batch: Vec<T>| {
                    let data = run
                        .data()
                        .iter()
                        .zip(batch)
                        .map(|(&r, b)| keep * r + m * b)
                        .collect();
                    Tensor::from_parts(run.shape().to_vec(), data)
                };
                let mean = blend(&self.running_mean, out.batch_mean.expect("train mode returns batch mean"));
                let var = blend(&self.running_var, out.batch_var.expect("train mode returns batch variance"));
                ctx.push_update(join(&self.key, "running_mean"), mean);
                ctx.push_update(join(&self.key, "running_var"), var);
                Ok(out.output)
            }
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        f(&join(prefix, "gamma"), &self.gamma, TensorRole::Param);
        f(&join(prefix, "beta"), &self.beta, TensorRole::Param);
        f(&join(prefix, "running_mean"), &self.running_mean, TensorRole::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, TensorRole::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        f(&join(prefix, "gamma"), &mut self.gamma, TensorRole::Param);
        f(&join(prefix, "beta"), &mut self.beta, TensorRole::Param);
        f(&join(prefix, "running_mean"), &mut self.running_mean, TensorRole::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, TensorRole::Buffer);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::layers::apply_running_updates;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-3.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.beta = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let x: Vec<f64> = (0..36).map(|i| if (i / 9) % 2 == 0 { 3.0 } else { -7.0 }).collect();
        let x = Tensor::new(vec![2, 2, 3, 3], x).unwrap();
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, Mode::Train);
        let y = bn.forward(&mut ctx, &x).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let ch = (i / 9) % 2;
            assert!((v - bn.beta.data()[ch]).abs() <= 1e-5);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let bn = BatchNorm2d::<f64>::new("bn", 3);
        let x = random(vec![2, 3, 4, 5], 11);
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, Mode::Train);
        let y = bn.forward(&mut ctx, &x).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 3 + ch) * 20..][..20].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 40.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity_and_pure() {
        let bn = BatchNorm2d::<f64>::new("bn", 3);
        let x = random(vec![1, 3, 4, 4], 5);
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, Mode::Eval);
        let a = bn.forward(&mut ctx, &x).unwrap();
        let b = bn.forward(&mut ctx, &x).unwrap();
        assert!(a.bit_eq(&b));
        assert!(ctx.take_updates().is_empty());
        assert!(a.max_abs_diff(&x) < 5e-5 * 5.0);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm2d::<f64>::new("layer.bn", 1);
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, Mode::Train);
        bn.forward(&mut ctx, &x).unwrap();
        let updates = ctx.take_updates();
        apply_running_updates(&mut WithPrefix(&mut bn), updates);
        // batch mean 3, biased var (4+1+0+9)/4 = 3.5
        assert!((bn.running_mean.data()[0] - 0.3).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.35)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batch_rejected_in_train_mode() {
        let bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::zeros(vec![1, 1, 1, 1]);
        let mut g = Graph::inference();
        let mut ctx = Ctx::new(&mut g, Mode::Train);
        assert!(bn.forward(&mut ctx, &x).is_err());
        let mut ctx = Ctx::new(&mut g, Mode::Eval);
        assert!(bn.forward(&mut ctx, &x).is_ok());
    }

    struct WithPrefix<'a>(&'a mut BatchNorm2d<f64>);

    impl Module<f64> for WithPrefix<'_> {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Tensor<f64>, TensorRole)) {
            self.0.visit("layer.bn", f)
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>, TensorRole)) {
            self.0.visit_mut("layer.bn", f)
        }
    }
}
