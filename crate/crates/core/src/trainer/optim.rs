use std::f64::consts::PI;

use ndarray::Zip;

use crate::backbone::{IncrementalModel, ParamGroup};
use crate::config::{OptimizerKind, TrainerConfig};

/// Cosine decay from `base` at step 0 to `min` at `total` steps.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = (step as f64 / (total - 1) as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
}

/// Adam (with decoupled weight decay) or momentum SGD. Moment buffers are
/// shaped like the model they were created for, so a fresh optimizer is
/// needed whenever the classifier grows.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    momentum: f64,
    weight_decay: f64,
    first: IncrementalModel,
    second: IncrementalModel,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: &TrainerConfig, model: &IncrementalModel) -> Self {
        Self {
            kind: config.optimizer,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_epsilon,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            first: model.zeros_like(),
            second: model.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut IncrementalModel, grad: &IncrementalModel, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps, mom, wd) = (
            self.beta1,
            self.beta2,
            self.epsilon,
            self.momentum,
            self.weight_decay,
        );
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let kind = self.kind;
        let grads = grad.named_tensors();
        let firsts = self.first.named_tensors_mut();
        let seconds = self.second.named_tensors_mut();
        let ps = params.named_tensors_mut();
        assert_eq!(
            ps.len(),
            grads.len(),
            "gradient layout differs from parameters"
        );
        for (((p, g), m), v) in ps.into_iter().zip(grads).zip(firsts).zip(seconds) {
            let (_, mut p) = p;
            let (_, g) = g;
            let (_, mut m) = m;
            let (_, mut v) = v;
            match kind {
                OptimizerKind::Adam => {
                    Zip::from(&mut p)
                        .and(&g)
                        .and(&mut m)
                        .and(&mut v)
                        .for_each(|p, &g, m, v| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            let update = (*m / bias1) / ((*v / bias2).sqrt() + eps);
                            *p -= lr * (update + wd * *p);
                        });
                }
                OptimizerKind::Sgd => {
                    Zip::from(&mut p).and(&g).and(&mut m).for_each(|p, &g, m| {
                        *m = mom * *m + g + wd * *p;
                        *p -= lr * *m;
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> IncrementalModel {
        let config = ModelConfig {
            image_size: 4,
            patch_size: 2,
            in_channels: 1,
            embed_dim: 4,
            num_heads: 2,
            num_encoder_blocks: 1,
            num_decoder_blocks: 1,
            mlp_ratio: 2,
            num_classes_initial: 2,
        };
        IncrementalModel::new(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 11), 1.0);
        assert!((cosine_lr(1.0, 0.1, 10, 11) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.0, 5, 11) - 0.5).abs() < 1e-15);
        assert_eq!(cosine_lr(0.3, 0.0, 0, 1), 0.3);
    }

    #[test]
    fn first_adam_step_moves_each_weight_by_lr() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut grad = model.zeros_like();
        grad.fill(0.25);
        let config = TrainerConfig {
            adam_epsilon: 0.0,
            ..TrainerConfig::default()
        };
        let mut opt = Optimizer::new(&config, &model);
        opt.step(&mut model, &grad, 0.01);
        for ((_, a), (_, b)) in model.named_tensors().iter().zip(before.named_tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((y - x - 0.01).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut grad = model.zeros_like();
        grad.fill(-3.0);
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let config = TrainerConfig {
                optimizer: kind,
                ..TrainerConfig::default()
            };
            let mut opt = Optimizer::new(&config, &model);
            opt.step(&mut model, &grad, 0.0);
            assert_eq!(model, before);
        }
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut grad = model.zeros_like();
        grad.fill(2.0);
        let config = TrainerConfig {
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            ..TrainerConfig::default()
        };
        let mut opt = Optimizer::new(&config, &model);
        opt.step(&mut model, &grad, 0.5);
        let mut expected = before.clone();
        expected.add_scaled(&grad, -0.5);
        assert_eq!(model, expected);
    }
}
