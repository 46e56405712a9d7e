//! Adam and learning-rate schedules.

use ndarray::Zip;

use crate::config::{LrSchedule, TrainConfig};
use crate::params::{zeros_like, Parameters};

/// Adam with first/second moments stored in model-shaped structs.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<M> {
    pub m: M,
    pub v: M,
    /// Number of steps taken.
    pub t: u64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl<M: Parameters + Clone> Adam<M> {
    pub fn new(model: &M, betas: [f64; 2], eps: f64) -> Self {
        Adam {
            m: zeros_like(model),
            v: zeros_like(model),
            t: 0,
            betas,
            eps,
        }
    }

    pub fn step(&mut self, model: &mut M, grad: &M, lr: f64) {
        self.t += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.eps;
        let grads = grad.named_tensors();
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((mut p, mut m), mut v), g) in params.into_iter().zip(ms).zip(vs).zip(grads) {
            Zip::from(&mut p)
                .and(&mut m)
                .and(&mut v)
                .and(&g.value)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Learning rate for the 0-based step `iteration`.
pub fn lr_at(cfg: &TrainConfig, iteration: u64) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Multistep => {
            let passed = cfg
                .milestones
                .iter()
                .filter(|&&f| iteration >= (f * cfg.iterations as f64).floor() as u64)
                .count();
            cfg.lr * cfg.gamma.powi(passed as i32)
        }
        LrSchedule::Cosine => {
            let frac = iteration as f64 / cfg.iterations.max(1) as f64;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayViewMutD, Array1};
    use crate::params::NamedTensor;

    #[derive(Clone, Debug, PartialEq)]
    struct Vector(Array1<f64>);

    impl Parameters for Vector {
        fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
            out.push(NamedTensor {
                name: prefix.to_string(),
                value: self.0.view().into_dyn(),
            });
        }

        fn collect_mut<'a>(&'a mut self, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
            out.push(self.0.view_mut().into_dyn());
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut x = Vector(Array1::from(vec![1.0, -2.0, 0.5]));
        let g = Vector(Array1::from(vec![3.0, -0.1, 0.0]));
        let mut opt = Adam::new(&x, [0.9, 0.99], 1e-8);
        opt.step(&mut x, &g, 0.1);
        // Bias correction makes the first update lr · g / (|g| + eps).
        assert!((x.0[0] - 0.9).abs() < 1e-8);
        assert!((x.0[1] + 1.9).abs() < 1e-6);
        assert_eq!(x.0[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Vector(Array1::from(vec![3.0, -4.0]));
        let mut opt = Adam::new(&x, [0.9, 0.99], 1e-8);
        for _ in 0..2000 {
            let g = Vector(x.0.mapv(|v| 2.0 * v));
            opt.step(&mut x, &g, 0.01);
        }
        assert!(x.0.iter().all(|v| v.abs() < 1e-2), "{:?}", x.0);
    }

    #[test]
    fn multistep_halves_at_milestones() {
        let cfg = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 2e-4);
        assert_eq!(lr_at(&cfg, 49), 2e-4);
        assert_eq!(lr_at(&cfg, 50), 1e-4);
        assert_eq!(lr_at(&cfg, 75), 5e-5);
        assert_eq!(lr_at(&cfg, 99), 2.5e-5);
    }

    #[test]
    fn cosine_and_constant() {
        let mut cfg = TrainConfig {
            iterations: 10,
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), cfg.lr);
        assert!((lr_at(&cfg, 5) - cfg.lr / 2.0).abs() < 1e-18);
        cfg.lr_schedule = LrSchedule::Constant;
        assert_eq!(lr_at(&cfg, 7), cfg.lr);
    }
}
