//! Decoupled weight-decay Adam.

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(
                "train.lr must be positive and train.beta1, train.beta2 must lie in [0, 1)".into(),
            ));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.adam_eps must be positive and train.weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moments per leaf plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<T: ParamTree<Leaf = Tensor>>(params: &T) -> Self {
        let mut m = Vec::new();
        params.visit_leaves("", &mut |_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update of `params` along `grads`.
    pub fn update<T: ParamTree<Leaf = Tensor>>(&mut self, params: &mut T, grads: &T, cfg: &AdamConfig) -> Result<()> {
        let mut g = Vec::new();
        grads.visit_leaves("", &mut |_, t| g.push(t.clone()));
        if g.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let mut i = 0;
        let mut result = Ok(());
        params.visit_leaves_mut("", &mut |_, p| {
            if result.is_ok() && p.shape() != g[i].shape() {
                result = Err(Error::shape("adam", p.shape(), g[i].shape()));
            }
            if result.is_ok() {
                let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g[i].data()).enumerate() {
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                    let step = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                    *w -= cfg.lr * (step + cfg.weight_decay * *w);
                }
            }
            i += 1;
        });
        result
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm<T: ParamTree<Leaf = Tensor>>(grads: &mut T, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit_leaves("", &mut |_, t| sq += t.data().iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.visit_leaves_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::param_tree;

    param_tree! {
        #[derive(Clone, Debug)]
        pub struct Pair {
            tensor a: P,
            tensor b: P,
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = Pair {
            a: Tensor::new([1, 2], vec![1.0, -1.0]).unwrap(),
            b: Tensor::scalar(0.5),
        };
        let g = Pair {
            a: Tensor::new([1, 2], vec![3.0, -0.01]).unwrap(),
            b: Tensor::scalar(0.0),
        };
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p);
        st.update(&mut p, &g, &cfg).unwrap();
        assert!((p.a.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.a.data()[1] + 0.9).abs() < 1e-5);
        assert_eq!(p.b.item(), 0.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decay_shrinks_weights_without_gradient() {
        let mut p = Pair {
            a: Tensor::scalar(2.0),
            b: Tensor::scalar(-2.0),
        };
        let g = Pair {
            a: Tensor::scalar(0.0),
            b: Tensor::scalar(0.0),
        };
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        AdamState::new(&p).update(&mut p, &g, &cfg).unwrap();
        assert!((p.a.item() - 1.9).abs() < 1e-12 && (p.b.item() + 1.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Pair {
            a: Tensor::new([1, 3], vec![3.0, -2.0, 1.0]).unwrap(),
            b: Tensor::scalar(4.0),
        };
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p);
        for _ in 0..2000 {
            let g = p.map(&mut |t| t.scale(2.0));
            st.update(&mut p, &g, &cfg).unwrap();
        }
        assert!(p.a.max_abs() < 1e-2 && p.b.max_abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = Pair {
            a: Tensor::new([1, 2], vec![3.0, 0.0]).unwrap(),
            b: Tensor::scalar(4.0),
        };
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.a.data()[0] - 0.6).abs() < 1e-15 && (g.b.item() - 0.8).abs() < 1e-15);
        let before = g.clone();
        assert!((clip_grad_norm(&mut g, 10.0) - 1.0).abs() < 1e-12);
        assert_eq!((g.a, g.b), (before.a, before.b));
    }
}
