use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// A named trainable tensor and its most recent gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, indexed by position. The same
    /// parameter list (same order) must be passed on every call.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        let missing: Vec<String> = params
            .iter()
            .filter(|p| p.grad.is_none())
            .map(|p| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(TensorError::MissingGrad(missing));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            let g = p.grad.as_ref().expect("checked above");
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = vec![Param::new("w", Tensor::scalar(1.5))];
        p[0].grad = Some(Tensor::scalar(0.0));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p).unwrap();
        assert_eq!(p[0].value.item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.25] {
            let mut p = vec![Param::new("w", Tensor::scalar(0.0))];
            p[0].grad = Some(Tensor::scalar(g));
            let mut opt = Adam::new(AdamConfig::with_lr(0.01));
            opt.step(&mut p).unwrap();
            let moved = p[0].value.item();
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-8, "{moved}");
        }
    }

    #[test]
    fn missing_grad_lists_names() {
        let mut p = vec![
            Param::new("a", Tensor::scalar(0.0)),
            Param::new("b", Tensor::scalar(0.0)),
        ];
        p[0].grad = Some(Tensor::scalar(1.0));
        let err = Adam::new(AdamConfig::default()).step(&mut p).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad(vec!["b".into()]));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut p = vec![Param::new("x", Tensor::scalar(0.0))];
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let tape = Tape::new();
            let x = tape.leaf(p[0].value.clone(), true);
            let d = x.affine(1.0, -2.0);
            let loss = d.mul(d).unwrap();
            let f = loss.value().item();
            assert!(f < last, "{f} !< {last}");
            last = f;
            p[0].grad = tape.backward(loss).unwrap().get(x).cloned();
            opt.step(&mut p).unwrap();
        }
    }
}
