use std::collections::BTreeMap;

use crate::error::{ensure, Result};
use crate::numerics::{Gradients, Tensor};

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every tensor named in `grads`.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| crate::Error::Lookup(format!("gradient for unknown parameter {name}")))?;
            ensure!(p.shape() == g.shape(), Argument, "gradient shape mismatch for {name}");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.epsilon);
                data[i] = (data[i] as f64 - upd) as f32;
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![1.0, -1.0]).unwrap())]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![0.3, -2.0]).unwrap())]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut params, &grads).unwrap();
        // Bias-corrected first step is lr·sign(g).
        let w = params["w"].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(&[1], vec![5.0]).unwrap())]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = params["w"].data()[0];
            let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[1], vec![2.0 * (w - 2.0)]).unwrap())]);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!((params["w"].data()[0] - 2.0).abs() < 1e-2);
    }
}
