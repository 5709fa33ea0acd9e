//! SGD with momentum and coupled weight decay, one learning rate per
//! parameter group.

use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, in store order.
    pub velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocities = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Sgd { momentum, weight_decay, velocities }
    }

    /// `g += wd * p; v = mu * v + g; p -= lr * v` for every parameter.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Tensor],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.velocities.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} buffers for {} parameters",
                grads.len(),
                self.velocities.len(),
                params.len()
            )));
        }
        let (mu, wd) = (self.momentum as Real, self.weight_decay as Real);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
            }
            let rate = lr(p.group) as Real;
            for ((w, gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gi + wd * *w;
                *vi = mu * *vi + d;
                *w -= rate * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", ParamGroup::Backbone, Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        s.insert("b", ParamGroup::Head, Tensor::new(vec![1], vec![0.5]).unwrap());
        s
    }

    #[test]
    fn two_momentum_steps_match_hand_computation() {
        let mut p = store();
        let mut opt = Sgd::new(&p, 0.9, 0.1);
        let g = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), Tensor::scalar(2.0)];
        let lr = |grp| if grp == ParamGroup::Backbone { 0.1 } else { 1.0 };
        opt.step(&mut p, &g, lr).unwrap();
        // a0: d = 1 + 0.1 = 1.1, v = 1.1, w = 1 - 0.11 = 0.89
        assert!((p.get("a").unwrap().value.data()[0] - 0.89).abs() < 1e-12);
        // b: d = 2 + 0.05 = 2.05, v = 2.05, w = 0.5 - 2.05 = -1.55
        assert!((p.get("b").unwrap().value.data()[0] + 1.55).abs() < 1e-12);
        opt.step(&mut p, &g, lr).unwrap();
        // a0: d = 1 + 0.089 = 1.089, v = 0.99 + 1.089 = 2.079, w = 0.89 - 0.2079
        assert!((p.get("a").unwrap().value.data()[0] - 0.6821).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_leaves_parameters_untouched() {
        let mut p = store();
        let before = p.clone();
        let mut opt = Sgd::new(&p, 0.9, 0.0005);
        let g = vec![Tensor::new(vec![2], vec![3.0, 1.0]).unwrap(), Tensor::scalar(-1.0)];
        opt.step(&mut p, &g, |_| 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = store();
        let mut opt = Sgd::new(&p, 0.9, 0.0);
        assert!(opt.step(&mut p, &[Tensor::scalar(1.0)], |_| 0.1).is_err());
        let bad = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        assert!(opt.step(&mut p, &bad, |_| 0.1).is_err());
    }
}
