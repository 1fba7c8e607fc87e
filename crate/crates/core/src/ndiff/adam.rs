use crate::error::{Error, Result};
use crate::ndiff::params::ParamStore;
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Moment buffers and step counter for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| {
            s.ids()
                .map(|id| vec![T::zero(); s.get(id).len()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter. Gradients are
    /// left in place; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if store.get(id).grad().is_none() {
                return Err(Error::MissingGrad(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = t.grad().expect("checked above").to_vec();
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{Graph, Tensor};

    #[test]
    fn first_step_is_lr_sized() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::scalar(0.0)).unwrap();
        store.get_mut(id).grad_mut().unwrap()[0] = 1.0;
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        // m̂ = 1, v̂ = 1: Δ = -1e-3 / (1 + 1e-8)
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(id).item() - want).abs() < 1e-18);
        assert_eq!(adam.step_count(), 1);
        // gradients untouched
        assert_eq!(store.get(id).grad().unwrap(), &[1.0]);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64(vec![2], &[1.5, -2.0]).unwrap()).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::from_f64(vec![2], &[3.0, -1.0]).unwrap()).unwrap();
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        let loss = |s: &ParamStore<f64>| s.get(id).data().iter().map(|x| x * x).sum::<f64>();
        let l0 = loss(&store);
        for _ in 0..2 {
            store.zero_grad();
            let mut g = Graph::new();
            let p = g.param(&store, id);
            let sq = g.mul(p, p).unwrap();
            let l = g.sum_all(sq).unwrap();
            g.backward(l).unwrap();
            g.accumulate_into(&mut store);
            adam.step(&mut store).unwrap();
        }
        assert!(loss(&store) < l0);
        assert_eq!(adam.step_count(), 2);
    }
}
