use super::params::{ParamId, ParamStore};
use crate::tensor::{Grads, Scalar, Tensor};

/// Adam with bias correction; the learning rate is supplied per step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id.0) else { continue };
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = store.get_mut(id);
            for (((wv, &gv), mv), vv) in
                w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *wv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new();
        for _ in 0..500 {
            let grads = {
                let ctx = Ctx::train(&store, 0);
                let x = ctx.param(id);
                x.mul(&x).mean_all().backward()
            };
            adam.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2), "{:?}", store.get(id));
    }
}
