use crate::{ParamGrads, ParamId, ParamStore, Scalar, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { beta1, beta2, eps, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.v[id.index()]
    }

    /// Restore state saved from [`first_moment`](Self::first_moment) / [`second_moment`](Self::second_moment).
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        for (new, old) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            assert_eq!(new.shape(), old.shape(), "moment shape mismatch");
        }
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update. `lr(id)` gives the learning rate of each parameter (per-group rates).
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: impl Fn(ParamId) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_real(self.beta1), T::from_real(self.beta2));
        let (one_b1, one_b2) = (T::from_real(1.0 - self.beta1), T::from_real(1.0 - self.beta2));
        let eps = T::from_real(self.eps);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let rate = lr(id);
            let decay = T::from_real(1.0 - rate * self.weight_decay);
            let step_size = T::from_real(rate / bc1);
            let inv_bc2_sqrt = T::from_real(1.0 / bc2.sqrt());
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] *= decay;
                p[i] -= step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}
