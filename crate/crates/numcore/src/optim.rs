use crate::params::{ParamId, ParamStore};

/// Adam with bias correction. Parameters without a gradient are skipped and
/// keep their moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>, u64)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: Vec::new(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        if self.moments.len() < ids.len() {
            self.moments.resize(ids.len(), None);
        }
        for (slot, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            let n = grad.numel();
            let (m, v, t) = self.moments[slot].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let w = g.param(&store, id, true).unwrap();
            let sq = g.square(w).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            g.accumulate_param_grads(&grads, &mut store);
            opt.step(&mut store);
        }
        assert!(store.get(id).value.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 1.0)).unwrap();
        store.get_mut(id).grad = Some(Tensor::full(&[1], 123.0));
        let mut opt = Adam::new(0.01);
        opt.step(&mut store);
        assert!((store.get(id).value.item() - 0.99).abs() < 1e-9);
        assert!(store.get(id).grad.is_none());
    }
}
