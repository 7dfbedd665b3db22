use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Real;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Updates every parameter that received a gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        if self.m.len() < store.len() {
            for id in store.ids().skip(self.m.len()) {
                let n = store.get(id).len();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in &grads.by_param {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].to_f64().unwrap_or(f64::NAN);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = T::lit(p[i].to_f64().unwrap_or(f64::NAN) - update);
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
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 2.1).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(&[3], vec![3.0, -1.0, 0.5]).unwrap()).unwrap();
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let target = std::sync::Arc::new(store.get(id).data().to_vec());
            let sq = g.mul_const(w, target).unwrap();
            let s = g.sum(sq);
            let grads = g.backward(s).unwrap();
            adam.step(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.05));
    }
}
