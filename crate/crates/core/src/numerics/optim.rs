use super::params::{ParamGrads, ParamStore};

/// Adam with a linear warmup to a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    step: usize,
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
            warmup_steps: 0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn current_lr(&self) -> f64 {
        if self.warmup_steps > 0 && self.step <= self.warmup_steps {
            self.lr * self.step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let lr = self.current_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, grads: &ParamGrads) {
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = grads.get(id) {
                for (p, gi) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *p -= self.lr * gi;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row(vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let v = tape.param(&store, x).unwrap();
            let sq = tape.mul(v, v).unwrap();
            let loss = tape.sum(sq).unwrap();
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, g.params());
        }
        assert!(store.get(x).max_abs() < 1e-2);
    }

    #[test]
    fn sgd_step_direction() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, x).unwrap();
        let loss = tape.mul(v, v).unwrap();
        let g = tape.backward(loss).unwrap();
        Sgd { lr: 0.25 }.step(&mut store, g.params());
        assert_eq!(store.get(x).item(), 0.5);
    }
}
