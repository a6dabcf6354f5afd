use crate::numerics::{Gradients, Matrix, ParamId, ParamStore};

/// Plain gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Matrix>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    /// Updates only the parameters in `trainable`; others are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: &[ParamId]) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &id in trainable {
            let Some(g) = grads.get(id) else { continue };
            let update = if self.momentum > 0.0 {
                let v = self.velocity[id.index()].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = self.momentum * *vi + gi;
                }
                v.clone()
            } else {
                g.clone()
            };
            for (p, u) in store.get_mut(id).data_mut().iter_mut().zip(update.data()) {
                *p -= self.lr * u;
            }
        }
    }
}
