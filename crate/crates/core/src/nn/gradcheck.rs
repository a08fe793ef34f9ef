//! Central finite-difference checks of analytic gradients.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{ParamId, ParamStore};
use crate::matrix::Matrix;

pub const ROUNDOFF_FLOOR: f64 = 1e-8;

/// Adds uniform noise of half-width `scale` to every parameter, moving the
/// check point off ReLU kinks such as zero-initialized biases.
pub fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientSample {
    pub parameter: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientSample {
    /// `|a - n| / max(|a|, |n|)`. Both values below `ROUNDOFF_FLOOR`
    /// count as agreeing zeros, since central differences cannot resolve
    /// smaller gradients from floating-point noise in the loss.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < ROUNDOFF_FLOOR {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares `analytic` against central differences of `loss` at `samples`
/// scalar parameters drawn uniformly over all scalars of the store.
pub fn check_gradients<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    analytic: &HashMap<ParamId, Matrix>,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Vec<GradientSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ids, sizes): (Vec<ParamId>, Vec<usize>) = {
        let s = store(model);
        s.ids().map(|id| (id, s.value(id).data().len())).unzip()
    };
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(samples);
    if total == 0 {
        return out;
    }
    for _ in 0..samples {
        let mut k = rng.gen_range(0..total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let id = ids[p];
        let (cols, name) = {
            let s = store(model);
            (s.value(id).cols(), s.name(id).to_string())
        };
        let original = store(model).value(id).data()[k];
        store(model).value_mut(id).data_mut()[k] = original + eps;
        let plus = loss(model);
        store(model).value_mut(id).data_mut()[k] = original - eps;
        let minus = loss(model);
        store(model).value_mut(id).data_mut()[k] = original;
        out.push(GradientSample {
            parameter: name,
            row: k / cols,
            col: k % cols,
            analytic: analytic.get(&id).map(|g| g.data()[k]).unwrap_or(0.0),
            numeric: (plus - minus) / (2.0 * eps),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn smooth_graph_matches() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_rows(&[[0.3, -0.2], [0.5, 0.1]]).unwrap());
        let x = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.7]]).unwrap();
        let t = Matrix::filled(2, 2, 3.0);
        let build = |s: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.param(s, w);
            let h = g.matmul(xv, wv);
            let h = g.tanh(h);
            let l = g.l1_loss(h, &t);
            (g, l)
        };
        let (g, l) = build(&store);
        let grads = g.backward(l);
        let loss = |s: &ParamStore| {
            let (g, l) = build(s);
            g.value(l).get(0, 0)
        };
        let out = check_gradients(&mut store, |s| s, loss, &grads, 10, 1e-6, 0);
        assert!(out.iter().all(|s| s.relative_error() < 1e-6), "{out:?}");
    }
}
