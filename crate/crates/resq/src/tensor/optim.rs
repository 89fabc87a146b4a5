//! RMSProp with the square-average accumulator.

use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use super::{Arr, Gradients};

pub struct RmsProp {
    pub alpha: f64,
    pub eps: f64,
    sq_avg: Vec<Arr>,
    steps: u64,
}

impl RmsProp {
    pub fn new(params: &ParamStore, alpha: f64, eps: f64) -> Self {
        let sq_avg = params
            .iter()
            .map(|(_, e)| Arr::zeros(e.value.raw_dim()))
            .collect();
        RmsProp {
            alpha,
            eps,
            sq_avg,
            steps: 0,
        }
    }

    /// θ ← θ − lr · g / (√v + ε) with v ← α·v + (1−α)·g². Zero gradients
    /// leave parameters untouched. Buffers and missing gradients are skipped.
    pub fn step(&mut self, params: &mut ParamStore, bound: &Bound, grads: &mut Gradients, lr: f64) {
        let n = params.len();
        for i in 0..n {
            let id = super::params::PId(i);
            if !params.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.take(bound.var(id)) else {
                continue;
            };
            let v = &mut self.sq_avg[i];
            v.zip_mut_with(&g, |vv, &gv| {
                *vv = self.alpha * *vv + (1.0 - self.alpha) * gv * gv;
            });
            let theta = params.value_mut(id);
            ndarray::Zip::from(&mut *theta)
                .and(&g)
                .and(&*v)
                .for_each(|t, &gv, &vv| {
                    *t -= lr * gv / (vv.sqrt() + self.eps);
                });
        }
        self.steps += 1;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn export_state(&self) -> OptimizerState {
        OptimizerState {
            alpha: self.alpha,
            eps: self.eps,
            steps: self.steps,
            sq_avg: self
                .sq_avg
                .iter()
                .map(|a| (a.shape().to_vec(), a.iter().cloned().collect()))
                .collect(),
        }
    }

    pub fn from_state(state: &OptimizerState) -> crate::Result<Self> {
        let sq_avg = state
            .sq_avg
            .iter()
            .map(|(shape, data)| {
                Arr::from_shape_vec(ndarray::IxDyn(shape), data.clone()).map_err(|e| {
                    crate::Error::Integrity(format!("optimizer state tensor: {e}"))
                })
            })
            .collect::<crate::Result<Vec<_>>>()?;
        Ok(RmsProp {
            alpha: state.alpha,
            eps: state.eps,
            sq_avg,
            steps: state.steps,
        })
    }
}

#[derive(Serialize, Deserialize, Clone)]
pub struct OptimizerState {
    pub alpha: f64,
    pub eps: f64,
    pub steps: u64,
    pub sq_avg: Vec<(Vec<usize>, Vec<f64>)>,
}

#[cfg(test)]
mod tests {
    use super::super::{scalar_value, Tape};
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = ParamStore::new();
        let w = ps.register("w", Arr::from_elem(IxDyn(&[3]), 0.7));
        let mut opt = RmsProp::new(&ps, 0.99, 1e-8);

        let tape = Tape::new();
        let bound = ps.bind(&tape);
        // loss independent of w: gradient is zero (absent)
        let c = tape.input(super::super::scalar(2.0));
        let loss = tape.mul(c, c);
        let mut grads = tape.backward(loss);
        let before = ps.value(w).clone();
        opt.step(&mut ps, &bound, &mut grads, 0.1);
        assert_eq!(ps.value(w), &before);
    }

    #[test]
    fn step_descends_quadratic() {
        let mut ps = ParamStore::new();
        let w = ps.register("w", Arr::from_elem(IxDyn(&[1]), 4.0));
        let mut opt = RmsProp::new(&ps, 0.9, 1e-8);
        // RMSProp moves roughly lr per step once the accumulator warms up;
        // 100 steps at 0.1 walk w from 4 to an oscillation around 0.
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let tape = Tape::new();
            let bound = ps.bind(&tape);
            let wv = bound.var(w);
            let loss = tape.sum_all(tape.mul(wv, wv));
            last = scalar_value(&tape.value(loss));
            let mut grads = tape.backward(loss);
            opt.step(&mut ps, &bound, &mut grads, 0.1);
        }
        assert!(last < 0.1, "final loss {last}");
    }
}
