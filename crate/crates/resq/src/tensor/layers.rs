//! Layer building blocks: linear, conv + bias, batch norm, instance norm.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{Bound, BufferUpdates, PId, ParamStore};
use super::{Arr, Tape, Var};

/// Forward-pass mode: training uses batch statistics in batch norm and
/// records running-statistic updates; evaluation uses the stored running
/// statistics and records nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Weight initializer family, chosen by the nonlinearity that follows.
#[derive(Clone, Copy)]
pub enum Init {
    HeNormal,
    XavierUniform,
}

/// Affine map on row vectors: (N, in) -> (N, out). Weight stored as (in, out).
pub struct Linear {
    pub w: PId,
    pub b: Option<PId>,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::HeNormal => he_normal(rng, &[dim_in, dim_out], dim_in),
            Init::XavierUniform => xavier_uniform(rng, &[dim_in, dim_out], dim_in, dim_out),
        };
        let w = ps.register(&format!("{name}.w"), w);
        let b = bias.then(|| ps.register(&format!("{name}.b"), Arr::zeros(IxDyn(&[dim_out]))));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.w));
        match self.b {
            Some(b) => tape.rows_add_vec(y, bound.var(b)),
            None => y,
        }
    }
}

/// Convolution with optional per-channel bias.
pub struct Conv2d {
    pub w: PId,
    pub b: Option<PId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = ps.register(&format!("{name}.w"), he_normal(rng, &[cout, cin, k, k], fan_in));
        let b = bias.then(|| ps.register(&format!("{name}.b"), Arr::zeros(IxDyn(&[cout]))));
        Conv2d {
            w,
            b,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.conv2d(x, bound.var(self.w), self.stride, self.pad);
        match self.b {
            Some(b) => tape.ch_add(y, bound.var(b)),
            None => y,
        }
    }
}

/// Batch normalization over (B, H, W) per channel, with affine parameters and
/// running statistics for evaluation mode. Running variance is stored
/// unbiased, matching the usual convention.
pub struct BatchNorm2d {
    pub gamma: PId,
    pub beta: PId,
    pub running_mean: PId,
    pub running_var: PId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: ps.register(&format!("{name}.gamma"), Arr::from_elem(IxDyn(&[c]), 1.0)),
            beta: ps.register(&format!("{name}.beta"), Arr::zeros(IxDyn(&[c]))),
            running_mean: ps.register_buffer(&format!("{name}.running_mean"), Arr::zeros(IxDyn(&[c]))),
            running_var: ps.register_buffer(
                &format!("{name}.running_var"),
                Arr::from_elem(IxDyn(&[c]), 1.0),
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        params: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut BufferUpdates,
    ) -> Var {
        match mode {
            Mode::Train => {
                let mu = tape.mean_bhw(x);
                let xc = tape.ch_sub(x, mu);
                let var = tape.mean_bhw(tape.mul(xc, xc));
                let inv = tape.recip(tape.sqrt(tape.affine_const(var, 1.0, self.eps)));
                let xn = tape.ch_mul(xc, inv);
                let y = tape.ch_add(tape.ch_mul(xn, bound.var(self.gamma)), bound.var(self.beta));

                let sh = tape.shape(x);
                let n = (sh[0] * sh[2..].iter().product::<usize>()) as f64;
                let mu_v = tape.value(mu);
                let var_v = tape.value(var);
                let unbiased = var_v.mapv(|v| v * n / (n - 1.0).max(1.0));
                let m = self.momentum;
                let new_mean = params.value(self.running_mean).mapv(|v| v * (1.0 - m)) + mu_v.mapv(|v| v * m);
                let new_var = params.value(self.running_var).mapv(|v| v * (1.0 - m)) + unbiased.mapv(|v| v * m);
                updates.push(self.running_mean, new_mean);
                updates.push(self.running_var, new_var);
                y
            }
            Mode::Eval => {
                let rm = params.value(self.running_mean);
                let rv = params.value(self.running_var);
                let inv = rv.mapv(|v| 1.0 / (v + self.eps).sqrt());
                let mu = tape.constant(rm.clone());
                let inv = tape.constant(inv);
                let xn = tape.ch_mul(tape.ch_sub(x, mu), inv);
                tape.ch_add(tape.ch_mul(xn, bound.var(self.gamma)), bound.var(self.beta))
            }
        }
    }
}

/// Instance normalization: per-sample, per-channel statistics over (H, W),
/// no affine parameters (the modulation that follows provides the affine).
pub struct InstanceNorm2d {
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new() -> Self {
        InstanceNorm2d { eps: 1e-5 }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let mu = tape.mean_hw(x);
        let neg_mu = tape.affine_const(mu, -1.0, 0.0);
        let xc = tape.bc_add(x, neg_mu);
        let var = tape.mean_hw(tape.mul(xc, xc));
        let inv = tape.recip(tape.sqrt(tape.affine_const(var, 1.0, self.eps)));
        tape.bc_mul(xc, inv)
    }
}

impl Default for InstanceNorm2d {
    fn default() -> Self {
        Self::new()
    }
}
