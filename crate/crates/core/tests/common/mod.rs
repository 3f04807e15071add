//! Numerics oracles shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use advdiff::autodiff::Tape;
use advdiff::denoiser::{Activation, Architecture, DenoiserParams};
use advdiff::optim::Adam;
use advdiff::rng::{self, Rng};
use advdiff::sampler::xhat0;
use advdiff::training::encode;
use advdiff::{NoiseSchedule, Tensor};

pub const FD_STEP: f64 = 1e-6;

/// A denoiser of random shape with every parameter drawn from `U(-0.6, 0.6)`.
pub fn random_denoiser(rng: &mut Rng, activation: Activation) -> DenoiserParams {
    let depth = rng::uniform_int(rng, 1, 2);
    let arch = Architecture {
        data_dim: rng::uniform_int(rng, 1, 5),
        hidden_dims: (0..depth).map(|_| rng::uniform_int(rng, 2, 8)).collect(),
        time_embed_dim: 2 * rng::uniform_int(rng, 1, 3),
        activation,
        max_timestep: 40,
        input_skip: rng::uniform(rng, 0.0, 1.0) < 0.5,
    };
    let flat = rng::uniform_vec(rng, arch.num_params(), 0.6);
    DenoiserParams::unflatten(arch, &flat).unwrap()
}

/// `Σ w ⊙ ε_θ(x, t)`, a scalar probe of the network output.
fn probe(params: &DenoiserParams, x: &Tensor, ts: &[usize], w: &Tensor) -> f64 {
    let out = params.predict(x, ts).unwrap();
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(a.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Norm-wise relative error of the tape's input and parameter gradients
/// against central differences, for one random instance.
pub fn fd_gradient_errors(seed: u64) -> (f64, f64) {
    let mut rng = rng::from_seed(seed);
    let params = random_denoiser(&mut rng, Activation::Silu);
    let d = params.arch.data_dim;
    let rows = rng::uniform_int(&mut rng, 1, 3);
    let x = Tensor::matrix(rows, d, rng::normal_vec(&mut rng, rows * d)).unwrap();
    let ts: Vec<usize> = (0..rows).map(|_| rng::uniform_int(&mut rng, 1, 40)).collect();
    let w = Tensor::matrix(rows, d, rng::normal_vec(&mut rng, rows * d)).unwrap();

    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let xv = tape.leaf(x.clone());
    let out = params.forward_on(&mut tape, &pv, xv, &ts).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let mut wrt = vec![xv];
    wrt.extend(&pv.0);
    let grads = tape.backward(loss, &wrt).unwrap();

    let mut fd_x = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi.data_mut()[i] += FD_STEP;
        lo.data_mut()[i] -= FD_STEP;
        fd_x.push((probe(&params, &hi, &ts, &w) - probe(&params, &lo, &ts, &w)) / (2.0 * FD_STEP));
    }
    let flat = params.flatten();
    let mut fd_p = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut hi = flat.clone();
        let mut lo = flat.clone();
        hi[i] += FD_STEP;
        lo[i] -= FD_STEP;
        let ph = DenoiserParams::unflatten(params.arch.clone(), &hi).unwrap();
        let pl = DenoiserParams::unflatten(params.arch.clone(), &lo).unwrap();
        fd_p.push((probe(&ph, &x, &ts, &w) - probe(&pl, &x, &ts, &w)) / (2.0 * FD_STEP));
    }
    let ad_p: Vec<f64> = grads[1..].iter().flat_map(|g| g.data().iter().copied()).collect();
    (rel_err(grads[0].data(), &fd_x), rel_err(&ad_p, &fd_p))
}

/// Worst input and parameter gradient errors over `count` instances.
pub fn fd_suite(count: u64) -> (f64, f64) {
    (0..count).map(fd_gradient_errors).fold((0.0, 0.0), |(a, b), (x, p)| (a.max(x), b.max(p)))
}

/// Textbook Adam on a flat vector.
pub struct RefAdam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            theta[i] -= self.lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

/// Largest deviation between the library optimizer and [`RefAdam`] over
/// `steps` updates on the quadratic `Σ c_i (θ_i − a_i)²`.
pub fn adam_deviation(steps: usize) -> f64 {
    let mut rng = rng::from_seed(77);
    let n = 13;
    let target = rng::normal_vec(&mut rng, n);
    let curv: Vec<f64> = (0..n).map(|_| rng::uniform(&mut rng, 0.1, 5.0)).collect();
    let start = rng::normal_vec(&mut rng, n);
    let grad = |theta: &[f64]| -> Vec<f64> { (0..n).map(|i| 2.0 * curv[i] * (theta[i] - target[i])).collect() };

    let mut lib = vec![Tensor::vector(start[..5].to_vec()), Tensor::matrix(2, 4, start[5..].to_vec()).unwrap()];
    let mut opt = Adam::new(0.01);
    let mut reference = start.clone();
    let mut ref_opt = RefAdam::new(0.01, n);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let flat: Vec<f64> = lib.iter().flat_map(|t| t.data().iter().copied()).collect();
        let g = grad(&flat);
        let grads = vec![Tensor::vector(g[..5].to_vec()), Tensor::matrix(2, 4, g[5..].to_vec()).unwrap()];
        opt.update(lib.iter_mut(), &grads).unwrap();
        let gr = grad(&reference);
        ref_opt.step(&mut reference, &gr);
        let flat: Vec<f64> = lib.iter().flat_map(|t| t.data().iter().copied()).collect();
        for (a, b) in flat.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest `|x̂₀(x_t(x₀, ε), ε) − x₀|` over all `t` of a 1000-step schedule.
pub fn xhat0_roundtrip_error() -> f64 {
    let ns = NoiseSchedule::linear_default(1000).unwrap();
    let mut rng = rng::from_seed(3);
    let x0 = Tensor::matrix(16, 5, rng::normal_vec(&mut rng, 80)).unwrap();
    let eps = Tensor::matrix(16, 5, rng::normal_vec(&mut rng, 80)).unwrap();
    let mut worst: f64 = 0.0;
    for t in 1..=ns.steps() {
        let xt = encode(&x0, &eps, &[t], &ns).unwrap();
        let back = xhat0(&xt, &eps, t, &ns).unwrap();
        worst = worst.max(back.sub(&x0).unwrap().max_abs());
    }
    worst
}
