//! Encoding, perturbation crafting, the training objectives and the
//! optimizer loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::SampleSet;
use crate::denoiser::{Activation, Architecture, DenoiserParams, ParamVars};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{DataTransform, TrainedModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, Rng};
use crate::schedule::{NoiseSchedule, RaySchedule};
use crate::tensor::Tensor;

/// Slack allowed on the `‖δ‖∞ ≤ r` checks.
pub const RAY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Plain ε-regression.
    Ddpm,
    /// ε-regression plus `λ_t‖ε(x_adv) − ε(x_t)‖²` with adversarial `δ`.
    Invariance,
    /// Equivariant regularizer with a random `δ`.
    RobustRandom,
    /// Equivariant regularizer with an FGSM-crafted `δ`.
    RobustAdv,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ddpm => "ddpm",
            LossMode::Invariance => "invariance",
            LossMode::RobustRandom => "robust_random",
            LossMode::RobustAdv => "robust_adv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Center and rescale to unit average variance; the map is stored in the
    /// checkpoint and undone after sampling.
    Standardize,
}

/// Network shape; the data dimension and `T` come from the data and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub input_skip: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256, 256, 256],
            time_embed_dim: 32,
            activation: Activation::Silu,
            input_skip: false,
        }
    }
}

impl NetworkConfig {
    pub fn wide() -> Self {
        Self {
            hidden_dims: vec![1024, 1024],
            input_skip: true,
            ..Self::default()
        }
    }

    pub fn architecture(&self, data_dim: usize, max_timestep: usize) -> Architecture {
        Architecture {
            data_dim,
            hidden_dims: self.hidden_dims.clone(),
            time_embed_dim: self.time_embed_dim,
            activation: self.activation,
            max_timestep,
            input_skip: self.input_skip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceGuard {
    pub ema_decay: f64,
    pub factor: f64,
    pub window: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self {
            ema_decay: 0.99,
            factor: 10.0,
            window: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub lambda: f64,
    pub ray: RaySchedule,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub network: NetworkConfig,
    pub normalization: Normalization,
    /// Let gradient flow through the clean prediction in the equivariant target.
    pub symmetric_target: bool,
    /// Draw one `β` per batch row instead of one per step.
    pub per_element_beta: bool,
    /// Write a report row every `log_every` steps.
    pub log_every: usize,
    pub divergence: DivergenceGuard,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::RobustAdv,
            lambda: 0.3,
            ray: RaySchedule::default(),
            batch_size: 128,
            steps: 20_000,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            network: NetworkConfig::default(),
            normalization: Normalization::Standardize,
            symmetric_target: false,
            per_element_beta: false,
            log_every: 1,
            divergence: DivergenceGuard::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        if !(self.divergence.ema_decay >= 0.0 && self.divergence.ema_decay < 1.0 && self.divergence.factor > 1.0) {
            return Err(Error::config("divergence guard needs ema_decay in [0,1) and factor > 1"));
        }
        self.ray.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Random,
    Adversarial,
}

/// A perturbation `δ` in ε-units with the per-row `β` and ray it was drawn under.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationOutcome {
    pub delta: Tensor,
    pub betas: Vec<f64>,
    pub rays: Vec<f64>,
    pub kind: PerturbationKind,
}

impl PerturbationOutcome {
    pub fn check_bound(&self) -> Result<()> {
        check_rows_within(&self.delta, &self.rays)
    }
}

/// Expands a per-row argument that may be given once for the whole batch.
fn per_row<T: Copy>(values: &[T], rows: usize, op: &'static str) -> Result<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0]; rows]),
        n if n == rows => Ok(values.to_vec()),
        n => Err(Error::Shape {
            op,
            lhs: vec![n],
            rhs: vec![rows],
        }),
    }
}

fn check_rows_within(delta: &Tensor, bounds: &[f64]) -> Result<()> {
    let bounds = per_row(bounds, delta.rows(), "ray bound")?;
    for (i, r) in bounds.iter().enumerate() {
        let m = delta.row(i).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !(m <= r + RAY_TOLERANCE) {
            return Err(Error::OutOfRange {
                what: "perturbation inf-norm",
                value: m,
                allowed: format!("<= ray {r}"),
            });
        }
    }
    Ok(())
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`, with `ts` per row or shared.
pub fn encode(x0: &Tensor, eps: &Tensor, ts: &[usize], ns: &NoiseSchedule) -> Result<Tensor> {
    x0.expect_same_shape(eps, "encode")?;
    let ts = per_row(ts, x0.rows(), "encode timesteps")?;
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        ns.check_t(t)?;
        let (a, s) = (ns.alpha_bar(t).sqrt(), (1.0 - ns.alpha_bar(t)).sqrt());
        for (o, e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t)(ε + δ)`; rejects `δ` rows outside their ray.
pub fn encode_perturbed(
    x0: &Tensor,
    eps: &Tensor,
    delta: &Tensor,
    rays: &[f64],
    ts: &[usize],
    ns: &NoiseSchedule,
) -> Result<Tensor> {
    eps.expect_same_shape(delta, "encode_perturbed")?;
    check_rows_within(delta, rays)?;
    encode(x0, &eps.add(delta)?, ts, ns)
}

/// `x + √(1−ᾱ_t) δ` row by row.
pub fn displace(x: &Tensor, delta: &Tensor, ts: &[usize], ns: &NoiseSchedule) -> Result<Tensor> {
    x.expect_same_shape(delta, "displace")?;
    let ts = per_row(ts, x.rows(), "displace timesteps")?;
    let mut out = x.clone();
    for (i, &t) in ts.iter().enumerate() {
        ns.check_t(t)?;
        let s = (1.0 - ns.alpha_bar(t)).sqrt();
        for (o, d) in out.row_mut(i).iter_mut().zip(delta.row(i)) {
            *o += s * d;
        }
    }
    Ok(out)
}

/// One `β` for the batch, or one per row when `per_element`.
pub fn draw_betas(rs: &RaySchedule, rows: usize, per_element: bool, rng: &mut Rng) -> Vec<f64> {
    if per_element {
        (0..rows).map(|_| rng::uniform(rng, rs.beta_low, rs.beta_high)).collect()
    } else {
        vec![rng::uniform(rng, rs.beta_low, rs.beta_high); rows]
    }
}

/// `δ_i ~ U(−r_β(t_i), r_β(t_i))` per row.
pub fn sample_delta_random(
    rs: &RaySchedule,
    ns: &NoiseSchedule,
    ts: &[usize],
    betas: &[f64],
    dim: usize,
    rng: &mut Rng,
) -> Result<PerturbationOutcome> {
    let rows = ts.len().max(betas.len());
    let ts = per_row(ts, rows, "delta timesteps")?;
    let betas = per_row(betas, rows, "delta betas")?;
    let mut rays = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for (&t, &b) in ts.iter().zip(&betas) {
        let r = rs.ray(ns, t, b)?;
        rays.push(r);
        data.extend(rng::uniform_vec(rng, dim, r));
    }
    Ok(PerturbationOutcome {
        delta: Tensor::matrix(rows, dim, data)?,
        betas,
        rays,
        kind: PerturbationKind::Random,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `J = ‖ε_θ(x_t + √(1−ᾱ)δ) − ε_θ(x_t)‖²` and its gradient with respect to
/// the displaced input. The clean prediction is a constant.
pub fn perturbation_objective(
    params: &DenoiserParams,
    x_t: &Tensor,
    delta: &Tensor,
    ts: &[usize],
    ns: &NoiseSchedule,
    clean_pred: &Tensor,
) -> Result<(f64, Tensor)> {
    let x_start = displace(x_t, delta, ts, ns)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let xv = tape.leaf(x_start);
    let pred = params.forward_on(&mut tape, &pv, xv, ts)?;
    let target = tape.constant(clean_pred.clone());
    let diff = tape.sub(pred, target)?;
    let j = tape.l2_norm_sq(diff);
    let value = tape.value(j).value();
    let grad = tape.backward(j, &[xv])?.remove(0);
    grad.check_finite("adversarial perturbation gradient")?;
    Ok((value, grad))
}

/// One FGSM step from `random`: `δ_adv = clamp(δ_ran + (r/√3)·sign(∇J), −r, r)`.
///
/// `clean_pred` is `ε_θ(x_t)`; it is recomputed when not supplied.
pub fn sample_delta_adversarial(
    params: &DenoiserParams,
    x_t: &Tensor,
    ts: &[usize],
    random: &PerturbationOutcome,
    ns: &NoiseSchedule,
    clean_pred: Option<&Tensor>,
) -> Result<PerturbationOutcome> {
    let owned;
    let clean = match clean_pred {
        Some(c) => c,
        None => {
            owned = params.predict(x_t, ts)?;
            &owned
        }
    };
    let (_, grad) = perturbation_objective(params, x_t, &random.delta, ts, ns, clean)?;
    let mut delta = random.delta.clone();
    let sqrt3 = 3f64.sqrt();
    for (i, &r) in random.rays.iter().enumerate() {
        for (d, g) in delta.row_mut(i).iter_mut().zip(grad.row(i)) {
            *d = (*d + r / sqrt3 * sign(*g)).clamp(-r, r);
        }
    }
    Ok(PerturbationOutcome {
        delta,
        betas: random.betas.clone(),
        rays: random.rays.clone(),
        kind: PerturbationKind::Adversarial,
    })
}

/// `λ_t = λ√3 / r_β(t)`.
pub fn lambda_t(lambda: f64, ray_value: f64) -> Result<f64> {
    if !(ray_value > 0.0) {
        return Err(Error::OutOfRange {
            what: "ray value",
            value: ray_value,
            allowed: "> 0".into(),
        });
    }
    Ok(lambda * 3f64.sqrt() / ray_value)
}

/// Regularizer attached to the ε-regression term.
#[derive(Clone, Copy, Debug)]
pub enum Regularizer<'a> {
    None,
    /// `λ_t‖ε(x_adv) − ε(x_t)‖²`.
    Invariance { x_adv: &'a Tensor, lambda_t: &'a [f64] },
    /// `λ_t‖ε(x_adv) − [ε(x_t) + δ]‖²`; the bracket is a constant unless
    /// `symmetric`.
    Equivariant {
        x_adv: &'a Tensor,
        delta: &'a Tensor,
        lambda_t: &'a [f64],
        symmetric: bool,
    },
}

/// A training objective evaluated at fixed inputs.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub x_t: &'a Tensor,
    pub eps: &'a Tensor,
    pub ts: &'a [usize],
    pub reg: Regularizer<'a>,
}

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub dm: f64,
    pub reg: f64,
}

struct Recorded {
    total: Var,
    dm: Var,
    reg: Option<Var>,
}

/// Row sums of `sq` weighted by `weights`, averaged over rows.
fn weighted_row_mean(tape: &mut Tape, sq: Var, weights: &[f64]) -> Result<Var> {
    let (rows, cols) = (tape.value(sq).rows(), tape.value(sq).cols());
    let weights = per_row(weights, rows, "lambda_t")?;
    let w: Vec<f64> = weights.iter().flat_map(|&w| std::iter::repeat_n(w, cols)).collect();
    let wv = tape.constant(Tensor::matrix(rows, cols, w)?);
    let weighted = tape.mul(sq, wv)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

fn record(
    tape: &mut Tape,
    params: &DenoiserParams,
    pv: &ParamVars,
    clean_pred: Var,
    obj: &Objective,
) -> Result<Recorded> {
    let rows = obj.x_t.rows() as f64;
    let eps = tape.constant(obj.eps.clone());
    let resid = tape.sub(clean_pred, eps)?;
    let sq = tape.l2_norm_sq(resid);
    let dm = tape.scale(sq, 1.0 / rows);
    let reg = match obj.reg {
        Regularizer::None => None,
        Regularizer::Invariance { x_adv, lambda_t } => {
            let xa = tape.constant(x_adv.clone());
            let adv_pred = params.forward_on(tape, pv, xa, obj.ts)?;
            let diff = tape.sub(adv_pred, clean_pred)?;
            let sq = tape.mul(diff, diff)?;
            Some(weighted_row_mean(tape, sq, lambda_t)?)
        }
        Regularizer::Equivariant {
            x_adv,
            delta,
            lambda_t,
            symmetric,
        } => {
            let xa = tape.constant(x_adv.clone());
            let adv_pred = params.forward_on(tape, pv, xa, obj.ts)?;
            let base = if symmetric { clean_pred } else { tape.detach(clean_pred) };
            let dv = tape.constant(delta.clone());
            let target = tape.add(base, dv)?;
            let diff = tape.sub(adv_pred, target)?;
            let sq = tape.mul(diff, diff)?;
            Some(weighted_row_mean(tape, sq, lambda_t)?)
        }
    };
    let total = match reg {
        Some(r) => tape.add(dm, r)?,
        None => dm,
    };
    Ok(Recorded { total, dm, reg })
}

fn parts(tape: &Tape, rec: &Recorded) -> LossParts {
    LossParts {
        total: tape.value(rec.total).value(),
        dm: tape.value(rec.dm).value(),
        reg: rec.reg.map_or(0.0, |r| tape.value(r).value()),
    }
}

impl Objective<'_> {
    pub fn evaluate(&self, params: &DenoiserParams) -> Result<LossParts> {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape, false);
        let xv = tape.constant(self.x_t.clone());
        let clean = params.forward_on(&mut tape, &pv, xv, self.ts)?;
        let rec = record(&mut tape, params, &pv, clean, self)?;
        Ok(parts(&tape, &rec))
    }

    /// Loss components and `∂total/∂θ` in layer order.
    pub fn gradient(&self, params: &DenoiserParams) -> Result<(LossParts, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape, true);
        let xv = tape.constant(self.x_t.clone());
        let clean = params.forward_on(&mut tape, &pv, xv, self.ts)?;
        let rec = record(&mut tape, params, &pv, clean, self)?;
        let grads = tape.backward(rec.total, &pv.0)?;
        Ok((parts(&tape, &rec), grads))
    }
}

/// `mean_i ‖ε_i − ε_θ(x_t(x0_i, ε_i), t_i)‖²`.
pub fn loss_ddpm(params: &DenoiserParams, x0: &Tensor, eps: &Tensor, ts: &[usize], ns: &NoiseSchedule) -> Result<f64> {
    let x_t = encode(x0, eps, ts, ns)?;
    let obj = Objective {
        x_t: &x_t,
        eps,
        ts,
        reg: Regularizer::None,
    };
    Ok(obj.evaluate(params)?.total)
}

pub fn loss_invariance(
    params: &DenoiserParams,
    x_t: &Tensor,
    x_t_adv: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    lambda_t: &[f64],
) -> Result<LossParts> {
    Objective {
        x_t,
        eps,
        ts,
        reg: Regularizer::Invariance { x_adv: x_t_adv, lambda_t },
    }
    .evaluate(params)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_at(
    params: &DenoiserParams,
    x_t: &Tensor,
    x_t_adv: &Tensor,
    delta: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    lambda_t: &[f64],
    symmetric: bool,
) -> Result<LossParts> {
    Objective {
        x_t,
        eps,
        ts,
        reg: Regularizer::Equivariant {
            x_adv: x_t_adv,
            delta,
            lambda_t,
            symmetric,
        },
    }
    .evaluate(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss_dm: f64,
    pub loss_reg: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<TrainLogRow>,
}

impl TrainReport {
    pub const HEADER: &'static str = "step,loss_dm,loss_reg,grad_norm,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                r.step, r.loss_dm, r.loss_reg, r.grad_norm, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        io::atomic_write(path, self.to_csv().as_bytes())
    }

    /// Mean total loss over the last `n` logged rows.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss_dm + r.loss_reg).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// EMA of the loss with a "stuck far above its best" trip wire.
struct DivergenceDetector {
    guard: DivergenceGuard,
    ema: Option<f64>,
    minimum: f64,
    above: usize,
}

impl DivergenceDetector {
    fn new(guard: DivergenceGuard) -> Self {
        Self {
            guard,
            ema: None,
            minimum: f64::INFINITY,
            above: 0,
        }
    }

    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let d = self.guard.ema_decay;
        let ema = self.ema.map_or(loss, |e| d * e + (1.0 - d) * loss);
        self.ema = Some(ema);
        self.minimum = self.minimum.min(ema);
        if ema > self.guard.factor * self.minimum {
            self.above += 1;
            if self.above >= self.guard.window {
                return Err(Error::Diverged {
                    step,
                    running: ema,
                    minimum: self.minimum,
                    factor: self.guard.factor,
                    window: self.guard.window,
                });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }
}

/// Inputs drawn for one optimizer step.
struct StepDraws {
    x0: Tensor,
    eps: Tensor,
    ts: Vec<usize>,
    random: PerturbationOutcome,
}

fn draw_step(cfg: &TrainConfig, data: &Tensor, ns: &NoiseSchedule, rng: &mut Rng) -> Result<StepDraws> {
    let (n, d, b) = (data.rows(), data.cols(), cfg.batch_size);
    let idx: Vec<usize> = (0..b).map(|_| rng::uniform_int(rng, 0, n - 1)).collect();
    let x0 = data.gather_rows(&idx);
    let eps = Tensor::matrix(b, d, rng::normal_vec(rng, b * d))?;
    let ts: Vec<usize> = (0..b).map(|_| rng::uniform_int(rng, 1, ns.steps())).collect();
    let betas = draw_betas(&cfg.ray, b, cfg.per_element_beta, rng);
    let random = sample_delta_random(&cfg.ray, ns, &ts, &betas, d, rng)?;
    Ok(StepDraws { x0, eps, ts, random })
}

/// Runs one optimizer step's forward/backward. Returns loss parts and gradients.
fn step_gradient(
    cfg: &TrainConfig,
    params: &DenoiserParams,
    ns: &NoiseSchedule,
    draws: &StepDraws,
) -> Result<(LossParts, Vec<Tensor>)> {
    let x_t = encode(&draws.x0, &draws.eps, &draws.ts, ns)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let xv = tape.constant(x_t.clone());
    let clean = params.forward_on(&mut tape, &pv, xv, &draws.ts)?;

    let delta = match cfg.loss_mode {
        LossMode::Ddpm => None,
        LossMode::RobustRandom => Some(draws.random.clone()),
        LossMode::Invariance | LossMode::RobustAdv => {
            let reference = tape.value(clean).clone();
            let adv = sample_delta_adversarial(params, &x_t, &draws.ts, &draws.random, ns, Some(&reference))?;
            debug_assert!(adv.check_bound().is_ok());
            Some(adv)
        }
    };
    let (x_adv, lambdas) = match &delta {
        Some(p) => {
            let x_adv = encode_perturbed(&draws.x0, &draws.eps, &p.delta, &p.rays, &draws.ts, ns)?;
            let lambdas = p
                .rays
                .iter()
                .map(|&r| lambda_t(cfg.lambda, r))
                .collect::<Result<Vec<_>>>()?;
            (Some(x_adv), lambdas)
        }
        None => (None, Vec::new()),
    };
    let reg = match (cfg.loss_mode, &x_adv, &delta) {
        (LossMode::Invariance, Some(xa), _) => Regularizer::Invariance {
            x_adv: xa,
            lambda_t: &lambdas,
        },
        (LossMode::RobustRandom | LossMode::RobustAdv, Some(xa), Some(p)) => Regularizer::Equivariant {
            x_adv: xa,
            delta: &p.delta,
            lambda_t: &lambdas,
            symmetric: cfg.symmetric_target,
        },
        _ => Regularizer::None,
    };
    let obj = Objective {
        x_t: &x_t,
        eps: &draws.eps,
        ts: &draws.ts,
        reg,
    };
    let rec = record(&mut tape, params, &pv, clean, &obj)?;
    let grads = tape.backward(rec.total, &pv.0)?;
    Ok((parts(&tape, &rec), grads))
}

/// Trains a fresh denoiser on `data.points`.
///
/// Every mode draws the same per-step random numbers (batch indices, ε, t,
/// β, random δ), so runs that differ only in `loss_mode` or `lambda` see the
/// same batches.
pub fn train(cfg: &TrainConfig, data: &SampleSet, ns: &NoiseSchedule) -> Result<(TrainedModel, TrainReport)> {
    train_with(cfg, data, ns, |_, _| {})
}

/// [`train`] with a callback invoked after every logged row.
pub fn train_with(
    cfg: &TrainConfig,
    data: &SampleSet,
    ns: &NoiseSchedule,
    mut on_log: impl FnMut(&TrainLogRow, &DenoiserParams),
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    data.points.check_finite("training data")?;
    let transform = match cfg.normalization {
        Normalization::None => DataTransform::identity(data.dim()),
        Normalization::Standardize => DataTransform::standardize(&data.points),
    };
    let points = transform.to_model(&data.points);
    let arch = cfg.network.architecture(data.dim(), ns.steps());
    let mut params = DenoiserParams::init(arch, &mut rng::from_seed(rng::child_seed(cfg.seed, 0)))?;
    let mut rng = rng::from_seed(rng::child_seed(cfg.seed, 1));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut detector = DivergenceDetector::new(cfg.divergence.clone());
    let mut report = TrainReport::default();
    let start = Instant::now();

    for step in 1..=cfg.steps {
        let draws = draw_step(cfg, &points, ns, &mut rng)?;
        let (loss, grads) = step_gradient(cfg, &params, ns, &draws)?;
        let grad_norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("parameter gradient at step {step}")));
        }
        detector.observe(step, loss.total)?;
        opt.update(params.tensors_mut(), &grads)?;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let row = TrainLogRow {
                step,
                loss_dm: loss.dm,
                loss_reg: loss.reg,
                grad_norm,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_log(&row, &params);
            report.rows.push(row);
        }
    }
    let model = TrainedModel {
        params,
        schedule: ns.clone(),
        transform,
        step: cfg.steps,
        train_config_hash: io::hash_json(cfg)?,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, DatasetKind, DatasetSpec};

    fn ns() -> NoiseSchedule {
        NoiseSchedule::linear_default(50).unwrap()
    }

    fn tiny_params(seed: u64) -> DenoiserParams {
        let arch = Architecture {
            data_dim: 3,
            hidden_dims: vec![16, 16],
            time_embed_dim: 4,
            activation: Activation::Silu,
            max_timestep: 50,
            input_skip: false,
        };
        let mut p = DenoiserParams::init(arch, &mut rng::from_seed(seed)).unwrap();
        // Non-zero output layer so gradients reach every parameter.
        let last = p.layers.len() - 1;
        let n = p.layers[last].weight.numel();
        p.layers[last].weight = Tensor::matrix(16, 3, rng::uniform_vec(&mut rng::from_seed(seed + 1), n, 0.3)).unwrap();
        p
    }

    fn batch(seed: u64, rows: usize) -> (Tensor, Tensor) {
        let mut r = rng::from_seed(seed);
        let x0 = Tensor::matrix(rows, 3, rng::normal_vec(&mut r, rows * 3)).unwrap();
        let eps = Tensor::matrix(rows, 3, rng::normal_vec(&mut r, rows * 3)).unwrap();
        (x0, eps)
    }

    #[test]
    fn encode_with_zero_noise_scales_signal() {
        let ns = ns();
        let (x0, _) = batch(1, 4);
        let out = encode(&x0, &Tensor::zeros(&[4, 3]), &[7], &ns).unwrap();
        assert_eq!(out, x0.scale(ns.alpha_bar(7).sqrt()));
    }

    #[test]
    fn encode_rejects_bad_timestep() {
        let (x0, eps) = batch(1, 2);
        assert!(encode(&x0, &eps, &[0], &ns()).is_err());
        assert!(encode(&x0, &eps, &[51], &ns()).is_err());
    }

    #[test]
    fn perturbed_encoding_shifts_by_scaled_delta() {
        let ns = ns();
        let (x0, eps) = batch(2, 3);
        let delta = Tensor::full(&[3, 3], 0.5);
        let a = encode(&x0, &eps, &[20], &ns).unwrap();
        let b = encode_perturbed(&x0, &eps, &delta, &[1.0], &[20], &ns).unwrap();
        let s = (1.0 - ns.alpha_bar(20)).sqrt();
        let shift = b.sub(&a).unwrap();
        for v in shift.data() {
            assert!((v - s * 0.5).abs() < 1e-14);
        }
        assert_eq!(
            encode_perturbed(&x0, &eps, &Tensor::zeros(&[3, 3]), &[1.0], &[20], &ns).unwrap(),
            a
        );
        let too_big = Tensor::full(&[3, 3], 2.0);
        assert!(encode_perturbed(&x0, &eps, &too_big, &[1.0], &[20], &ns).is_err());
    }

    #[test]
    fn adversarial_delta_stays_on_random_start_for_zero_network() {
        let ns = ns();
        let p = DenoiserParams::zeros(tiny_params(0).arch).unwrap();
        let (x0, eps) = batch(3, 5);
        let ts = vec![10, 20, 30, 40, 50];
        let x_t = encode(&x0, &eps, &ts, &ns).unwrap();
        let rs = RaySchedule::default();
        let mut r = rng::from_seed(4);
        let random = sample_delta_random(&rs, &ns, &ts, &[1.0], 3, &mut r).unwrap();
        let adv = sample_delta_adversarial(&p, &x_t, &ts, &random, &ns, None).unwrap();
        assert_eq!(adv.delta, random.delta);
        assert_eq!(adv.kind, PerturbationKind::Adversarial);
    }

    #[test]
    fn adversarial_step_does_not_decrease_objective_locally() {
        let ns = ns();
        let p = tiny_params(5);
        let (x0, eps) = batch(6, 32);
        let ts: Vec<usize> = (1..=32).collect();
        let x_t = encode(&x0, &eps, &ts, &ns).unwrap();
        let clean = p.predict(&x_t, &ts).unwrap();
        let rs = RaySchedule::default();
        let random = sample_delta_random(&rs, &ns, &ts, &[1.0], 3, &mut rng::from_seed(7)).unwrap();
        let adv = sample_delta_adversarial(&p, &x_t, &ts, &random, &ns, Some(&clean)).unwrap();
        adv.check_bound().unwrap();
        let (j_ran, _) = perturbation_objective(&p, &x_t, &random.delta, &ts, &ns, &clean).unwrap();
        let (j_adv, _) = perturbation_objective(&p, &x_t, &adv.delta, &ts, &ns, &clean).unwrap();
        assert!(j_adv >= j_ran, "{j_adv} < {j_ran}");
    }

    #[test]
    fn lambda_t_algebra() {
        assert_eq!(lambda_t(0.0, 2.0).unwrap(), 0.0);
        assert!((lambda_t(0.3, 3f64.sqrt() * 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert!(lambda_t(0.3, 0.0).is_err());
    }

    #[test]
    fn oracle_stubs_zero_the_losses() {
        // With x_adv = x_t and δ = 0 both regularizers vanish and the total
        // is the plain DM loss.
        let p = tiny_params(8);
        let (x0, eps) = batch(9, 6);
        let ns = ns();
        let x_t = encode(&x0, &eps, &[5], &ns).unwrap();
        let inv = loss_invariance(&p, &x_t, &x_t, &eps, &[5], &[0.7]).unwrap();
        assert_eq!(inv.reg, 0.0);
        let at = loss_at(&p, &x_t, &x_t, &Tensor::zeros(&[6, 3]), &eps, &[5], &[0.7], false).unwrap();
        assert_eq!(at.reg, 0.0);
        assert_eq!(at.total, at.dm);
        assert_eq!(at.dm, loss_ddpm(&p, &x0, &eps, &[5], &ns).unwrap());
    }

    #[test]
    fn lambda_zero_reduces_to_ddpm() {
        let p = tiny_params(10);
        let (x0, eps) = batch(11, 6);
        let ns = ns();
        let x_t = encode(&x0, &eps, &[9], &ns).unwrap();
        let x_adv = x_t.map(|v| v + 0.1);
        let delta = Tensor::full(&[6, 3], 0.2);
        let at = loss_at(&p, &x_t, &x_adv, &delta, &eps, &[9], &[0.0], false).unwrap();
        let inv = loss_invariance(&p, &x_t, &x_adv, &eps, &[9], &[0.0]).unwrap();
        let ddpm = loss_ddpm(&p, &x0, &eps, &[9], &ns).unwrap();
        assert_eq!(at.total, ddpm);
        assert_eq!(inv.total, ddpm);
    }

    #[test]
    fn detached_target_blocks_clean_branch_gradient() {
        // With x_adv far from x_t, the symmetric variant also pulls the clean
        // prediction, so the two gradients must differ.
        let p = tiny_params(12);
        let (x0, eps) = batch(13, 4);
        let ns = ns();
        let x_t = encode(&x0, &eps, &[30], &ns).unwrap();
        let x_adv = x_t.map(|v| v + 0.5);
        let delta = Tensor::full(&[4, 3], 0.1);
        let mk = |symmetric| Objective {
            x_t: &x_t,
            eps: &eps,
            ts: &[30],
            reg: Regularizer::Equivariant {
                x_adv: &x_adv,
                delta: &delta,
                lambda_t: &[1.0],
                symmetric,
            },
        };
        let (la, ga) = mk(false).gradient(&p).unwrap();
        let (lb, gb) = mk(true).gradient(&p).unwrap();
        assert_eq!(la, lb);
        assert_ne!(ga, gb);
    }

    fn plane_data(n: usize) -> SampleSet {
        data::generate(&DatasetSpec {
            kind: DatasetKind::oblique_plane(),
            n_samples: n,
            seed: 3,
        })
        .unwrap()
    }

    fn short_cfg(mode: LossMode, lambda: f64) -> TrainConfig {
        TrainConfig {
            loss_mode: mode,
            lambda,
            batch_size: 16,
            steps: 30,
            lr: 1e-3,
            seed: 21,
            network: NetworkConfig {
                hidden_dims: vec![16, 16],
                time_embed_dim: 8,
                activation: Activation::Silu,
                input_skip: true,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = plane_data(64);
        let ns = NoiseSchedule::linear_default(20).unwrap();
        let cfg = short_cfg(LossMode::RobustAdv, 0.3);
        let (a, ra) = train(&cfg, &data, &ns).unwrap();
        let (b, rb) = train(&cfg, &data, &ns).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.rows.len(), rb.rows.len());
        for (x, y) in ra.rows.iter().zip(&rb.rows) {
            assert_eq!((x.loss_dm, x.loss_reg, x.grad_norm), (y.loss_dm, y.loss_reg, y.grad_norm));
        }
    }

    #[test]
    fn zero_lambda_matches_ddpm_bit_for_bit() {
        let data = plane_data(64);
        let ns = NoiseSchedule::linear_default(20).unwrap();
        let (ddpm, _) = train(&short_cfg(LossMode::Ddpm, 0.3), &data, &ns).unwrap();
        for mode in [LossMode::RobustAdv, LossMode::RobustRandom, LossMode::Invariance] {
            let (m, _) = train(&short_cfg(mode, 0.0), &data, &ns).unwrap();
            assert_eq!(m.params, ddpm.params, "{mode:?}");
        }
    }

    #[test]
    fn divergence_detector_trips() {
        let mut d = DivergenceDetector::new(DivergenceGuard {
            ema_decay: 0.0,
            factor: 10.0,
            window: 3,
        });
        d.observe(1, 1.0).unwrap();
        d.observe(2, 11.0).unwrap();
        d.observe(3, 11.0).unwrap();
        assert!(matches!(d.observe(4, 11.0), Err(Error::Diverged { .. })));
        assert!(d.observe(5, f64::NAN).is_err());
    }

    #[test]
    fn report_csv_header() {
        let r = TrainReport {
            rows: vec![TrainLogRow {
                step: 1,
                loss_dm: 0.5,
                loss_reg: 0.0,
                grad_norm: 2.0,
                seconds: 0.1,
            }],
        };
        assert_eq!(r.to_csv(), "step,loss_dm,loss_reg,grad_norm,seconds\n1,0.5,0.0,2.0,0.1\n");
    }
}
