//! Reverse-process sampling, the `x̂₀` / posterior-mean estimates, and
//! trajectory recording.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{DataTransform, TrainedModel};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Anything that predicts ε for a batch of states at a shared timestep.
pub trait EpsModel {
    fn data_dim(&self) -> usize;
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl EpsModel for DenoiserParams {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.predict(x, &[t])
    }
}

/// The optimal ε-predictor for data concentrated at one point `x0`:
/// `ε*(x_t) = (x_t − √ᾱ_t x0) / √(1−ᾱ_t)`.
#[derive(Clone, Debug)]
pub struct DiracOracle {
    pub x0: Vec<f64>,
    pub schedule: NoiseSchedule,
}

impl EpsModel for DiracOracle {
    fn data_dim(&self) -> usize {
        self.x0.len()
    }

    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (v, c) in out.row_mut(i).iter_mut().zip(&self.x0) {
                *v = (*v - a * c) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ancestral,
    Deterministic,
}

/// Standard deviation of the ancestral noise added at step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `√σ(t)`: the forward-step standard deviation.
    Sqrt,
    /// `σ(t)` taken literally as a standard deviation.
    Literal,
}

impl NoiseScale {
    pub fn std(self, ns: &NoiseSchedule, t: usize) -> f64 {
        match self {
            NoiseScale::Sqrt => ns.sigma(t).sqrt(),
            NoiseScale::Literal => ns.sigma(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n: usize,
    /// Number of network evaluations; `None` means `T`.
    pub steps: Option<usize>,
    pub mode: SamplerMode,
    pub noise: NoiseScale,
    pub record: bool,
    /// Keep every `thin`-th state of a recorded trajectory (plus both ends).
    pub thin: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            steps: None,
            mode: SamplerMode::Deterministic,
            noise: NoiseScale::Sqrt,
            record: false,
            thin: 1,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, ns: &NoiseSchedule) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("sample count must be >= 1"));
        }
        if self.thin == 0 {
            return Err(Error::config("trajectory thinning must be >= 1"));
        }
        let steps = self.steps.unwrap_or(ns.steps());
        if steps == 0 || steps > ns.steps() {
            return Err(Error::config(format!("steps must be in 1..={}, got {steps}", ns.steps())));
        }
        if steps < ns.steps() && self.mode == SamplerMode::Ancestral {
            return Err(Error::config("reduced-step sampling is deterministic only; use mode=deterministic"));
        }
        Ok(())
    }
}

/// One recorded state and what happened to the chain at that timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub t: usize,
    pub x: Vec<f64>,
    pub attacked: bool,
    pub delta_inf_norm: f64,
    /// Seed of the ancestral noise drawn when leaving this state.
    pub z_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub chain: usize,
    /// Seed of the chain's stream; determines `x_T` and every `z`.
    pub seed: u64,
    pub states: Vec<TrajectoryState>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, |s| s.x.len());
        let mut out = String::from("t");
        for j in 0..d {
            out.push_str(&format!(",dim_{j}"));
        }
        out.push('\n');
        for s in &self.states {
            out.push_str(&s.t.to_string());
            for v in &s.x {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrajectoryManifest {
    format: String,
    dim: usize,
    chains: Vec<ChainEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ChainEntry {
    chain: usize,
    seed: u64,
    file: String,
    timesteps: Vec<usize>,
    attacked: Vec<bool>,
    delta_inf_norm: Vec<f64>,
    z_seed: Vec<Option<u64>>,
}

/// Writes `chain_<i>.csv` files and `trajectories.json` into `dir`.
pub fn write_trajectories(dir: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut chains = Vec::with_capacity(trajs.len());
    for tr in trajs {
        let file = format!("chain_{:05}.csv", tr.chain);
        io::atomic_write(&dir.join(&file), tr.to_csv().as_bytes())?;
        chains.push(ChainEntry {
            chain: tr.chain,
            seed: tr.seed,
            file,
            timesteps: tr.states.iter().map(|s| s.t).collect(),
            attacked: tr.states.iter().map(|s| s.attacked).collect(),
            delta_inf_norm: tr.states.iter().map(|s| s.delta_inf_norm).collect(),
            z_seed: tr.states.iter().map(|s| s.z_seed).collect(),
        });
    }
    let manifest = TrajectoryManifest {
        format: "advdiff-trajectories/1".into(),
        dim: trajs.first().and_then(|t| t.states.first()).map_or(0, |s| s.x.len()),
        chains,
    };
    io::write_json(&dir.join("trajectories.json"), &manifest)
}

/// Reads back what [`write_trajectories`] wrote.
pub fn read_trajectories(dir: &Path) -> Result<Vec<Trajectory>> {
    let manifest_path = dir.join("trajectories.json");
    let manifest: TrajectoryManifest = io::read_json(&manifest_path)?;
    let mut out = Vec::with_capacity(manifest.chains.len());
    for c in manifest.chains {
        let path = dir.join(&c.file);
        let text = io::read_to_string(&path)?;
        let mut states = Vec::new();
        for (k, line) in text.lines().skip(1).filter(|l| !l.is_empty()).enumerate() {
            let mut fields = line.split(',');
            let t: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::format(&path, format!("row {}: bad timestep", k + 1)))?;
            let x = fields
                .map(|f| f.parse::<f64>().map_err(|e| Error::format(&path, format!("row {}: {e}", k + 1))))
                .collect::<Result<Vec<_>>>()?;
            if x.len() != manifest.dim || c.timesteps.get(k) != Some(&t) {
                return Err(Error::format(&path, format!("row {} disagrees with manifest", k + 1)));
            }
            states.push(TrajectoryState {
                t,
                x,
                attacked: c.attacked[k],
                delta_inf_norm: c.delta_inf_norm[k],
                z_seed: c.z_seed[k],
            });
        }
        out.push(Trajectory {
            chain: c.chain,
            seed: c.seed,
            states,
        });
    }
    Ok(out)
}

/// `x̂₀ = (x_t − √(1−ᾱ_t) ε) / √ᾱ_t`.
pub fn xhat0(x_t: &Tensor, eps_pred: &Tensor, t: usize, ns: &NoiseSchedule) -> Result<Tensor> {
    ns.check_t(t)?;
    let ab = ns.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_pred, "xhat0", |x, e| (x - s * e) / a)
}

/// Coefficients `(c₀, c_t)` of `μ̃_t = c₀ x̂₀ + c_t x_t`.
pub fn posterior_coefficients(t: usize, ns: &NoiseSchedule) -> Result<(f64, f64)> {
    ns.check_t(t)?;
    if t < 2 {
        return Err(Error::OutOfRange {
            what: "posterior mean timestep",
            value: t as f64,
            allowed: format!("2..={}", ns.steps()),
        });
    }
    let (ab, ab_prev, sigma) = (ns.alpha_bar(t), ns.alpha_bar(t - 1), ns.sigma(t));
    Ok((
        ab_prev.sqrt() * sigma / (1.0 - ab),
        ns.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
    ))
}

/// `μ̃_t = (√ᾱ_{t−1} σ(t)/(1−ᾱ_t)) x̂₀ + (√α_t (1−ᾱ_{t−1})/(1−ᾱ_t)) x_t`.
pub fn posterior_mean(x_t: &Tensor, xhat0: &Tensor, t: usize, ns: &NoiseSchedule) -> Result<Tensor> {
    let (c0, ct) = posterior_coefficients(t, ns)?;
    x_t.zip_map(xhat0, "posterior_mean", |x, x0| c0 * x0 + ct * x)
}

/// Noise-free part of one reverse step:
/// `(x_t − σ(t)/√(1−ᾱ_t) · ε) / √(1−σ(t))`.
pub fn reverse_mean(x_t: &Tensor, eps: &Tensor, t: usize, ns: &NoiseSchedule) -> Result<Tensor> {
    ns.check_t(t)?;
    let (sigma, ab) = (ns.sigma(t), ns.alpha_bar(t));
    let c = sigma / (1.0 - ab).sqrt();
    let inv = 1.0 / (1.0 - sigma).sqrt();
    x_t.zip_map(eps, "reverse_mean", |x, e| (x - c * e) * inv)
}

/// Deterministic jump from `t` to `t_prev < t` through `x̂₀`.
pub fn ddim_jump(x_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize, ns: &NoiseSchedule) -> Result<Tensor> {
    let x0 = xhat0(x_t, eps, t, ns)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    ns.check_t(t_prev)?;
    let ab = ns.alpha_bar(t_prev);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "ddim_jump", |x, e| a * x + s * e)
}

/// `τ_j = ⌈j·T/steps⌉` for `j = steps, …, 1`, in descending order.
pub fn timestep_grid(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|j| (j * total).div_ceil(steps)).collect()
}

/// Seed of chain `i`'s stream.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    rng::child_seed(seed, chain as u64)
}

/// Seed of the ancestral noise a chain draws at timestep `t`.
pub fn z_seed(chain_seed: u64, t: usize) -> u64 {
    rng::child_seed(chain_seed, t as u64)
}

/// `x_T ~ N(0, I)`, one row per chain, each from its own stream.
pub fn initial_states(chain_seeds: &[u64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(chain_seeds.len() * dim);
    for &s in chain_seeds {
        data.extend(rng::normal_vec(&mut rng::from_seed(s), dim));
    }
    Tensor::matrix(chain_seeds.len(), dim, data)
}

/// Standard normal noise for step `t`, one row per chain.
pub fn step_noise(chain_seeds: &[u64], t: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(chain_seeds.len() * dim);
    for &s in chain_seeds {
        data.extend(rng::normal_vec(&mut rng::from_seed(z_seed(s, t)), dim));
    }
    Tensor::matrix(chain_seeds.len(), dim, data)
}

/// Per-chain record keeper shared by the plain and attacked samplers.
pub(crate) struct Recorder {
    pub(crate) trajs: Vec<Trajectory>,
    thin: usize,
    enabled: bool,
}

impl Recorder {
    pub(crate) fn new(enabled: bool, thin: usize, chain_seeds: &[u64]) -> Self {
        let trajs = if enabled {
            chain_seeds
                .iter()
                .enumerate()
                .map(|(chain, &seed)| Trajectory {
                    chain,
                    seed,
                    states: Vec::new(),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { trajs, thin, enabled }
    }

    /// Records `x` at step `t`. `index` counts states from `x_T`; thinning
    /// keeps index 0, every `thin`-th index, and `t == 0`.
    pub(crate) fn push(&mut self, index: usize, t: usize, x: &Tensor, info: &[StepInfo]) {
        if !self.enabled || !(index % self.thin == 0 || t == 0) {
            return;
        }
        for (i, tr) in self.trajs.iter_mut().enumerate() {
            let s = info.get(i).copied().unwrap_or_default();
            tr.states.push(TrajectoryState {
                t,
                x: x.row(i).to_vec(),
                attacked: s.attacked,
                delta_inf_norm: s.delta_inf_norm,
                z_seed: s.z_seed,
            });
        }
    }
}

/// Maps recorded model-space states back to data space.
pub fn trajectories_to_data(trajs: Vec<Trajectory>, transform: &DataTransform) -> Vec<Trajectory> {
    trajs
        .into_iter()
        .map(|mut tr| {
            for s in &mut tr.states {
                let row = Tensor::matrix(1, s.x.len(), std::mem::take(&mut s.x)).expect("row");
                s.x = transform.to_data(&row).into_data();
            }
            tr
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct StepInfo {
    pub(crate) attacked: bool,
    pub(crate) delta_inf_norm: f64,
    pub(crate) z_seed: Option<u64>,
}

/// Samples in model space. Returns final states (`n × D`) and, if
/// requested, trajectories (also model space).
pub fn sample_chains(
    model: &dyn EpsModel,
    ns: &NoiseSchedule,
    cfg: &SampleConfig,
    chain_seeds: &[u64],
) -> Result<(Tensor, Vec<Trajectory>)> {
    cfg.validate(ns)?;
    let dim = model.data_dim();
    let mut x = initial_states(chain_seeds, dim)?;
    let mut rec = Recorder::new(cfg.record, cfg.thin, chain_seeds);
    let total = ns.steps();
    let steps = cfg.steps.unwrap_or(total);
    let grid = if steps == total {
        (1..=total).rev().collect::<Vec<_>>()
    } else {
        timestep_grid(total, steps)
    };
    for (k, &t) in grid.iter().enumerate() {
        let eps = model.predict_eps(&x, t)?;
        let noisy = cfg.mode == SamplerMode::Ancestral && t > 1;
        let info: Vec<StepInfo> = chain_seeds
            .iter()
            .map(|&s| StepInfo {
                z_seed: noisy.then(|| z_seed(s, t)),
                ..StepInfo::default()
            })
            .collect();
        rec.push(k, t, &x, &info);
        x = if steps == total {
            let mut next = reverse_mean(&x, &eps, t, ns)?;
            if noisy {
                let z = step_noise(chain_seeds, t, dim)?;
                next = next.axpy(cfg.noise.std(ns, t), &z)?;
            }
            next
        } else {
            let t_prev = grid.get(k + 1).copied().unwrap_or(0);
            ddim_jump(&x, &eps, t, t_prev, ns)?
        };
        x.check_finite(&format!("sampler state after step t={t}"))?;
    }
    rec.push(grid.len(), 0, &x, &[]);
    Ok((x, rec.trajs))
}

/// Samples `cfg.n` chains with seeds derived from `cfg.seed`.
pub fn sample(model: &dyn EpsModel, ns: &NoiseSchedule, cfg: &SampleConfig) -> Result<(Tensor, Vec<Trajectory>)> {
    let seeds: Vec<u64> = (0..cfg.n).map(|i| chain_seed(cfg.seed, i)).collect();
    sample_chains(model, ns, cfg, &seeds)
}

impl TrainedModel {
    /// Samples and maps states back to data space.
    pub fn sample(&self, cfg: &SampleConfig) -> Result<(Tensor, Vec<Trajectory>)> {
        let (x, trajs) = sample(&self.params, &self.schedule, cfg)?;
        Ok((self.transform.to_data(&x), trajectories_to_data(trajs, &self.transform)))
    }

    /// Re-runs the chains behind `trajs` and returns their final states.
    pub fn replay(&self, cfg: &SampleConfig, trajs: &[Trajectory]) -> Result<(Tensor, Vec<Trajectory>)> {
        let seeds: Vec<u64> = trajs.iter().map(|t| t.seed).collect();
        let (x, mut out) = sample_chains(&self.params, &self.schedule, cfg, &seeds)?;
        for (o, src) in out.iter_mut().zip(trajs) {
            o.chain = src.chain;
        }
        Ok((self.transform.to_data(&x), trajectories_to_data(out, &self.transform)))
    }
}
