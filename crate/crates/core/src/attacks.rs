//! Inference-time trajectory attacks: a variance-scaled FGSM step and its
//! iterated PGD form, applied at a chosen subset of reverse steps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::io;
use crate::model::TrainedModel;
use crate::rng;
use crate::sampler::{self, Recorder, SampleConfig, SamplerMode, StepInfo, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    FgsmTraj,
    PgdTraj,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSelection {
    EvenlySpaced,
    PrefixFromT,
    SuffixTo0,
}

/// What the attacker maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// `‖μ̃_t(x_t, x̂₀) − μ̃_t(x_t', x̂₀')‖²`.
    PosteriorMean,
    /// `‖ε_θ(x_t') − ε_θ(x_t)‖²`.
    Eps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub attack_ratio: f64,
    pub phi: f64,
    pub pgd_iters: usize,
    pub timestep_selection: TimestepSelection,
    pub loss: AttackLoss,
    /// Treat the clean branch as a constant when differentiating.
    pub detach_clean: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::FgsmTraj,
            attack_ratio: 0.25,
            phi: 1.0,
            pgd_iters: 20,
            timestep_selection: TimestepSelection::EvenlySpaced,
            loss: AttackLoss::PosteriorMean,
            detach_clean: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attack_ratio) {
            return Err(Error::config(format!("attack_ratio must be in [0, 1], got {}", self.attack_ratio)));
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return Err(Error::config(format!("phi must be >= 0, got {}", self.phi)));
        }
        if self.pgd_iters == 0 {
            return Err(Error::config("pgd_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Timesteps attacked at ratio `p`, in descending order. Only `t ≥ 2` is
/// eligible; the count is `min(⌈pT⌉, T−1)`.
pub fn select_timesteps(total: usize, ratio: f64, selection: TimestepSelection) -> Vec<usize> {
    let candidates: Vec<usize> = (2..=total).rev().collect();
    let k = ((ratio * total as f64).ceil() as usize).min(candidates.len());
    match selection {
        TimestepSelection::PrefixFromT => candidates[..k].to_vec(),
        TimestepSelection::SuffixTo0 => candidates[candidates.len() - k..].to_vec(),
        TimestepSelection::EvenlySpaced => (0..k).map(|i| candidates[i * candidates.len() / k]).collect(),
    }
}

/// Attack loss per row and its gradient with respect to `x_t`, evaluated at
/// `x_t' = x_t + δ`.
pub fn attack_loss_grad(
    params: &DenoiserParams,
    x_t: &Tensor,
    delta: &Tensor,
    t: usize,
    ns: &NoiseSchedule,
    loss: AttackLoss,
    detach_clean: bool,
) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let xv = tape.leaf(x_t.clone());
    let x_clean = if detach_clean { tape.constant(x_t.clone()) } else { xv };
    let dv = tape.constant(delta.clone());
    let x_pert = tape.add(xv, dv)?;
    let e_clean = params.forward_on(&mut tape, &pv, x_clean, &[t])?;
    let e_pert = params.forward_on(&mut tape, &pv, x_pert, &[t])?;
    let diff = match loss {
        AttackLoss::Eps => tape.sub(e_pert, e_clean)?,
        AttackLoss::PosteriorMean => {
            // μ̃ = c₀ x̂₀ + c_t x = (c₀/√ᾱ + c_t) x − (c₀ √(1−ᾱ)/√ᾱ) ε
            let (c0, ct) = sampler::posterior_coefficients(t, ns)?;
            let ab = ns.alpha_bar(t);
            let kx = c0 / ab.sqrt() + ct;
            let ke = c0 * (1.0 - ab).sqrt() / ab.sqrt();
            let dx = tape.sub(x_clean, x_pert)?;
            let de = tape.sub(e_clean, e_pert)?;
            let dx = tape.scale(dx, kx);
            let de = tape.scale(de, ke);
            tape.sub(dx, de)?
        }
    };
    let per_row = tape.value(diff).row_norms_sq();
    let total = tape.l2_norm_sq(diff);
    let grad = tape.backward(total, &[xv])?.remove(0);
    grad.check_finite(&format!("attack gradient at t={t}"))?;
    Ok((per_row, grad))
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

/// `δ₀ ~ N(0, φ²σ(t)²)` per row, each chain from its own stream.
fn random_start(seeds: &[u64], t: usize, dim: usize, scale: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(seeds.len() * dim);
    for &s in seeds {
        let mut r = rng::from_seed(rng::child_seed(s, t as u64));
        data.extend(rng::normal_vec(&mut r, dim).into_iter().map(|v| v * scale));
    }
    Tensor::matrix(seeds.len(), dim, data)
}

/// Result of attacking one timestep.
#[derive(Clone, Debug)]
pub struct AttackStep {
    pub delta: Tensor,
    pub x_adv: Tensor,
    /// Attack loss per row at the final gradient evaluation.
    pub loss: Vec<f64>,
}

/// `x_adv = x_t + σ(t)·sign(∇_{x_t} L)` with `L` evaluated at a random start.
pub fn attack_step_fgsm(
    params: &DenoiserParams,
    x_t: &Tensor,
    t: usize,
    ns: &NoiseSchedule,
    cfg: &AttackConfig,
    start_seeds: &[u64],
) -> Result<AttackStep> {
    let sigma = ns.sigma(t);
    let delta0 = random_start(start_seeds, t, x_t.cols(), cfg.phi * sigma)?;
    let (loss, grad) = attack_loss_grad(params, x_t, &delta0, t, ns, cfg.loss, cfg.detach_clean)?;
    let delta = grad.map(|g| sigma * sign(g));
    Ok(AttackStep {
        x_adv: x_t.add(&delta)?,
        delta,
        loss,
    })
}

/// `N` steps of size `σ(t)/N` accumulated into `δ`, then `δ` clamped to `±σ(t)`.
pub fn attack_step_pgd(
    params: &DenoiserParams,
    x_t: &Tensor,
    t: usize,
    ns: &NoiseSchedule,
    cfg: &AttackConfig,
    start_seeds: &[u64],
) -> Result<AttackStep> {
    let sigma = ns.sigma(t);
    let n = cfg.pgd_iters;
    let mut delta = random_start(start_seeds, t, x_t.cols(), cfg.phi * sigma)?;
    let mut loss = Vec::new();
    for _ in 0..n {
        let (l, grad) = attack_loss_grad(params, x_t, &delta, t, ns, cfg.loss, cfg.detach_clean)?;
        loss = l;
        delta = delta.zip_map(&grad, "pgd", |d, g| d + sigma / n as f64 * sign(g))?;
    }
    let delta = delta.map(|d| d.clamp(-sigma, sigma));
    Ok(AttackStep {
        x_adv: x_t.add(&delta)?,
        delta,
        loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub chain: usize,
    pub t: usize,
    pub attacked: bool,
    pub delta_inf_norm: f64,
    pub loss_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub config: AttackConfig,
    pub attacked_timesteps: Vec<usize>,
    pub n_chains: usize,
    /// Largest `‖δ‖∞ / σ(t)` over all injected perturbations; at most 1.
    pub max_delta_over_sigma: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
    pub summary: AttackSummary,
}

impl AttackReport {
    pub const HEADER: &'static str = "chain,t,attacked,delta_inf_norm,loss_value";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?}\n",
                r.chain, r.t, r.attacked as u8, r.delta_inf_norm, r.loss_value
            ));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        io::atomic_write(&stem.with_extension("csv"), self.to_csv().as_bytes())?;
        io::write_json(&stem.with_extension("json"), &self.summary)
    }
}

/// Samples with the reverse steps at the selected timesteps attacked.
/// Returns model-space final states, model-space trajectories and the report.
///
/// Chain seeds come from `sample.seed` exactly as in the unattacked sampler,
/// so the ancestral noise is shared with it; random starts come from
/// `attack.seed`.
pub fn attacked_sample(
    params: &DenoiserParams,
    ns: &NoiseSchedule,
    attack: &AttackConfig,
    sample: &SampleConfig,
) -> Result<(Tensor, Vec<Trajectory>, AttackReport)> {
    attack.validate()?;
    sample.validate(ns)?;
    if sample.steps.is_some_and(|s| s != ns.steps()) {
        return Err(Error::config("attacked sampling runs the full reverse chain"));
    }
    let dim = params.arch.data_dim;
    let chain_seeds: Vec<u64> = (0..sample.n).map(|i| sampler::chain_seed(sample.seed, i)).collect();
    let start_seeds: Vec<u64> = (0..sample.n).map(|i| rng::child_seed(attack.seed, i as u64)).collect();
    let targets = select_timesteps(ns.steps(), attack.attack_ratio, attack.timestep_selection);
    let mut x = sampler::initial_states(&chain_seeds, dim)?;
    let mut rec = Recorder::new(sample.record, sample.thin, &chain_seeds);
    let mut rows = Vec::with_capacity(sample.n * ns.steps());
    let (mut max_ratio, mut loss_sum, mut loss_count) = (0.0_f64, 0.0, 0usize);

    for (k, t) in (1..=ns.steps()).rev().enumerate() {
        let noisy = sample.mode == SamplerMode::Ancestral && t > 1;
        let attacked = targets.contains(&t);
        let (x_in, delta, losses) = if attacked {
            let step = match attack.kind {
                AttackKind::FgsmTraj => attack_step_fgsm(params, &x, t, ns, attack, &start_seeds),
                AttackKind::PgdTraj => attack_step_pgd(params, &x, t, ns, attack, &start_seeds),
            }
            .map_err(|e| Error::NonFinite(format!("attack at t={t}: {e}")))?;
            (step.x_adv, Some(step.delta), step.loss)
        } else {
            (x.clone(), None, vec![0.0; sample.n])
        };
        let sigma = ns.sigma(t);
        let mut info = Vec::with_capacity(sample.n);
        for i in 0..sample.n {
            let norm = delta
                .as_ref()
                .map_or(0.0, |d| d.row(i).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
            // Legitimacy bound, always enforced.
            if norm > sigma {
                return Err(Error::OutOfRange {
                    what: "attack perturbation inf-norm",
                    value: norm,
                    allowed: format!("<= sigma(t={t}) = {sigma}"),
                });
            }
            if attacked {
                max_ratio = max_ratio.max(norm / sigma);
                loss_sum += losses[i];
                loss_count += 1;
            }
            rows.push(AttackRow {
                chain: i,
                t,
                attacked,
                delta_inf_norm: norm,
                loss_value: losses[i],
            });
            info.push(StepInfo {
                attacked,
                delta_inf_norm: norm,
                z_seed: noisy.then(|| sampler::z_seed(chain_seeds[i], t)),
            });
        }
        rec.push(k, t, &x, &info);
        let eps = params.predict(&x_in, &[t])?;
        let mut next = sampler::reverse_mean(&x_in, &eps, t, ns)?;
        if noisy {
            let z = sampler::step_noise(&chain_seeds, t, dim)?;
            next = next.axpy(sample.noise.std(ns, t), &z)?;
        }
        next.check_finite(&format!("attacked sampler state after step t={t}"))?;
        x = next;
    }
    rec.push(ns.steps(), 0, &x, &[]);
    let report = AttackReport {
        rows,
        summary: AttackSummary {
            config: attack.clone(),
            attacked_timesteps: targets,
            n_chains: sample.n,
            max_delta_over_sigma: max_ratio,
            mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
        },
    };
    Ok((x, rec.trajs, report))
}

impl TrainedModel {
    /// [`attacked_sample`] with outputs mapped back to data space.
    pub fn attacked_sample(
        &self,
        attack: &AttackConfig,
        sample: &SampleConfig,
    ) -> Result<(Tensor, Vec<Trajectory>, AttackReport)> {
        let (x, trajs, report) = attacked_sample(&self.params, &self.schedule, attack, sample)?;
        let trajs = sampler::trajectories_to_data(trajs, &self.transform);
        Ok((self.transform.to_data(&x), trajs, report))
    }
}
