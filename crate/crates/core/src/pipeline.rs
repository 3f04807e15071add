//! Experiment configuration and the pipeline stages behind the CLI. Every
//! stage writes its outputs plus a `manifest.json` from which [`replay`]
//! regenerates them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::AttackConfig;
use crate::data::{self, CorruptionSpec, DatasetKind, DatasetSpec, GroundTruth};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{self, EvalReport, Projection, Provenance, SimilarityMetric};
use crate::model::TrainedModel;
use crate::rng;
use crate::sampler::{self, SampleConfig};
use crate::schedule::{NoiseSchedule, RaySchedule};
use crate::tensor::Tensor;
use crate::training::{self, TrainConfig, TrainReport};

pub const RUN_FORMAT: &str = "advdiff-run/1";
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Linear variance schedule; unset endpoints default to `0.1/T` and `20/T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            sigma_min: None,
            sigma_max: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match (self.sigma_min, self.sigma_max) {
            (None, None) => NoiseSchedule::linear_default(self.steps),
            (lo, hi) => {
                let t = self.steps as f64;
                NoiseSchedule::linear(self.steps, lo.unwrap_or(0.1 / t), hi.unwrap_or(20.0 / t))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out clean points drawn after the training points.
    pub n_references: usize,
    pub psnr_peak: f64,
    pub centered_rho: bool,
    pub memorization: bool,
    pub similarity: SimilarityMetric,
    pub flow_bins: usize,
    pub flow_dims: (usize, usize),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_references: 1000,
            psnr_peak: 2.0,
            centered_rho: true,
            memorization: true,
            similarity: SimilarityMetric::Cosine,
            flow_bins: 32,
            flow_dims: (0, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// All component seeds derive from this.
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub corruption: CorruptionSpec,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            output_dir: None,
            dataset: DatasetSpec {
                kind: DatasetKind::oblique_plane(),
                n_samples: 2000,
                seed: 0,
            },
            corruption: CorruptionSpec::none(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Applies `path.to.field=value` overrides. Values parse as JSON and fall
    /// back to plain strings; every path must name an existing field.
    pub fn with_overrides(&self, assignments: &[String]) -> Result<Self> {
        if assignments.is_empty() {
            return Ok(self.clone());
        }
        let mut root = serde_json::to_value(self)?;
        for a in assignments {
            set_path(&mut root, a)?;
        }
        serde_json::from_value(root).map_err(|e| Error::config(format!("after overrides: {e}")))
    }

    /// Component seeds, each a named stream of the master seed.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        ["dataset", "corruption", "train", "sample", "attack"]
            .into_iter()
            .map(|name| (name.to_string(), rng::stream_seed(self.master_seed, name)))
            .collect()
    }

    /// Overwrites every component seed with its derived value.
    pub fn resolve(&self) -> Self {
        let s = self.seeds();
        let mut cfg = self.clone();
        cfg.dataset.seed = s["dataset"];
        cfg.corruption.seed = s["corruption"];
        cfg.train.seed = s["train"];
        cfg.sample.seed = s["sample"];
        cfg.attack.seed = s["attack"];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.corruption.validate()?;
        let ns = self.schedule.build()?;
        self.train.validate()?;
        self.sample.validate(&ns)?;
        self.attack.validate()?;
        if self.eval.psnr_peak <= 0.0 {
            return Err(Error::config("psnr_peak must be positive"));
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{}` is not an object", keys[..i].join("."))))?;
        if !obj.contains_key(*key) {
            return Err(Error::config(format!("unknown config key `{}`", keys[..=i].join("."))));
        }
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*key).expect("checked above");
    }
    Err(Error::config("empty override path"))
}

/// What a run did and with which inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Stage {
    Train,
    Sample {
        checkpoint: PathBuf,
    },
    Attack {
        checkpoint: PathBuf,
    },
    Eval {
        samples: PathBuf,
        run: PathBuf,
        label: String,
        trajectories: Option<PathBuf>,
    },
    Report {
        evals: Vec<PathBuf>,
    },
    Ray {
        omegas: Vec<f64>,
    },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Sample { .. } => "sample",
            Stage::Attack { .. } => "attack",
            Stage::Eval { .. } => "eval",
            Stage::Report { .. } => "report",
            Stage::Ray { .. } => "ray",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    /// Hash with wall-clock columns removed; compared on replay when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stable_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    #[serde(flatten)]
    pub stage: Stage,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = io::read_json(path)?;
        if m.format != RUN_FORMAT {
            return Err(Error::format(path, format!("unknown run manifest format `{}`", m.format)));
        }
        Ok(m)
    }
}

/// Columns dropped from the stable hash of a CSV output.
fn volatile_columns(file_name: &str) -> &'static [&'static str] {
    match file_name {
        "train_log.csv" => &["seconds"],
        _ => &[],
    }
}

fn strip_columns(text: &str, drop: &[&str]) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|c| !drop.contains(&c)).collect();
    let mut out = String::new();
    for line in std::iter::once(header).chain(lines) {
        let fields: Vec<&str> = line
            .split(',')
            .zip(&keep)
            .filter_map(|(f, k)| k.then_some(f))
            .collect();
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

pub fn digest(path: &Path, label: String) -> Result<FileDigest> {
    let bytes = io::read(path)?;
    let name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let drop = volatile_columns(&name);
    let stable_sha256 = (!drop.is_empty()).then(|| io::sha256_hex(strip_columns(&String::from_utf8_lossy(&bytes), drop).as_bytes()));
    Ok(FileDigest {
        path: label,
        sha256: io::sha256_hex(&bytes),
        stable_sha256,
    })
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn input_digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| digest(p, p.to_string_lossy().into_owned())).collect()
}

/// Output files of a run, relative to `out`, in a stable order.
fn output_digests(out: &Path, files: &[String]) -> Result<Vec<FileDigest>> {
    files.iter().map(|f| digest(&out.join(f), f.clone())).collect()
}

fn finish(out: &Path, stage: Stage, cfg: &ExperimentConfig, inputs: &[PathBuf], files: Vec<String>) -> Result<RunManifest> {
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        version: VERSION.into(),
        stage,
        master_seed: cfg.master_seed,
        seeds: cfg.seeds(),
        config: cfg.clone(),
        inputs: input_digests(inputs)?,
        outputs: output_digests(out, &files)?,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn prepare(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn trajectory_files(dir: &Path, prefix: &str) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    Ok(names.into_iter().map(|n| format!("{prefix}/{n}")).collect())
}

/// Generates and corrupts the dataset, trains, and writes `dataset.csv`,
/// `reference.csv`, `ground_truth.json`, `checkpoint.{json,bin}`,
/// `train_log.csv` and `config.json`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<(RunManifest, TrainedModel, TrainReport)> {
    let cfg = prepare(cfg)?;
    let ns = cfg.schedule.build()?;
    let clean = data::generate(&cfg.dataset)?;
    let references = data::held_out(&cfg.dataset, cfg.eval.n_references)?;
    let set = data::corrupt(&clean, &cfg.corruption)?;
    io::write_points_csv(&out.join("dataset.csv"), &set.points, &set.clean_mask)?;
    io::write_points_csv(&out.join("reference.csv"), &references, &vec![true; references.rows()])?;
    io::write_json(&out.join("ground_truth.json"), &set.ground_truth)?;
    io::write_json(&out.join("config.json"), &cfg)?;
    let (model, report) = training::train(&cfg.train, &set, &ns)?;
    model.save(&out.join("checkpoint.json"))?;
    report.write_csv(&out.join("train_log.csv"))?;
    let files = [
        "config.json",
        "dataset.csv",
        "reference.csv",
        "ground_truth.json",
        "checkpoint.json",
        "checkpoint.bin",
        "train_log.csv",
    ]
    .map(String::from)
    .to_vec();
    let manifest = finish(out, Stage::Train, &cfg, &[], files)?;
    Ok((manifest, model, report))
}

/// Draws `sample.n` generations into `samples.csv`, plus `trajectories/`
/// when recording.
pub fn run_sample(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<(RunManifest, Tensor)> {
    let cfg = prepare(cfg)?;
    let checkpoint = absolute(checkpoint)?;
    let model = TrainedModel::load(&checkpoint)?;
    let (x, trajs) = model.sample(&cfg.sample)?;
    let mut files = vec!["samples.csv".to_string()];
    io::write_points_csv(&out.join("samples.csv"), &x, &vec![true; x.rows()])?;
    if cfg.sample.record {
        let dir = out.join("trajectories");
        sampler::write_trajectories(&dir, &trajs)?;
        files.extend(trajectory_files(&dir, "trajectories")?);
    }
    let inputs = [checkpoint.clone(), checkpoint.with_extension("bin")];
    let manifest = finish(out, Stage::Sample { checkpoint }, &cfg, &inputs, files)?;
    Ok((manifest, x))
}

/// Attacked generations into `samples.csv` plus `attack_report.{csv,json}`.
pub fn run_attack(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<(RunManifest, Tensor)> {
    let cfg = prepare(cfg)?;
    let checkpoint = absolute(checkpoint)?;
    let model = TrainedModel::load(&checkpoint)?;
    let (x, trajs, report) = model.attacked_sample(&cfg.attack, &cfg.sample)?;
    let mut files = vec!["samples.csv".to_string(), "attack_report.csv".into(), "attack_report.json".into()];
    io::write_points_csv(&out.join("samples.csv"), &x, &vec![true; x.rows()])?;
    report.write(&out.join("attack_report"))?;
    if cfg.sample.record {
        let dir = out.join("trajectories");
        sampler::write_trajectories(&dir, &trajs)?;
        files.extend(trajectory_files(&dir, "trajectories")?);
    }
    let inputs = [checkpoint.clone(), checkpoint.with_extension("bin")];
    let manifest = finish(out, Stage::Attack { checkpoint }, &cfg, &inputs, files)?;
    Ok((manifest, x))
}

fn column_mean(x: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        m.iter_mut().zip(x.row(i)).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= x.rows().max(1) as f64);
    m
}

/// Scores generations against the ground truth of a training run directory.
pub fn evaluate(
    cfg: &EvalConfig,
    label: &str,
    samples: &Tensor,
    ground_truth: &GroundTruth,
    train_points: &Tensor,
    references: &Tensor,
    trajectories: Option<&[sampler::Trajectory]>,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        label: label.to_string(),
        ..EvalReport::default()
    };
    let center = match ground_truth {
        GroundTruth::Plane { normal, offset, .. } => {
            report.insert("plane_distance", metrics::plane_distance(samples, normal, *offset)?)?;
            column_mean(train_points)
        }
        GroundTruth::Mixture { centers, .. } => {
            let d: Vec<f64> = (0..samples.rows())
                .map(|i| {
                    centers
                        .iter()
                        .map(|c| c.iter().zip(samples.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            report.insert("center_distance", d)?;
            column_mean(train_points)
        }
        GroundTruth::Subspace { basis, mean, .. } => {
            report.insert("rho", metrics::rho(samples, basis, mean, cfg.centered_rho)?)?;
            mean.clone()
        }
    };
    if references.rows() > 0 {
        report.insert("psnr", metrics::psnr_nearest(samples, references, cfg.psnr_peak)?)?;
    }
    if cfg.memorization {
        report.memorization = Some(metrics::memorization(samples, train_points, cfg.similarity, Some(&center))?);
    }
    if let Some(trajs) = trajectories.filter(|t| !t.is_empty()) {
        let (a, b) = cfg.flow_dims;
        report.flow = Some(metrics::flow_histogram(trajs, &Projection::Dims(a, b), cfg.flow_bins, None)?);
    }
    Ok(report)
}

/// Writes `eval.{csv,json}` for the generations in `samples` against the
/// training run in `run`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    samples: &Path,
    run: &Path,
    label: &str,
    trajectories: Option<&Path>,
    out: &Path,
) -> Result<(RunManifest, EvalReport)> {
    let cfg = prepare(cfg)?;
    let samples = absolute(samples)?;
    let run = absolute(run)?;
    let trajectories = trajectories.map(absolute).transpose()?;
    let (x, _) = io::read_points_csv(&samples)?;
    let gt_path = run.join("ground_truth.json");
    let dataset_path = run.join("dataset.csv");
    let reference_path = run.join("reference.csv");
    let ground_truth: GroundTruth = io::read_json(&gt_path)?;
    let (train_points, _) = io::read_points_csv(&dataset_path)?;
    let (references, _) = io::read_points_csv(&reference_path)?;
    let trajs = trajectories.as_deref().map(sampler::read_trajectories).transpose()?;
    let mut report = evaluate(&cfg.eval, label, &x, &ground_truth, &train_points, &references, trajs.as_deref())?;
    report.provenance = Provenance {
        samples_sha256: Some(io::hash_file(&samples)?),
        dataset_sha256: Some(io::hash_file(&dataset_path)?),
        checkpoint_sha256: {
            let ckpt = run.join("checkpoint.bin");
            ckpt.exists().then(|| io::hash_file(&ckpt)).transpose()?
        },
    };
    report.write(&out.join("eval"))?;
    let mut inputs = vec![samples.clone(), gt_path, dataset_path, reference_path];
    if let Some(dir) = &trajectories {
        inputs.push(dir.join("trajectories.json"));
    }
    let stage = Stage::Eval {
        samples,
        run,
        label: label.to_string(),
        trajectories,
    };
    let manifest = finish(out, stage, &cfg, &inputs, vec!["eval.csv".into(), "eval.json".into()])?;
    Ok((manifest, report))
}

/// Long-format comparison table `label,metric,statistic,value`.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("label,metric,statistic,value\n");
    for r in reports {
        for (name, m) in &r.metrics {
            let s = &m.summary;
            for (stat, v) in [
                ("mean", s.mean),
                ("median", s.median),
                ("p95", s.p95),
                ("min", s.min),
                ("max", s.max),
                ("count", s.count as f64),
            ] {
                let _ = writeln!(out, "{},{name},{stat},{v:?}", r.label);
            }
        }
        if let Some(mem) = &r.memorization {
            let _ = writeln!(out, "{},memorization,mass_at_098,{:?}", r.label, mem.mass_at_098);
            let _ = writeln!(out, "{},memorization,mass_at_090,{:?}", r.label, mem.mass_at_090);
        }
        if let Some(last) = r.flow.as_ref().and_then(|f| f.slices.last()) {
            let _ = writeln!(out, "{},flow,final_entropy,{:?}", r.label, last.entropy);
        }
    }
    out
}

/// Aggregates eval reports into `comparison.csv`.
pub fn run_report(cfg: &ExperimentConfig, evals: &[PathBuf], out: &Path) -> Result<RunManifest> {
    if evals.is_empty() {
        return Err(Error::config("report needs at least one eval report"));
    }
    let evals = evals.iter().map(|p| absolute(p)).collect::<Result<Vec<_>>>()?;
    let reports = evals.iter().map(|p| EvalReport::read(p)).collect::<Result<Vec<_>>>()?;
    io::atomic_write(&out.join("comparison.csv"), comparison_csv(&reports).as_bytes())?;
    finish(out, Stage::Report { evals: evals.clone() }, cfg, &evals, vec!["comparison.csv".into()])
}

/// Ray table for a set of `ω` values at `β = 1`:
/// `t,alpha_bar,sqrt_one_minus_alpha_bar,ray_omega_<ω>,effective_ray_omega_<ω>,…`.
pub fn ray_csv(ns: &NoiseSchedule, base: &RaySchedule, omegas: &[f64]) -> Result<String> {
    let mut out = String::from("t,alpha_bar,sqrt_one_minus_alpha_bar");
    for w in omegas {
        let _ = write!(out, ",ray_omega_{w},effective_ray_omega_{w}");
    }
    out.push('\n');
    for t in 1..=ns.steps() {
        let ab = ns.alpha_bar(t);
        let _ = write!(out, "{t},{ab:?},{:?}", (1.0 - ab).sqrt());
        for &w in omegas {
            let rs = RaySchedule { omega: w, ..base.clone() };
            rs.validate()?;
            let _ = write!(out, ",{:?},{:?}", rs.ray(ns, t, 1.0)?, rs.effective_ray(ns, t, 1.0)?);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn run_ray(cfg: &ExperimentConfig, omegas: &[f64], out: &Path) -> Result<RunManifest> {
    let ns = cfg.schedule.build()?;
    io::atomic_write(&out.join("ray.csv"), ray_csv(&ns, &cfg.train.ray, omegas)?.as_bytes())?;
    finish(out, Stage::Ray { omegas: omegas.to_vec() }, cfg, &[], vec!["ray.csv".into()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub matched: Vec<String>,
    pub mismatched: Vec<String>,
}

impl ReplayOutcome {
    pub fn is_identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-runs the stage recorded in `manifest_path` into `out` and compares
/// every output against the recorded digest. Inputs must still hash to their
/// recorded values.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayOutcome> {
    let m = RunManifest::read(manifest_path)?;
    for input in &m.inputs {
        let now = digest(Path::new(&input.path), input.path.clone())?;
        if now.sha256 != input.sha256 {
            return Err(Error::Mismatch(format!("input {} changed since the run", input.path)));
        }
    }
    let cfg = &m.config;
    let fresh = match &m.stage {
        Stage::Train => run_train(cfg, out)?.0,
        Stage::Sample { checkpoint } => run_sample(cfg, checkpoint, out)?.0,
        Stage::Attack { checkpoint } => run_attack(cfg, checkpoint, out)?.0,
        Stage::Eval {
            samples,
            run,
            label,
            trajectories,
        } => run_eval(cfg, samples, run, label, trajectories.as_deref(), out)?.0,
        Stage::Report { evals } => run_report(cfg, evals, out)?,
        Stage::Ray { omegas } => run_ray(cfg, omegas, out)?,
    };
    let now: BTreeMap<&str, &FileDigest> = fresh.outputs.iter().map(|d| (d.path.as_str(), d)).collect();
    let (mut matched, mut mismatched) = (Vec::new(), Vec::new());
    for want in &m.outputs {
        let same = now.get(want.path.as_str()).is_some_and(|got| match (&want.stable_sha256, &got.stable_sha256) {
            (Some(a), Some(b)) => a == b,
            _ => want.sha256 == got.sha256,
        });
        if same {
            matched.push(want.path.clone());
        } else {
            mismatched.push(want.path.clone());
        }
    }
    Ok(ReplayOutcome { matched, mismatched })
}
