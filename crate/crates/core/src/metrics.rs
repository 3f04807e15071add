//! Evaluation: distance to the generating structure, PSNR, nearest-neighbour
//! memorization, and trajectory density histograms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::sampler::Trajectory;
use crate::tensor::Tensor;

/// Tolerance on `‖UUᵀ − I‖∞` accepted by [`rho`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Serializes non-finite reals as the strings `"inf"`, `"-inf"`, `"nan"`.
mod real {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("not a real: {other}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| to_repr(*x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?
                .into_iter()
                .map(from_repr::<D::Error>)
                .collect()
        }
    }
}

fn check_orthonormal(u: &Tensor) -> Result<()> {
    let gram = u.matmul(u, true)?;
    let k = u.rows();
    let mut worst = 0.0_f64;
    for i in 0..k {
        for j in 0..k {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.row(i)[j] - want).abs());
        }
    }
    if worst > ORTHONORMAL_TOL {
        return Err(Error::config(format!("subspace basis rows are not orthonormal (max deviation {worst:.3e})")));
    }
    Ok(())
}

/// `ρ_i = ‖(x_i − μ) − UᵀU(x_i − μ)‖`; with `centered = false` the mean is
/// ignored and the subspace passes through the origin.
pub fn rho(x: &Tensor, u: &Tensor, mu: &[f64], centered: bool) -> Result<Vec<f64>> {
    if u.cols() != x.cols() || mu.len() != x.cols() {
        return Err(Error::Shape {
            op: "rho",
            lhs: x.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    check_orthonormal(u)?;
    let mut v = x.clone();
    if centered {
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(mu).for_each(|(a, m)| *a -= m);
        }
    }
    let coeffs = v.matmul(u, true)?;
    let proj = coeffs.matmul(u, false)?;
    Ok(v.sub(&proj)?.row_norms_sq().into_iter().map(f64::sqrt).collect())
}

/// `|⟨n, x⟩ − d| / ‖n‖` per row.
pub fn plane_distance(x: &Tensor, normal: &[f64], offset: f64) -> Result<Vec<f64>> {
    if normal.len() != x.cols() {
        return Err(Error::Shape {
            op: "plane_distance",
            lhs: x.shape().to_vec(),
            rhs: vec![normal.len()],
        });
    }
    let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::config("plane normal must be non-zero"));
    }
    Ok((0..x.rows())
        .map(|i| (x.row(i).iter().zip(normal).map(|(a, b)| a * b).sum::<f64>() - offset).abs() / norm)
        .collect())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10·log10(peak² / MSE)` over all elements; `+∞` for identical inputs.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    x.expect_same_shape(reference, "psnr")?;
    Ok(psnr_from_mse(mse(x.data(), reference.data()), peak))
}

/// Per-row PSNR of each generation against its closest reference row.
pub fn psnr_nearest(gen: &Tensor, references: &Tensor, peak: f64) -> Result<Vec<f64>> {
    if gen.cols() != references.cols() || references.rows() == 0 {
        return Err(Error::Shape {
            op: "psnr_nearest",
            lhs: gen.shape().to_vec(),
            rhs: references.shape().to_vec(),
        });
    }
    let nearest = nearest_rows(gen, references)?;
    Ok(nearest
        .iter()
        .enumerate()
        .map(|(i, &j)| psnr_from_mse(mse(gen.row(i), references.row(j)), peak))
        .collect())
}

/// Index of the closest row of `b` for each row of `a`.
fn nearest_rows(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let d = squared_distances(a, b)?;
    Ok((0..a.rows())
        .map(|i| {
            d.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |best, (j, &v)| if v < best.1 { (j, v) } else { best })
                .0
        })
        .collect())
}

/// `‖a_i − b_j‖²` for all pairs, via `‖a‖² + ‖b‖² − 2⟨a, b⟩`.
fn squared_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = a.matmul(b, true)?;
    let (na, nb) = (a.row_norms_sq(), b.row_norms_sq());
    for (i, ai) in na.iter().enumerate() {
        for (v, bj) in g.row_mut(i).iter_mut().zip(&nb) {
            *v = ai + bj - 2.0 * *v;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Cosine,
    /// Negative Euclidean distance.
    NegL2,
}

/// Largest similarity of each generation to any training point, by brute
/// force. For cosine, both sets are first shifted by `center` if given.
pub fn nearest_similarity(
    gen: &Tensor,
    train: &Tensor,
    metric: SimilarityMetric,
    center: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if gen.cols() != train.cols() {
        return Err(Error::Shape {
            op: "nearest_similarity",
            lhs: gen.shape().to_vec(),
            rhs: train.shape().to_vec(),
        });
    }
    match metric {
        SimilarityMetric::NegL2 => {
            let nearest = nearest_rows(gen, train)?;
            Ok(nearest
                .iter()
                .enumerate()
                .map(|(i, &j)| -(mse(gen.row(i), train.row(j)) * gen.cols() as f64).sqrt())
                .collect())
        }
        SimilarityMetric::Cosine => {
            let shift = |t: &Tensor| {
                let mut t = t.clone();
                if let Some(c) = center {
                    for i in 0..t.rows() {
                        t.row_mut(i).iter_mut().zip(c).for_each(|(v, m)| *v -= m);
                    }
                }
                t
            };
            let (g, tr) = (shift(gen), shift(train));
            let dots = g.matmul(&tr, true)?;
            let (ng, nt) = (g.row_norms_sq(), tr.row_norms_sq());
            Ok((0..g.rows())
                .map(|i| {
                    dots.row(i)
                        .iter()
                        .zip(&nt)
                        .map(|(dot, b)| {
                            let den = (ng[i] * b).sqrt();
                            if den == 0.0 {
                                0.0
                            } else {
                                dot / den
                            }
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values outside `[edges[0], edges[last]]`.
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    /// Equal-width bins from `low` to `high`; the last bin is closed.
    pub fn new(values: &[f64], low: f64, high: f64, bins: usize) -> Self {
        let width = (high - low) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| low + width * i as f64).collect();
        let mut counts = vec![0; bins];
        let (mut below, mut above) = (0, 0);
        for &v in values {
            if v < low {
                below += 1;
            } else if v > high {
                above += 1;
            } else {
                let b = (((v - low) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
        }
        Self {
            edges,
            counts,
            below,
            above,
        }
    }

    /// Cosine-similarity bins: `[0, 1]` in steps of 0.02.
    pub fn similarity(values: &[f64]) -> Self {
        Self::new(values, 0.0, 1.0, 50)
    }
}

/// Fraction of values `≥ threshold`.
pub fn mass_at_least(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| **v >= threshold).count() as f64 / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub metric: SimilarityMetric,
    #[serde(with = "real::vec")]
    pub similarities: Vec<f64>,
    pub histogram: Option<Histogram>,
    pub mass_at_098: f64,
    pub mass_at_090: f64,
}

pub fn memorization(
    gen: &Tensor,
    train: &Tensor,
    metric: SimilarityMetric,
    center: Option<&[f64]>,
) -> Result<MemorizationReport> {
    let similarities = nearest_similarity(gen, train, metric, center)?;
    Ok(MemorizationReport {
        metric,
        histogram: (metric == SimilarityMetric::Cosine).then(|| Histogram::similarity(&similarities)),
        mass_at_098: mass_at_least(&similarities, 0.98),
        mass_at_090: mass_at_least(&similarities, 0.90),
        similarities,
    })
}

/// How trajectories are mapped to the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Dims(usize, usize),
    /// `2 × D`.
    Matrix(Tensor),
}

impl Projection {
    fn apply(&self, x: &[f64]) -> Result<(f64, f64)> {
        match self {
            Projection::Dims(a, b) => match (x.get(*a), x.get(*b)) {
                (Some(u), Some(v)) => Ok((*u, *v)),
                _ => Err(Error::config(format!("projection dims ({a}, {b}) exceed data dim {}", x.len()))),
            },
            Projection::Matrix(m) => {
                if m.rows() != 2 || m.cols() != x.len() {
                    return Err(Error::Shape {
                        op: "projection",
                        lhs: m.shape().to_vec(),
                        rhs: vec![2, x.len()],
                    });
                }
                let dot = |r: &[f64]| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                Ok((dot(m.row(0)), dot(m.row(1))))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSlice {
    pub t: usize,
    /// Row-major `bins × bins` occupancy (y major); sums to the chain count.
    pub counts: Vec<usize>,
    /// Shannon entropy (nats) of the normalized occupancy.
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowHistogram {
    pub bins: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub slices: Vec<FlowSlice>,
}

pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// 2-D occupancy per timestep. Points outside the grid land in the edge
/// cells. Ranges default to the bounding box of all projected states.
pub fn flow_histogram(
    trajs: &[Trajectory],
    projection: &Projection,
    bins: usize,
    ranges: Option<((f64, f64), (f64, f64))>,
) -> Result<FlowHistogram> {
    let first = trajs.first().ok_or_else(|| Error::config("no trajectories given"))?;
    if bins == 0 {
        return Err(Error::config("flow histogram needs at least one bin"));
    }
    let ts: Vec<usize> = first.states.iter().map(|s| s.t).collect();
    let mut projected = Vec::with_capacity(trajs.len());
    for tr in trajs {
        if tr.states.iter().map(|s| s.t).ne(ts.iter().copied()) {
            return Err(Error::config(format!("chain {} was recorded at different timesteps", tr.chain)));
        }
        projected.push(tr.states.iter().map(|s| projection.apply(&s.x)).collect::<Result<Vec<_>>>()?);
    }
    let (x_range, y_range) = ranges.unwrap_or_else(|| {
        let pts = projected.iter().flatten();
        let fold = |f: fn(&(f64, f64)) -> f64| {
            pts.clone()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        (fold(|p| p.0), fold(|p| p.1))
    });
    let cell = |v: f64, (lo, hi): (f64, f64)| -> usize {
        if !(hi > lo) {
            return 0;
        }
        let f = ((v - lo) / (hi - lo) * bins as f64).floor();
        f.clamp(0.0, (bins - 1) as f64) as usize
    };
    let slices = ts
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut counts = vec![0; bins * bins];
            for chain in &projected {
                let (u, v) = chain[k];
                counts[cell(v, y_range) * bins + cell(u, x_range)] += 1;
            }
            FlowSlice {
                t,
                entropy: entropy(&counts),
                counts,
            }
        })
        .collect();
    Ok(FlowHistogram {
        bins,
        x_range,
        y_range,
        slices,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "real")]
    pub mean: f64,
    #[serde(with = "real")]
    pub median: f64,
    #[serde(with = "real")]
    pub p95: f64,
    #[serde(with = "real")]
    pub min: f64,
    #[serde(with = "real")]
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let pick = |q: f64| {
            if n == 0 {
                f64::NAN
            } else {
                sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1]
            }
        };
        Self {
            mean: if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 },
            median: median(values),
            p95: pick(0.95),
            min: sorted.first().copied().unwrap_or(f64::NAN),
            max: sorted.last().copied().unwrap_or(f64::NAN),
            count: n,
        }
    }
}

/// Median, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => s[n / 2],
        _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricArray {
    #[serde(with = "real::vec")]
    pub values: Vec<f64>,
    pub summary: Summary,
}

impl MetricArray {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            summary: Summary::of(&values),
            values,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub samples_sha256: Option<String>,
    pub dataset_sha256: Option<String>,
    pub checkpoint_sha256: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Per-generation metrics, all of the same length.
    pub metrics: BTreeMap<String, MetricArray>,
    pub memorization: Option<MemorizationReport>,
    pub flow: Option<FlowHistogram>,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn insert(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if let Some(existing) = self.metrics.values().next() {
            if existing.values.len() != values.len() {
                return Err(Error::Shape {
                    op: "eval metric length",
                    lhs: vec![existing.values.len()],
                    rhs: vec![values.len()],
                });
            }
        }
        self.metrics.insert(name.to_string(), MetricArray::new(values));
        Ok(())
    }

    /// `index,<metric>,…` with one row per generation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index");
        for name in self.metrics.keys() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        let n = self.metrics.values().next().map_or(0, |m| m.values.len());
        for i in 0..n {
            out.push_str(&i.to_string());
            for m in self.metrics.values() {
                let v = m.values[i];
                if v.is_finite() {
                    out.push_str(&format!(",{v:?}"));
                } else {
                    out.push_str(&format!(",{v}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        io::atomic_write(&stem.with_extension("csv"), self.to_csv().as_bytes())?;
        io::write_json(&stem.with_extension("json"), self)
    }

    pub fn read(json_path: &Path) -> Result<Self> {
        io::read_json(json_path)
    }
}
