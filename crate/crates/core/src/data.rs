//! Synthetic datasets with known generating structure, and corruption models.
//!
//! Three generators are provided:
//! - `oblique_plane`: points on the plane `⟨n, x⟩ = d` (by default
//!   `x + y + z = 30`), spread uniformly over a square patch and jittered by
//!   isotropic Gaussian noise of std `sigma`;
//! - `three_gaussians`: an equal-weight mixture of isotropic Gaussians;
//! - `linear_subspace`: `x = μ + Σ_i λ_i α_i U_i` with orthonormal rows `U_i`.
//!
//! The generating structure is kept in [`GroundTruth`] so metrics can be
//! computed exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    ObliquePlane {
        normal: [f64; 3],
        offset: f64,
        /// Half-width of the square patch, along an orthonormal in-plane basis.
        extent: f64,
        /// Isotropic jitter around the plane.
        sigma: f64,
    },
    ThreeGaussians {
        centers: Vec<Vec<f64>>,
        sigma: f64,
    },
    LinearSubspace {
        ambient_dim: usize,
        subspace_dim: usize,
        /// Std of the coefficients `α_i`.
        coeff_sigma: f64,
        /// Per-coordinate std of the in-subspace signal (sets the `λ` scale).
        signal_std: f64,
        /// Geometric decay of `λ_i`; `None` picks the rate that puts 70% of a
        /// geometric spectrum's variance in the first `subspace_dim` terms.
        decay: Option<f64>,
        /// Entries of `μ` are drawn from `U(-mean_range, mean_range)`.
        mean_range: f64,
    },
}

impl DatasetKind {
    pub fn oblique_plane() -> Self {
        DatasetKind::ObliquePlane {
            normal: [1.0, 1.0, 1.0],
            offset: 30.0,
            extent: 10.0,
            sigma: 0.1,
        }
    }

    pub fn three_gaussians() -> Self {
        DatasetKind::ThreeGaussians {
            centers: vec![vec![10.0, 10.0, 10.0], vec![20.0, 20.0, 20.0], vec![10.0, 30.0, 30.0]],
            sigma: 0.25,
        }
    }

    pub fn linear_subspace(ambient_dim: usize, subspace_dim: usize) -> Self {
        DatasetKind::LinearSubspace {
            ambient_dim,
            subspace_dim,
            coeff_sigma: 1.0,
            signal_std: 0.3,
            decay: None,
            mean_range: 0.5,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetKind::ObliquePlane { .. } => 3,
            DatasetKind::ThreeGaussians { centers, .. } => centers.first().map_or(0, Vec::len),
            DatasetKind::LinearSubspace { ambient_dim, .. } => *ambient_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Geometric decay rate `r` with `1 − r^(2k) = 0.7`.
pub fn default_decay(subspace_dim: usize) -> f64 {
    0.3_f64.powf(1.0 / (2.0 * subspace_dim as f64))
}

/// Structure the points were generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    Plane {
        normal: [f64; 3],
        offset: f64,
        sigma: f64,
    },
    Mixture {
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        sigma: f64,
    },
    Subspace {
        /// `k × D`, orthonormal rows.
        basis: Tensor,
        mean: Vec<f64>,
        singular_values: Vec<f64>,
        coeff_sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    /// `n × D`.
    pub points: Tensor,
    pub clean_mask: Vec<bool>,
    pub ground_truth: GroundTruth,
    /// Pre-corruption points, kept for paired evaluation.
    pub original: Option<Tensor>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn n_clean(&self) -> usize {
        self.clean_mask.iter().filter(|c| **c).count()
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("dataset needs at least one sample"));
        }
        match &self.kind {
            DatasetKind::ObliquePlane {
                normal, extent, sigma, ..
            } => {
                if normal.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                    return Err(Error::config("plane normal must be non-zero"));
                }
                if !(*extent >= 0.0 && *sigma >= 0.0) {
                    return Err(Error::config("plane extent and sigma must be >= 0"));
                }
            }
            DatasetKind::ThreeGaussians { centers, sigma } => {
                let d = centers.first().map_or(0, Vec::len);
                if centers.is_empty() || d == 0 || centers.iter().any(|c| c.len() != d) {
                    return Err(Error::config("mixture centers must be non-empty and of equal dimension"));
                }
                if !(*sigma >= 0.0) {
                    return Err(Error::config("mixture sigma must be >= 0"));
                }
            }
            DatasetKind::LinearSubspace {
                ambient_dim,
                subspace_dim,
                coeff_sigma,
                signal_std,
                decay,
                mean_range,
            } => {
                if *subspace_dim == 0 || subspace_dim > ambient_dim {
                    return Err(Error::config(format!(
                        "subspace dim must be in 1..={ambient_dim}, got {subspace_dim}"
                    )));
                }
                if !(*coeff_sigma > 0.0 && *signal_std > 0.0 && *mean_range >= 0.0) {
                    return Err(Error::config("subspace scales must be positive"));
                }
                if let Some(r) = decay {
                    if !(*r > 0.0 && *r <= 1.0) {
                        return Err(Error::config(format!("subspace decay must be in (0, 1], got {r}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Realizes a dataset. Deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<SampleSet> {
    spec.validate()?;
    let mut rng = rng::from_seed(spec.seed);
    let n = spec.n_samples;
    let (points, ground_truth) = match &spec.kind {
        DatasetKind::ObliquePlane {
            normal,
            offset,
            extent,
            sigma,
        } => {
            let (unit, e1, e2) = plane_frame(normal);
            let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Closest point of the plane to the origin.
            let anchor: Vec<f64> = unit.iter().map(|u| u * offset / norm).collect();
            let mut data = Vec::with_capacity(n * 3);
            for _ in 0..n {
                let a = rng::uniform(&mut rng, -extent, *extent);
                let b = rng::uniform(&mut rng, -extent, *extent);
                let jitter = rng::normal_vec(&mut rng, 3);
                for j in 0..3 {
                    data.push(anchor[j] + a * e1[j] + b * e2[j] + sigma * jitter[j]);
                }
            }
            (
                Tensor::matrix(n, 3, data)?,
                GroundTruth::Plane {
                    normal: *normal,
                    offset: *offset,
                    sigma: *sigma,
                },
            )
        }
        DatasetKind::ThreeGaussians { centers, sigma } => {
            let d = centers[0].len();
            let m = centers.len();
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let c = &centers[rng::uniform_int(&mut rng, 0, m - 1)];
                let z = rng::normal_vec(&mut rng, d);
                data.extend(c.iter().zip(&z).map(|(c, z)| c + sigma * z));
            }
            (
                Tensor::matrix(n, d, data)?,
                GroundTruth::Mixture {
                    centers: centers.clone(),
                    weights: vec![1.0 / m as f64; m],
                    sigma: *sigma,
                },
            )
        }
        DatasetKind::LinearSubspace {
            ambient_dim,
            subspace_dim,
            coeff_sigma,
            signal_std,
            decay,
            mean_range,
        } => {
            let (d, k) = (*ambient_dim, *subspace_dim);
            let basis = orthonormal_rows(&mut rng, k, d);
            let mean = rng::uniform_vec(&mut rng, d, *mean_range);
            let r = decay.unwrap_or_else(|| default_decay(k));
            let raw: Vec<f64> = (0..k).map(|i| r.powi(i as i32)).collect();
            // Per-coordinate signal variance is Σλ²σ_α²/D for orthonormal rows.
            let energy: f64 = raw.iter().map(|v| v * v).sum::<f64>() * coeff_sigma * coeff_sigma;
            let lambda_scale = signal_std * (d as f64 / energy).sqrt();
            let singular_values: Vec<f64> = raw.iter().map(|v| v * lambda_scale).collect();
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let alpha = rng::normal_vec(&mut rng, k);
                let mut x = mean.clone();
                for i in 0..k {
                    let c = singular_values[i] * coeff_sigma * alpha[i];
                    for (xj, uj) in x.iter_mut().zip(basis.row(i)) {
                        *xj += c * uj;
                    }
                }
                data.extend(x);
            }
            (
                Tensor::matrix(n, d, data)?,
                GroundTruth::Subspace {
                    basis,
                    mean,
                    singular_values,
                    coeff_sigma: *coeff_sigma,
                },
            )
        }
    };
    Ok(SampleSet {
        points,
        clean_mask: vec![true; n],
        ground_truth,
        original: None,
    })
}

/// `m` further clean points from the same generator, following the
/// `spec.n_samples` training points in the stream. The ground truth is shared
/// with `generate(spec)`.
pub fn held_out(spec: &DatasetSpec, m: usize) -> Result<Tensor> {
    let n = spec.n_samples;
    let full = generate(&DatasetSpec {
        n_samples: n + m,
        ..spec.clone()
    })?;
    let d = full.dim();
    Tensor::matrix(m, d, full.points.data()[n * d..].to_vec())
}

/// Unit normal plus an orthonormal in-plane basis.
fn plane_frame(normal: &[f64; 3]) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = [normal[0] / norm, normal[1] / norm, normal[2] / norm];
    // Pick the axis least aligned with the normal to seed Gram-Schmidt.
    let axis = (0..3)
        .min_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()))
        .expect("three axes");
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let dot: f64 = e.iter().zip(&u).map(|(a, b)| a * b).sum();
    let mut e1 = [e[0] - dot * u[0], e[1] - dot * u[1], e[2] - dot * u[2]];
    let n1 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
    e1.iter_mut().for_each(|v| *v /= n1);
    let e2 = [
        u[1] * e1[2] - u[2] * e1[1],
        u[2] * e1[0] - u[0] * e1[2],
        u[0] * e1[1] - u[1] * e1[0],
    ];
    (u, e1, e2)
}

/// `k × d` matrix with orthonormal rows from a seeded Gaussian matrix
/// (modified Gram-Schmidt, two passes for accuracy).
pub fn orthonormal_rows(rng: &mut Rng, k: usize, d: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = (0..k).map(|_| rng::normal_vec(rng, d)).collect();
    for i in 0..k {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::from_rows(&rows).expect("rows have equal length")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CorruptionMode {
    None,
    /// Scales the generating spread of every point by `sigma_scale`
    /// (jitter for 3D sets, coefficients for the subspace set).
    Inlier { sigma_scale: f64 },
    /// Adds `N(0, sigma² I)` to exactly `round(p·n)` points.
    AmbientGaussian { p: f64, sigma: f64 },
    /// Replaces `round(fraction·n)` points with uniform draws from the data's
    /// bounding box inflated by `inflate` (1.5 by default).
    UniformOutliers {
        fraction: f64,
        #[serde(default = "default_inflate")]
        inflate: f64,
    },
}

fn default_inflate() -> f64 {
    1.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub mode: CorruptionMode,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            mode: CorruptionMode::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CorruptionMode::None => Ok(()),
            CorruptionMode::Inlier { sigma_scale } if sigma_scale >= 1.0 => Ok(()),
            CorruptionMode::Inlier { sigma_scale } => Err(Error::config(format!(
                "inlier sigma_scale must be >= 1, got {sigma_scale}"
            ))),
            CorruptionMode::AmbientGaussian { p, sigma } if (0.0..=1.0).contains(&p) && sigma >= 0.0 => Ok(()),
            CorruptionMode::AmbientGaussian { p, sigma } => Err(Error::config(format!(
                "ambient corruption needs 0 <= p <= 1 and sigma >= 0, got p={p}, sigma={sigma}"
            ))),
            CorruptionMode::UniformOutliers { fraction, inflate } if (0.0..=1.0).contains(&fraction) && inflate > 0.0 => {
                Ok(())
            }
            CorruptionMode::UniformOutliers { fraction, inflate } => Err(Error::config(format!(
                "outlier fraction must be in [0, 1] and inflate > 0, got {fraction}, {inflate}"
            ))),
        }
    }
}

/// Random subset of `round(p·n)` indices, in ascending order.
fn pick_subset(rng: &mut Rng, n: usize, p: f64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let count = (p * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut chosen = idx[..count.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Applies a corruption model. Points left untouched are bit-identical to
/// the input, and the pre-corruption points are kept in `original`.
pub fn corrupt(set: &SampleSet, spec: &CorruptionSpec) -> Result<SampleSet> {
    spec.validate()?;
    let mut rng = rng::from_seed(spec.seed);
    let (n, d) = (set.len(), set.dim());
    let mut points = set.points.clone();
    let mut clean_mask = set.clean_mask.clone();
    let touched: Vec<usize> = match spec.mode {
        CorruptionMode::None => vec![],
        CorruptionMode::Inlier { sigma_scale } => {
            if sigma_scale > 1.0 {
                inflate_spread(&mut points, &set.ground_truth, sigma_scale, &mut rng)?;
                (0..n).collect()
            } else {
                vec![]
            }
        }
        CorruptionMode::AmbientGaussian { p, sigma } => {
            let chosen = pick_subset(&mut rng, n, p);
            for &i in &chosen {
                let z = rng::normal_vec(&mut rng, d);
                for (x, z) in points.row_mut(i).iter_mut().zip(z) {
                    *x += sigma * z;
                }
            }
            chosen
        }
        CorruptionMode::UniformOutliers { fraction, inflate } => {
            let (lo, hi) = bounding_box(&set.points, inflate);
            let chosen = pick_subset(&mut rng, n, fraction);
            for &i in &chosen {
                for (j, x) in points.row_mut(i).iter_mut().enumerate() {
                    *x = rng::uniform(&mut rng, lo[j], hi[j]);
                }
            }
            chosen
        }
    };
    for i in touched {
        clean_mask[i] = false;
    }
    Ok(SampleSet {
        points,
        clean_mask,
        ground_truth: set.ground_truth.clone(),
        original: Some(set.original.clone().unwrap_or_else(|| set.points.clone())),
    })
}

fn inflate_spread(points: &mut Tensor, gt: &GroundTruth, scale: f64, rng: &mut Rng) -> Result<()> {
    match gt {
        GroundTruth::Plane { sigma, .. } | GroundTruth::Mixture { sigma, .. } => {
            if *sigma == 0.0 {
                return Err(Error::config(
                    "inlier corruption scales the generating sigma, which is 0 for this dataset",
                ));
            }
            // Independent extra noise so the total jitter std becomes scale·σ.
            let extra = sigma * (scale * scale - 1.0).sqrt();
            let d = points.cols();
            for i in 0..points.rows() {
                let z = rng::normal_vec(rng, d);
                for (x, z) in points.row_mut(i).iter_mut().zip(z) {
                    *x += extra * z;
                }
            }
        }
        GroundTruth::Subspace { mean, .. } => {
            // Coefficients scale linearly: x' = μ + scale·(x − μ).
            for i in 0..points.rows() {
                for (x, m) in points.row_mut(i).iter_mut().zip(mean) {
                    *x = m + scale * (*x - m);
                }
            }
        }
    }
    Ok(())
}

/// Axis-aligned bounding box, inflated about its center by `inflate`.
pub fn bounding_box(points: &Tensor, inflate: f64) -> (Vec<f64>, Vec<f64>) {
    let d = points.cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..points.rows() {
        for (j, &v) in points.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for j in 0..d {
        let (c, h) = ((lo[j] + hi[j]) / 2.0, (hi[j] - lo[j]) / 2.0 * inflate);
        lo[j] = c - h;
        hi[j] = c + h;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(sigma: f64, n: usize) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::ObliquePlane {
                normal: [1.0, 1.0, 1.0],
                offset: 30.0,
                extent: 10.0,
                sigma,
            },
            n_samples: n,
            seed: 11,
        }
    }

    #[test]
    fn plane_points_respect_equation() {
        let set = generate(&plane(0.0, 500)).unwrap();
        for i in 0..set.len() {
            let s: f64 = set.points.row(i).iter().sum();
            assert!((s - 30.0).abs() < 1e-12, "{s}");
        }
        let sigma = 0.2;
        let set = generate(&plane(sigma, 2000)).unwrap();
        for i in 0..set.len() {
            let s: f64 = set.points.row(i).iter().sum();
            assert!((s - 30.0).abs() < 5.0 * sigma * 3f64.sqrt());
        }
    }

    #[test]
    fn held_out_continues_the_stream() {
        let spec = DatasetSpec {
            kind: DatasetKind::linear_subspace(12, 3),
            n_samples: 20,
            seed: 4,
        };
        let train = generate(&spec).unwrap();
        let extra = held_out(&spec, 5).unwrap();
        let long = generate(&DatasetSpec { n_samples: 25, ..spec }).unwrap();
        assert_eq!(&long.points.data()[..20 * 12], train.points.data());
        assert_eq!(&long.points.data()[20 * 12..], extra.data());
        assert_eq!(long.ground_truth, train.ground_truth);
    }

    #[test]
    fn mixture_centers_and_spread() {
        let spec = DatasetSpec {
            kind: DatasetKind::three_gaussians(),
            n_samples: 10_000,
            seed: 5,
        };
        let set = generate(&spec).unwrap();
        let DatasetKind::ThreeGaussians { centers, sigma } = &spec.kind else {
            unreachable!()
        };
        let mut sums = vec![vec![0.0; 3]; 3];
        let mut counts = [0usize; 3];
        for i in 0..set.len() {
            let x = set.points.row(i);
            let (c, dist) = centers
                .iter()
                .enumerate()
                .map(|(c, m)| (c, x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            // Norm of a 3-D Gaussian is far below 5σ per axis·√3 with overwhelming probability.
            assert!(dist < 5.0 * sigma * 3f64.sqrt(), "{dist}");
            counts[c] += 1;
            sums[c].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for c in 0..3 {
            for j in 0..3 {
                let mean = sums[c][j] / counts[c] as f64;
                assert!((mean - centers[c][j]).abs() < 0.1, "center {c} axis {j}: {mean}");
            }
        }
    }

    #[test]
    fn subspace_points_lie_in_span() {
        let spec = DatasetSpec {
            kind: DatasetKind::linear_subspace(64, 5),
            n_samples: 50,
            seed: 3,
        };
        let set = generate(&spec).unwrap();
        let GroundTruth::Subspace { basis, mean, .. } = &set.ground_truth else {
            unreachable!()
        };
        // U Uᵀ = I_k
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = basis.row(a).iter().zip(basis.row(b)).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((dot - target).abs() < 1e-10);
            }
        }
        for i in 0..set.len() {
            let c: Vec<f64> = set.points.row(i).iter().zip(mean).map(|(x, m)| x - m).collect();
            let mut resid = c.clone();
            for a in 0..5 {
                let coef: f64 = basis.row(a).iter().zip(&c).map(|(u, v)| u * v).sum();
                resid.iter_mut().zip(basis.row(a)).for_each(|(r, u)| *r -= coef * u);
            }
            let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-9, "{norm}");
        }
    }

    #[test]
    fn default_decay_puts_seventy_percent_in_leading_terms() {
        let r: f64 = default_decay(25);
        assert!((1.0 - r.powi(50) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let a = generate(&plane(0.1, 100)).unwrap();
        let b = generate(&plane(0.1, 100)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_corruption_is_identity() {
        let set = generate(&plane(0.1, 100)).unwrap();
        for mode in [
            CorruptionMode::None,
            CorruptionMode::AmbientGaussian { p: 0.0, sigma: 1.0 },
            CorruptionMode::UniformOutliers {
                fraction: 0.0,
                inflate: 1.5,
            },
        ] {
            let out = corrupt(&set, &CorruptionSpec { mode, seed: 1 }).unwrap();
            assert_eq!(out.points, set.points);
            assert_eq!(out.n_clean(), 100);
        }
    }

    #[test]
    fn outliers_replace_exact_fraction() {
        let set = generate(&plane(0.1, 1000)).unwrap();
        let out = corrupt(
            &set,
            &CorruptionSpec {
                mode: CorruptionMode::UniformOutliers {
                    fraction: 0.3,
                    inflate: 1.5,
                },
                seed: 2,
            },
        )
        .unwrap();
        assert_eq!(out.n_clean(), 700);
        let (lo, hi) = bounding_box(&set.points, 1.5);
        for i in 0..out.len() {
            if out.clean_mask[i] {
                assert_eq!(out.points.row(i), set.points.row(i));
            } else {
                for j in 0..3 {
                    assert!(out.points.row(i)[j] >= lo[j] && out.points.row(i)[j] <= hi[j]);
                }
            }
        }
        assert_eq!(out.original.as_ref().unwrap(), &set.points);
    }

    #[test]
    fn inlier_scales_spread() {
        let set = generate(&plane(0.1, 4000)).unwrap();
        let out = corrupt(
            &set,
            &CorruptionSpec {
                mode: CorruptionMode::Inlier { sigma_scale: 5.0 },
                seed: 4,
            },
        )
        .unwrap();
        // Off-plane residual std: σ_total = 0.5 along the unit normal.
        let var: f64 = (0..out.len())
            .map(|i| ((out.points.row(i).iter().sum::<f64>() - 30.0) / 3f64.sqrt()).powi(2))
            .sum::<f64>()
            / out.len() as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.03, "{}", var.sqrt());
        assert_eq!(out.n_clean(), 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&plane(-1.0, 10)).is_err());
        let bad = CorruptionSpec {
            mode: CorruptionMode::AmbientGaussian { p: 1.5, sigma: 0.1 },
            seed: 0,
        };
        assert!(bad.validate().is_err());
    }
}
