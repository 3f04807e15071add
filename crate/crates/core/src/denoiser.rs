//! The ε-predicting network: an MLP over `[x_t, embed(t)]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    /// Number of diffusion steps `T` the network is conditioned on.
    pub max_timestep: usize,
    /// Adds `g(t)·x` to the output, with a scalar gain `g` linear in the time
    /// embedding. Lets a narrow MLP pass the full-rank part of the input through.
    #[serde(default)]
    pub input_skip: bool,
}

impl Architecture {
    /// `[D+32 → 256 → 256 → 256 → D]`, the default for 3-D data.
    pub fn small(data_dim: usize, max_timestep: usize) -> Self {
        Self {
            data_dim,
            hidden_dims: vec![256, 256, 256],
            time_embed_dim: 32,
            activation: Activation::Silu,
            max_timestep,
            input_skip: false,
        }
    }

    /// `[D+32 → 1024 → 1024 → D]` plus the input skip, the default for
    /// high-dimensional data.
    pub fn wide(data_dim: usize, max_timestep: usize) -> Self {
        Self {
            data_dim,
            hidden_dims: vec![1024, 1024],
            time_embed_dim: 32,
            activation: Activation::Silu,
            max_timestep,
            input_skip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::config("data_dim must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "time_embed_dim must be positive and even, got {}",
                self.time_embed_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.data_dim + self.time_embed_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        let skip = if self.input_skip { self.time_embed_dim + 1 } else { 0 };
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum::<usize>() + skip
    }

    fn skip_layer(&self) -> Option<Layer> {
        self.input_skip.then(|| Layer {
            weight: Tensor::zeros(&[self.time_embed_dim, 1]),
            bias: Tensor::zeros(&[1]),
        })
    }
}

/// Sinusoidal embedding `[sin(t f_0), cos(t f_0), sin(t f_1), …]` with
/// geometric frequencies `f_j = 10000^(−j/(dim/2))`.
pub fn time_embed(t: usize, max_timestep: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("time embedding dim must be positive and even, got {dim}")));
    }
    if t > max_timestep {
        return Err(Error::OutOfRange {
            what: "timestep",
            value: t as f64,
            allowed: format!("0..={max_timestep}"),
        });
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let phase = t as f64 * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
    /// Gain of the input skip, present iff `arch.input_skip`.
    pub skip: Option<Layer>,
}

/// Parameter handles registered on a tape, in layer order `[W0, b0, W1, b1, …]`
/// followed by the skip gain's `[w, b]` when present.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl DenoiserParams {
    /// He-uniform weights, zero biases, and a zero final layer (and skip gain)
    /// so the initial prediction is exactly 0.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let weight = if l == last {
                    Tensor::zeros(&[fan_in, fan_out])
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let data = rng::uniform_vec(rng, fan_in * fan_out, bound);
                    Tensor::matrix(fan_in, fan_out, data).expect("sized above")
                };
                Layer {
                    weight,
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        let skip = arch.skip_layer();
        Ok(Self { arch, layers, skip })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .iter()
            .map(|&(i, o)| Layer {
                weight: Tensor::zeros(&[i, o]),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        let skip = arch.skip_layer();
        Ok(Self { arch, layers, skip })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .chain(&self.skip)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .chain(&mut self.skip)
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// All parameters concatenated in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(arch: Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(Error::Shape {
                op: "unflatten",
                lhs: vec![arch.num_params()],
                rhs: vec![flat.len()],
            });
        }
        let mut params = Self::zeros(arch)?;
        let mut offset = 0;
        for t in params.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    /// Records parameters on `tape`: as leaves when `trainable`, otherwise as
    /// constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.tensors()
                .map(|t| {
                    if trainable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Time embeddings for a batch, one row per timestep.
    pub fn embed_batch(&self, timesteps: &[usize]) -> Result<Tensor> {
        let dim = self.arch.time_embed_dim;
        let mut data = Vec::with_capacity(timesteps.len() * dim);
        for &t in timesteps {
            data.extend(time_embed(t, self.arch.max_timestep, dim)?);
        }
        Tensor::matrix(timesteps.len(), dim, data)
    }

    /// `ε_θ(x, t)` recorded on `tape`. `timesteps` holds one entry per row of
    /// `x`, or a single entry shared by all rows.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamVars, x: Var, timesteps: &[usize]) -> Result<Var> {
        let xt = tape.value(x);
        let (rows, cols) = (xt.rows(), xt.cols());
        if xt.shape().len() != 2 || cols != self.arch.data_dim {
            return Err(Error::Shape {
                op: "denoiser input",
                lhs: xt.shape().to_vec(),
                rhs: vec![rows, self.arch.data_dim],
            });
        }
        let ts: Vec<usize> = match timesteps.len() {
            1 => vec![timesteps[0]; rows],
            n if n == rows => timesteps.to_vec(),
            n => {
                return Err(Error::Shape {
                    op: "denoiser timesteps",
                    lhs: vec![n],
                    rhs: vec![rows],
                })
            }
        };
        let emb = tape.constant(self.embed_batch(&ts)?);
        let mut h = tape.concat(x, emb)?;
        let last = self.layers.len() - 1;
        let skip = match self.skip {
            Some(_) => {
                let (w, b) = (params.0[2 * last + 2], params.0[2 * last + 3]);
                let g = tape.matmul(emb, w)?;
                let bias = tape.broadcast_rows(b, rows)?;
                let g = tape.add(g, bias)?;
                let ones = tape.constant(Tensor::matrix(1, cols, vec![1.0; cols])?);
                let g = tape.matmul(g, ones)?;
                Some(tape.mul(g, x)?)
            }
            None => None,
        };
        for l in 0..self.layers.len() {
            let (w, b) = (params.0[2 * l], params.0[2 * l + 1]);
            let z = tape.matmul(h, w)?;
            let bias = tape.broadcast_rows(b, rows)?;
            h = tape.add(z, bias)?;
            if l != last {
                h = match self.arch.activation {
                    Activation::Silu => tape.silu(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        match skip {
            Some(s) => tape.add(h, s),
            None => Ok(h),
        }
    }

    /// Evaluates `ε_θ(x, t)` without keeping a tape around.
    pub fn predict(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &params, xv, timesteps)?;
        let value = tape.value(out).clone();
        value.check_finite("denoiser output")?;
        Ok(value)
    }
}
