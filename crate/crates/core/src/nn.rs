//! Parameter storage and the small set of layers the models are built from.
//!
//! Parameters are created through [`Scope`] handles that share one
//! [`ParamStore`]. Initial values come from the store's seeded ChaCha8
//! stream, so a model built twice from the same seed is bit-identical.

use std::sync::Mutex;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    device: Device,
    vars: Mutex<BTreeMap<String, Var>>,
    buffers: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            device,
            vars: Mutex::new(BTreeMap::new()),
            buffers: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Trainable parameters in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock().expect("param store lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Non-trainable tensors (fixed encodings) in name order.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        self.buffers
            .lock().expect("param store lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param store lock").get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.vars.lock().expect("param store lock").values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer with `value` (same shape required).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        if let Some(v) = self.vars.lock().expect("param store lock").get(name) {
            if v.dims() != value.dims() {
                return Err(Error::InvalidConfig(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    v.dims(),
                    value.dims()
                )));
            }
            v.set(value)?;
            return Ok(());
        }
        let buffers = self.buffers.lock().expect("param store lock");
        match buffers.get(name) {
            Some(b) if b.dims() == value.dims() => {
                b.set(value)?;
                Ok(())
            }
            Some(b) => Err(Error::InvalidConfig(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                b.dims(),
                value.dims()
            ))),
            None => Err(Error::NotFound(name.to_owned())),
        }
    }

    fn insert(&self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let prev = self.vars.lock().expect("param store lock").insert(name.clone(), var);
        if prev.is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        Ok(out)
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.store.rng.lock().expect("param store lock");
        let data = (0..n)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        self.store.insert(self.full(name), data, shape)
    }

    /// Truncated (±2σ) normal.
    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.store.rng.lock().expect("param store lock");
        let data = (0..n)
            .map(|_| loop {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                if z.abs() <= 2.0 {
                    break (z * std) as f32;
                }
            })
            .collect();
        self.store.insert(self.full(name), data, shape)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.store.insert(self.full(name), vec![value; n], shape)
    }

    /// Fixed tensor drawn from the init stream (standard normal × `scale`).
    pub fn gaussian_buffer(&self, name: &str, shape: &[usize], scale: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.store.rng.lock().expect("param store lock");
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * scale) as f32
            })
            .collect();
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.store.device)?)?;
        let t = var.as_tensor().detach();
        self.store
            .buffers
            .lock()
            .expect("param store lock")
            .insert(self.full(name), var);
        Ok(t)
    }
}

/// Per-call state for stochastic layers. `rng == None` is inference.
pub struct Ctx<'a> {
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout with a mask drawn from the context stream.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let scale = (1.0 / (1.0 - p)) as f32;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }

    /// Stochastic depth: zeroes the residual branch per leading-dim sample.
    pub fn drop_path(&mut self, branch: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(branch.clone());
        };
        if p <= 0.0 {
            return Ok(branch.clone());
        }
        let b = branch.dim(0)?;
        let keep = (1.0 / (1.0 - p)) as f32;
        let mask: Vec<f32> = (0..b)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut shape = vec![1usize; branch.rank()];
        shape[0] = b;
        let mask = Tensor::from_vec(mask, shape, branch.device())?;
        Ok(branch.broadcast_mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// PyTorch-style default init: U(±1/√in) weights, zero bias.
    pub fn new(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: s.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: Some(s.constant("bias", &[out_dim], 0.0)?),
        })
    }

    pub fn no_bias(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: s.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: None,
        })
    }

    pub fn zeros(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[out_dim, in_dim], 0.0)?,
            bias: Some(s.constant("bias", &[out_dim], 0.0)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("rank ≥ 1");
        let rows = x.elem_count() / in_dim;
        let x2 = x.reshape((rows, in_dim))?;
        let mut y = x2.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Self::with_weight(s, dim, 1.0)
    }

    pub fn with_weight(s: &Scope, dim: usize, init: f32) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[dim], init)?,
            bias: s.constant("bias", &[dim], 0.0)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Stable `ln(1 + eˣ)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Feed-forward stack with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`; when `zero_last` the output layer starts
    /// at zero.
    pub fn new(s: &Scope, dims: &[usize], zero_last: bool) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let ls = s.pp(format!("layers.{i}"));
                if zero_last && i == n - 1 {
                    Linear::zeros(&ls, dims[i], dims[i + 1])
                } else {
                    Linear::new(&ls, dims[i], dims[i + 1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Scaled dot-product attention on `(batch, heads, len, head_dim)` tensors
/// with an optional additive bias broadcastable to the score shape.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let hd = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores,
    };
    Ok(softmax(&scores)?.matmul(v)?)
}

/// `(b, len, heads·hd)` → `(b, heads, len, hd)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))?)
}

pub fn to_vec2(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}
