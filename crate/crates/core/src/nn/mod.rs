//! Small building blocks over `candle_core` tensors: a named parameter
//! store, dense/conv/GRU layers in time-major layout, Gaussian densities and
//! first-order optimizers.
//!
//! All tensors are `f64` on the CPU. Layout convention for sequences is
//! `(batch, time, channels)`.

mod optim;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use optim::{step_lr, Adam, Optimizer, OptimizerKind, Sgd};

pub const DEVICE: Device = Device::Cpu;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
}

impl Init {
    /// PyTorch-style default for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// Plain serializable copy of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &DEVICE)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Tensor handle for a forward pass. Detached handles do not record a
    /// backward graph.
    pub fn tensor(&self, name: &str, detach: bool) -> Result<Tensor> {
        let v = self.get(name)?;
        Ok(if detach {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn l2_norm(&self) -> Result<f64> {
        let mut acc = 0.0;
        for v in self.vars.values() {
            acc += v.as_tensor().sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(acc.sqrt())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if !v
                .as_tensor()
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .all(|x| x.is_finite())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, ParamTensor>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                Ok((
                    k.clone(),
                    ParamTensor {
                        shape: v.dims().to_vec(),
                        data: v.as_tensor().flatten_all()?.to_vec1::<f64>()?,
                    },
                ))
            })
            .collect()
    }

    pub fn from_snapshot(snap: &BTreeMap<String, ParamTensor>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, p) in snap {
            let t = Tensor::from_vec(p.data.clone(), p.shape.as_slice(), &DEVICE)
                .map_err(|e| Error::Checkpoint(format!("parameter {k}: {e}")))?;
            vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(ParamStore { vars })
    }

    /// Overwrite values of parameters present in both stores.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (k, v) in &self.vars {
            if let Some(src) = other.vars.get(k) {
                if src.dims() != v.dims() {
                    return Err(Error::Shape(format!(
                        "parameter {k}: {:?} vs {:?}",
                        src.dims(),
                        v.dims()
                    )));
                }
                v.set(src.as_tensor())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_snapshot(&self.snapshot()?)
    }
}

/// Dense layer `y = x W + b` applied to the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        zero: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let init = if zero {
            Init::Zeros
        } else {
            Init::fan_in(input)
        };
        store.add(format!("{name}.w"), &[input, output], init, rng)?;
        store.add(
            format!("{name}.b"),
            &[output],
            if zero {
                Init::Zeros
            } else {
                Init::fan_in(input)
            },
            rng,
        )?;
        Ok(())
    }

    pub fn bind(store: &ParamStore, name: &str, detach: bool) -> Result<Self> {
        Ok(Linear {
            w: store.tensor(&format!("{name}.w"), detach)?,
            b: store.tensor(&format!("{name}.b"), detach)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims
            .last()
            .ok_or_else(|| Error::Shape("scalar input to linear layer".into()))?;
        if last != self.input_dim() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {last}",
                self.input_dim()
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, last))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.output_dim();
        Ok(y.reshape(out)?)
    }
}

/// Kernel-3, padding-1 convolution along time on `(B, T, C)` input.
#[derive(Debug, Clone)]
pub struct Conv3 {
    inner: Linear,
}

impl Conv3 {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        zero: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        Linear::init(store, name, 3 * input, output, zero, rng)
    }

    pub fn bind(store: &ParamStore, name: &str, detach: bool) -> Result<Self> {
        Ok(Conv3 {
            inner: Linear::bind(store, name, detach)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let padded = x.pad_with_zeros(1, 1, 1)?;
        let taps = Tensor::cat(
            &[
                padded.narrow(1, 0, t)?,
                padded.narrow(1, 1, t)?,
                padded.narrow(1, 2, t)?,
            ],
            2,
        )?;
        self.inner.forward(&taps)
    }
}

/// Kernel-2, stride-2 convolution: `(B, T, C) -> (B, T/2, C')`.
#[derive(Debug, Clone)]
pub struct Down2 {
    inner: Linear,
}

impl Down2 {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        zero: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        Linear::init(store, name, 2 * input, output, zero, rng)
    }

    pub fn bind(store: &ParamStore, name: &str, detach: bool) -> Result<Self> {
        Ok(Down2 {
            inner: Linear::bind(store, name, detach)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        if t % 2 != 0 {
            return Err(Error::Shape(format!(
                "stride-2 conv needs even length, got {t}"
            )));
        }
        // time-major rows 2j and 2j+1 are adjacent, so this is a pure reshape
        self.inner
            .forward(&x.contiguous()?.reshape((b, t / 2, 2 * c))?)
    }
}

/// Kernel-2, stride-2 transposed convolution: `(B, T', C) -> (B, 2T', C')`.
#[derive(Debug, Clone)]
pub struct Up2 {
    inner: Linear,
}

impl Up2 {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        zero: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        Linear::init(store, name, input, 2 * output, zero, rng)
    }

    pub fn bind(store: &ParamStore, name: &str, detach: bool) -> Result<Self> {
        Ok(Up2 {
            inner: Linear::bind(store, name, detach)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let y = self.inner.forward(x)?;
        let c = self.inner.output_dim() / 2;
        Ok(y.reshape((b, 2 * t, c))?)
    }
}

/// Gated recurrent unit cell (PyTorch gate layout: reset, update, new).
#[derive(Debug, Clone)]
pub struct GruCell {
    wx: Tensor,
    wh: Tensor,
    bx: Tensor,
    bh: Tensor,
    hidden: usize,
}

impl GruCell {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let init = Init::fan_in(hidden);
        store.add(format!("{name}.wx"), &[input, 3 * hidden], init, rng)?;
        store.add(format!("{name}.wh"), &[hidden, 3 * hidden], init, rng)?;
        store.add(format!("{name}.bx"), &[3 * hidden], init, rng)?;
        store.add(format!("{name}.bh"), &[3 * hidden], init, rng)?;
        Ok(())
    }

    pub fn bind(store: &ParamStore, name: &str, detach: bool) -> Result<Self> {
        let wh = store.tensor(&format!("{name}.wh"), detach)?;
        let hidden = wh.dims()[0];
        Ok(GruCell {
            wx: store.tensor(&format!("{name}.wx"), detach)?,
            wh,
            bx: store.tensor(&format!("{name}.bx"), detach)?,
            bh: store.tensor(&format!("{name}.bh"), detach)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input projections for a whole sequence at once: `(B, T, in) -> (B, T, 3H)`.
    pub fn project_inputs(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, i) = x.dims3()?;
        Ok(x.reshape((b * t, i))?
            .matmul(&self.wx)?
            .broadcast_add(&self.bx)?
            .reshape((b, t, 3 * self.hidden))?)
    }

    /// One step given pre-projected inputs `gx` of shape `(B, 3H)`.
    pub fn step_projected(&self, gx: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.hidden;
        let gh = h.matmul(&self.wh)?.broadcast_add(&self.bh)?;
        let r = sigmoid(&(gx.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let z = sigmoid(&(gx.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let cand = (gx.narrow(1, 2 * n, n)? + (r * gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        // h' = n + z * (h - n)
        Ok((&cand + (z * (h - &cand)?)?)?)
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gx = x.matmul(&self.wx)?.broadcast_add(&self.bx)?;
        self.step_projected(&gx, h)
    }

    pub fn zeros(&self, batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.hidden), DType::F64, &DEVICE)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form stays finite for large |x|
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// Clamp a log-variance into `[lo, hi]`.
pub fn clamp_logvar(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    Ok(x.clamp(lo, hi)?)
}

/// Element-wise `log N(x; mean, exp(logvar))`.
pub fn gaussian_log_density(x: &Tensor, mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let sq = (x - mean)?.sqr()?;
    let scaled = (sq * logvar.neg()?.exp()?)?;
    Ok(((scaled + logvar)? + LN_2PI)?.affine(-0.5, 0.0)?)
}

/// Element-wise standard-normal log density.
pub fn standard_log_density(x: &Tensor) -> Result<Tensor> {
    Ok((x.sqr()? + LN_2PI)?.affine(-0.5, 0.0)?)
}

pub fn gaussian_log_density_scalar(x: f64, mean: f64, logvar: f64) -> f64 {
    -0.5 * (LN_2PI + logvar + (x - mean).powi(2) * (-logvar).exp())
}

/// Sum over all but the leading (batch) dimension.
pub fn sum_per_item(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.sum(D::Minus1)?)
}

pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
