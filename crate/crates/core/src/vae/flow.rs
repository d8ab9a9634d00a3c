//! Glow-style affine coupling flow applied per time step to the spectral
//! latent.
//!
//! `forward` maps a base draw `e0` to `eK` and returns
//! `log|det d eK / d e0|`, so `log q(eK) = log q(e0) - log_det`.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::embedding::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};

#[derive(Debug, Clone)]
enum Layer {
    Coupling {
        hidden: Linear,
        out: Linear,
        /// Conditioning dims come first when true.
        cond_low: bool,
    },
    /// Element-wise affine map used when the latent has a single dimension.
    Elementwise { log_scale: Tensor, shift: Tensor },
}

#[derive(Debug, Clone)]
pub struct AffineFlow {
    layers: Vec<Layer>,
    dim: usize,
}

pub(crate) fn init_flow(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = cfg.spectral_dim;
    let low = d / 2;
    for k in 0..cfg.flow_layers {
        if d >= 2 {
            let (cond, trans) = if k % 2 == 0 {
                (low, d - low)
            } else {
                (d - low, low)
            };
            Linear::init(
                store,
                &format!("flow.{k}.hidden"),
                cond,
                cfg.flow_hidden,
                false,
                rng,
            )?;
            // zero output layer: the flow starts as the identity
            Linear::init(
                store,
                &format!("flow.{k}.out"),
                cfg.flow_hidden,
                2 * trans,
                true,
                rng,
            )?;
        } else {
            store.add(format!("flow.{k}.log_scale"), &[d], Init::Zeros, rng)?;
            store.add(format!("flow.{k}.shift"), &[d], Init::Zeros, rng)?;
        }
    }
    Ok(())
}

impl AffineFlow {
    pub fn bind(store: &ParamStore, cfg: &ModelConfig, detach: bool) -> Result<Self> {
        let d = cfg.spectral_dim;
        let layers = (0..cfg.flow_layers)
            .map(|k| {
                Ok(if d >= 2 {
                    Layer::Coupling {
                        hidden: Linear::bind(store, &format!("flow.{k}.hidden"), detach)?,
                        out: Linear::bind(store, &format!("flow.{k}.out"), detach)?,
                        cond_low: k % 2 == 0,
                    }
                } else {
                    Layer::Elementwise {
                        log_scale: store.tensor(&format!("flow.{k}.log_scale"), detach)?,
                        shift: store.tensor(&format!("flow.{k}.shift"), detach)?,
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AffineFlow { layers, dim: d })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn split(&self, x: &Tensor, cond_low: bool) -> Result<(Tensor, Tensor)> {
        let low = self.dim / 2;
        let a = x.narrow(1, 0, low)?;
        let b = x.narrow(1, low, self.dim - low)?;
        Ok(if cond_low { (a, b) } else { (b, a) })
    }

    fn join(cond: &Tensor, trans: &Tensor, cond_low: bool) -> Result<Tensor> {
        Ok(if cond_low {
            Tensor::cat(&[cond, trans], 1)?
        } else {
            Tensor::cat(&[trans, cond], 1)?
        })
    }

    /// Log-scale and shift for the transformed half.
    fn scale_shift(hidden: &Linear, out: &Linear, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = hidden.forward(cond)?.tanh()?;
        let st = out.forward(&h)?;
        let n = st.dim(1)? / 2;
        Ok((st.narrow(1, 0, n)?.tanh()?, st.narrow(1, n, n)?))
    }

    fn run(&self, x: &Tensor, check: bool, inverse: bool) -> Result<(Tensor, Tensor)> {
        let (n, d) = x.dims2()?;
        if d != self.dim {
            return Err(Error::Shape(format!(
                "flow expects dimension {}, got {d}",
                self.dim
            )));
        }
        let mut y = x.clone();
        let mut log_det = Tensor::zeros(n, candle_core::DType::F64, x.device())?;
        let order: Vec<usize> = if inverse {
            (0..self.layers.len()).rev().collect()
        } else {
            (0..self.layers.len()).collect()
        };
        for k in order {
            let (s, t, cond_low) = match &self.layers[k] {
                Layer::Coupling {
                    hidden,
                    out,
                    cond_low,
                } => {
                    let (cond, _) = self.split(&y, *cond_low)?;
                    let (s, t) = Self::scale_shift(hidden, out, &cond)?;
                    (s, t, Some(*cond_low))
                }
                Layer::Elementwise { log_scale, shift } => (
                    log_scale.unsqueeze(0)?.broadcast_as((n, d))?,
                    shift.unsqueeze(0)?.broadcast_as((n, d))?,
                    None,
                ),
            };
            if check
                && !s
                    .flatten_all()?
                    .to_vec1::<f64>()?
                    .iter()
                    .all(|v| v.is_finite())
            {
                return Err(Error::NonFinite(format!("flow scale output at layer {k}")));
            }
            let layer_det = s.sum(1)?;
            let transform = |v: &Tensor| -> Result<Tensor> {
                Ok(if inverse {
                    (v - &t)?.mul(&s.neg()?.exp()?)?
                } else {
                    v.mul(&s.exp()?)?.add(&t)?
                })
            };
            y = match cond_low {
                Some(cl) => {
                    let (cond, trans) = self.split(&y, cl)?;
                    Self::join(&cond, &transform(&trans)?, cl)?
                }
                None => transform(&y)?,
            };
            log_det = if inverse {
                (log_det - layer_det)?
            } else {
                (log_det + layer_det)?
            };
        }
        Ok((y, log_det))
    }

    /// `(N, D) -> (eK, log|det d eK / d e0|)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(x, false, false)
    }

    /// Same as `forward`, failing on non-finite scales with the layer index.
    pub fn forward_checked(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(x, true, false)
    }

    /// `(N, D) -> (e0, log|det d e0 / d eK|)`.
    pub fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(y, false, true)
    }
}
