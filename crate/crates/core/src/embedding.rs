//! Dual-dimension embedding: a convolutional temporal encoder that halves
//! the time axis, the transposed-conv decoder producing the curated
//! reconstruction, and the recurrent spectral encoder run over that
//! reconstruction.
//!
//! The spectral encoder is the posterior half of a sequential latent model:
//! a backward GRU summarises the curated input from step `t` to the end
//! (`a_t`), and a forward chain emits `q(e_s_t | e_s_{t-1}, a_t)` one step
//! at a time.

use candle_core::Tensor;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, clamp_logvar, relu, standard_normal, step_lr, Adam, Conv3, Down2, GruCell, Init, Linear,
    Optimizer, OptimizerKind, ParamStore, Sgd, Up2,
};
use crate::vae::TrainingHyper;

/// Architecture shared by the embedding and the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub bands: usize,
    pub window: usize,
    /// Channels of the temporal latent `e_t`.
    pub temporal_dim: usize,
    /// Channels of the spectral latent `e_s`.
    pub spectral_dim: usize,
    pub conv_hidden: usize,
    pub gru_hidden: usize,
    pub posterior_hidden: usize,
    pub prior_hidden: usize,
    pub head_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

impl ModelConfig {
    pub fn new(bands: usize, window: usize) -> Self {
        ModelConfig {
            bands,
            window,
            temporal_dim: 8,
            spectral_dim: (bands / 2).max(1),
            conv_hidden: 32,
            gru_hidden: 32,
            posterior_hidden: 32,
            prior_hidden: 32,
            head_hidden: 32,
            flow_layers: 4,
            flow_hidden: 16,
            logvar_min: -10.0,
            logvar_max: 4.0,
        }
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window length must be even and positive, got {}",
                self.window
            )));
        }
        let dims = [
            ("bands", self.bands),
            ("temporal_dim", self.temporal_dim),
            ("spectral_dim", self.spectral_dim),
            ("conv_hidden", self.conv_hidden),
            ("gru_hidden", self.gru_hidden),
            ("posterior_hidden", self.posterior_hidden),
            ("prior_hidden", self.prior_hidden),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.flow_layers > 0 && self.spectral_dim >= 2 && self.flow_hidden == 0 {
            return Err(Error::Config("flow_hidden must be positive".into()));
        }
        if !(self.logvar_min < self.logvar_max) {
            return Err(Error::Config("logvar_min must be below logvar_max".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian parameters; tensors share one shape.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl Gaussian {
    pub fn variance(&self) -> Result<Tensor> {
        Ok(self.logvar.exp()?)
    }

    /// Reparameterised draw `mean + exp(logvar / 2) * noise`.
    pub fn draw(&self, noise: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + ((&self.logvar * 0.5)?.exp()? * noise)?)?)
    }

    pub fn log_density(&self, x: &Tensor) -> Result<Tensor> {
        nn::gaussian_log_density(x, &self.mean, &self.logvar)
    }

    /// `KL(self || N(0, I))` summed per batch item.
    pub fn kl_standard(&self) -> Result<Tensor> {
        let kl = ((self.mean.sqr()? + self.logvar.exp()?)? - &self.logvar)?.affine(0.5, -0.5)?;
        nn::sum_per_item(&kl)
    }
}

pub(crate) fn init_embedding(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (c, h) = (cfg.bands, cfg.conv_hidden);
    Conv3::init(store, "tenc.conv1", c, h, false, rng)?;
    Conv3::init(store, "tenc.conv2", h, h, false, rng)?;
    Down2::init(store, "tenc.down", h, h, false, rng)?;
    Linear::init(store, "tenc.mean", h, cfg.temporal_dim, false, rng)?;
    Linear::init(store, "tenc.logvar", h, cfg.temporal_dim, false, rng)?;

    Up2::init(store, "tdec.up", cfg.temporal_dim, h, false, rng)?;
    Conv3::init(store, "tdec.conv1", h, h, false, rng)?;
    Conv3::init(store, "tdec.out", h, c, false, rng)?;

    GruCell::init(store, "senc.gru", c, cfg.gru_hidden, rng)?;
    // posterior cell: hidden = tanh(a_t Wa + e_prev We + b)
    Linear::init(
        store,
        "senc.from_state",
        cfg.gru_hidden,
        cfg.posterior_hidden,
        false,
        rng,
    )?;
    store.add(
        "senc.from_prev.w",
        &[cfg.spectral_dim, cfg.posterior_hidden],
        Init::fan_in(cfg.spectral_dim + cfg.gru_hidden),
        rng,
    )?;
    Linear::init(
        store,
        "senc.mean",
        cfg.posterior_hidden,
        cfg.spectral_dim,
        false,
        rng,
    )?;
    Linear::init(
        store,
        "senc.logvar",
        cfg.posterior_hidden,
        cfg.spectral_dim,
        false,
        rng,
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    conv1: Conv3,
    conv2: Conv3,
    down: Down2,
    mean: Linear,
    logvar: Linear,
    bands: usize,
    lv_range: (f64, f64),
}

impl TemporalEncoder {
    pub fn bind(store: &ParamStore, cfg: &ModelConfig, detach: bool) -> Result<Self> {
        Ok(TemporalEncoder {
            conv1: Conv3::bind(store, "tenc.conv1", detach)?,
            conv2: Conv3::bind(store, "tenc.conv2", detach)?,
            down: Down2::bind(store, "tenc.down", detach)?,
            mean: Linear::bind(store, "tenc.mean", detach)?,
            logvar: Linear::bind(store, "tenc.logvar", detach)?,
            bands: cfg.bands,
            lv_range: (cfg.logvar_min, cfg.logvar_max),
        })
    }

    /// `(B, W, C) -> q(e_t | x)` with shape `(B, W/2, D_t)`.
    pub fn forward(&self, x: &Tensor) -> Result<Gaussian> {
        let (_, w, c) = x.dims3()?;
        if c != self.bands || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "temporal encoder expects (B, even W, {}), got {:?}",
                self.bands,
                x.dims()
            )));
        }
        let h = relu(&self.conv1.forward(x)?)?;
        let h = relu(&self.conv2.forward(&h)?)?;
        let h = relu(&self.down.forward(&h)?)?;
        Ok(Gaussian {
            mean: self.mean.forward(&h)?,
            logvar: clamp_logvar(&self.logvar.forward(&h)?, self.lv_range.0, self.lv_range.1)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TemporalDecoder {
    up: Up2,
    conv1: Conv3,
    out: Conv3,
    latent: usize,
}

impl TemporalDecoder {
    pub fn bind(store: &ParamStore, cfg: &ModelConfig, detach: bool) -> Result<Self> {
        Ok(TemporalDecoder {
            up: Up2::bind(store, "tdec.up", detach)?,
            conv1: Conv3::bind(store, "tdec.conv1", detach)?,
            out: Conv3::bind(store, "tdec.out", detach)?,
            latent: cfg.temporal_dim,
        })
    }

    /// `(B, W/2, D_t) -> (B, W, C)`.
    pub fn forward(&self, e_t: &Tensor) -> Result<Tensor> {
        let (_, _, d) = e_t.dims3()?;
        if d != self.latent {
            return Err(Error::Shape(format!(
                "temporal decoder expects {} latent channels, got {d}",
                self.latent
            )));
        }
        let h = relu(&self.up.forward(e_t)?)?;
        let h = relu(&self.conv1.forward(&h)?)?;
        self.out.forward(&h)
    }
}

/// Output of the spectral encoder for one pass.
#[derive(Debug, Clone)]
pub struct SpectralPosterior {
    /// Backward states `a_t`, each `(B, G)`, indexed by time.
    pub states: Vec<Tensor>,
    /// Per-step `q(e_s_t | ...)`, stacked to `(B, W, D_s)`.
    pub posterior: Gaussian,
    /// Base draws `e_s^(0)`, `(B, W, D_s)`.
    pub draws: Tensor,
}

#[derive(Debug, Clone)]
pub struct SpectralEncoder {
    gru: GruCell,
    from_state: Linear,
    from_prev: Tensor,
    mean: Linear,
    logvar: Linear,
    bands: usize,
    latent: usize,
    lv_range: (f64, f64),
}

impl SpectralEncoder {
    pub fn bind(store: &ParamStore, cfg: &ModelConfig, detach: bool) -> Result<Self> {
        Ok(SpectralEncoder {
            gru: GruCell::bind(store, "senc.gru", detach)?,
            from_state: Linear::bind(store, "senc.from_state", detach)?,
            from_prev: store.tensor("senc.from_prev.w", detach)?,
            mean: Linear::bind(store, "senc.mean", detach)?,
            logvar: Linear::bind(store, "senc.logvar", detach)?,
            bands: cfg.bands,
            latent: cfg.spectral_dim,
            lv_range: (cfg.logvar_min, cfg.logvar_max),
        })
    }

    /// Backward recurrence `a_t = h(a_{t+1}, d_t)`, `a_{W+1} = 0`.
    pub fn backward_states(&self, d: &Tensor) -> Result<Vec<Tensor>> {
        let (b, w, c) = d.dims3()?;
        if c != self.bands {
            return Err(Error::Shape(format!(
                "spectral encoder expects {} bands, got {c}",
                self.bands
            )));
        }
        let proj = self.gru.project_inputs(d)?;
        let mut a = self.gru.zeros(b)?;
        let mut states = vec![a.clone(); w];
        for t in (0..w).rev() {
            a = self
                .gru
                .step_projected(&proj.narrow(1, t, 1)?.squeeze(1)?, &a)?;
            states[t] = a.clone();
        }
        Ok(states)
    }

    /// Run the forward chain with the given standard-normal noise
    /// `(B, W, D_s)`; zero noise follows the posterior means.
    pub fn forward(&self, d: &Tensor, noise: &Tensor) -> Result<SpectralPosterior> {
        let (b, w, _) = d.dims3()?;
        if noise.dims() != [b, w, self.latent] {
            return Err(Error::Shape(format!(
                "spectral noise must be {:?}, got {:?}",
                [b, w, self.latent],
                noise.dims()
            )));
        }
        let states = self.backward_states(d)?;
        let stacked = Tensor::stack(&states, 1)?;
        let state_part = self.from_state.forward(&stacked)?;
        let mut prev = Tensor::zeros((b, self.latent), candle_core::DType::F64, &nn::DEVICE)?;
        let (mut means, mut logvars, mut draws) = (
            Vec::with_capacity(w),
            Vec::with_capacity(w),
            Vec::with_capacity(w),
        );
        for t in 0..w {
            let pre = (state_part.narrow(1, t, 1)?.squeeze(1)? + prev.matmul(&self.from_prev)?)?;
            let h = pre.tanh()?;
            let step = Gaussian {
                mean: self.mean.forward(&h)?,
                logvar: clamp_logvar(&self.logvar.forward(&h)?, self.lv_range.0, self.lv_range.1)?,
            };
            let e0 = step.draw(&noise.narrow(1, t, 1)?.squeeze(1)?)?;
            means.push(step.mean);
            logvars.push(step.logvar);
            draws.push(e0.clone());
            prev = e0;
        }
        Ok(SpectralPosterior {
            states,
            posterior: Gaussian {
                mean: Tensor::stack(&means, 1)?,
                logvar: Tensor::stack(&logvars, 1)?,
            },
            draws: Tensor::stack(&draws, 1)?,
        })
    }
}

/// Band-major windows to a `(B, W, C)` tensor.
pub fn windows_tensor<'a>(windows: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0;
    for w in windows {
        let (c, t) = w.dim();
        match dims {
            None => dims = Some((c, t)),
            Some(d) if d != (c, t) => {
                return Err(Error::Shape(format!(
                    "window {:?} differs from {:?}",
                    (c, t),
                    d
                )));
            }
            _ => {}
        }
        data.extend(w.t().iter().copied());
        n += 1;
    }
    let (c, t) = dims.ok_or_else(|| Error::Shape("no windows".into()))?;
    Ok(Tensor::from_vec(data, (n, t, c), &nn::DEVICE)?)
}

/// One `(W, C)` slice of a `(B, W, C)` tensor back to a band-major matrix.
pub fn tensor_window(x: &Tensor, item: usize) -> Result<Array2<f64>> {
    let (_, w, c) = x.dims3()?;
    let rows = x.get(item)?.to_vec2::<f64>()?;
    Ok(Array2::from_shape_fn((c, w), |(b, t)| rows[t][b]))
}

/// Temporal-path weights after curation pretraining.
#[derive(Debug, Clone)]
pub struct CurationCheckpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Epoch-mean negative ELBO.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

impl CurationCheckpoint {
    /// Curated reconstruction `D(E[e_t | x])` for a batch.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let enc = TemporalEncoder::bind(&self.params, &self.config, true)?;
        let dec = TemporalDecoder::bind(&self.params, &self.config, true)?;
        dec.forward(&enc.forward(x)?.mean)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = CurationFile {
            format: crate::vae::CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            params: self.params.snapshot()?,
            loss_trace: self.loss_trace.clone(),
            converged: self.converged,
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CurationFile = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.format != crate::vae::CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?}",
                file.format
            )));
        }
        let params = ParamStore::from_snapshot(&file.params)?;
        TemporalEncoder::bind(&params, &file.config, true)?;
        TemporalDecoder::bind(&params, &file.config, true)?;
        Ok(CurationCheckpoint {
            config: file.config,
            params,
            loss_trace: file.loss_trace,
            converged: file.converged,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CurationFile {
    format: String,
    config: ModelConfig,
    params: std::collections::BTreeMap<String, crate::nn::ParamTensor>,
    loss_trace: Vec<f64>,
    converged: bool,
}

/// Loss trace is non-increasing over its last five epochs within 5%.
pub fn trace_converged(trace: &[f64]) -> bool {
    let tail = &trace[trace.len().saturating_sub(5)..];
    tail.windows(2).all(|w| w[1] <= w[0] + 0.05 * w[0].abs())
}

pub(crate) fn make_optimizer(hyper: &TrainingHyper) -> Box<dyn Optimizer> {
    match hyper.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd::new(hyper.momentum, hyper.weight_decay)),
        OptimizerKind::Adam => Box::new(Adam::new(hyper.weight_decay)),
    }
}

/// Pretrain the temporal encode/decode path as a single-latent VAE with a
/// learned per-band output variance.
pub fn pretrain_curation(
    cfg: &ModelConfig,
    windows: &[Array2<f64>],
    hyper: &TrainingHyper,
) -> Result<CurationCheckpoint> {
    pretrain_curation_from(cfg, windows, hyper, None)
}

/// As [`pretrain_curation`], optionally starting from an earlier checkpoint
/// with the same architecture.
pub fn pretrain_curation_from(
    cfg: &ModelConfig,
    windows: &[Array2<f64>],
    hyper: &TrainingHyper,
    init: Option<&CurationCheckpoint>,
) -> Result<CurationCheckpoint> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Validation(
            "curation pretraining needs at least one window".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    init_embedding(&mut params, cfg, &mut init_rng)?;
    params.add("cur.logvar", &[cfg.bands], Init::Const(-2.0), &mut init_rng)?;
    if let Some(start) = init {
        if start.config != *cfg {
            return Err(Error::Validation(
                "warm-start checkpoint has a different model config".into(),
            ));
        }
        params = ParamStore::from_snapshot(&start.params.snapshot()?)?;
    }
    let data = windows_tensor(windows)?;
    let mut opt = make_optimizer(hyper);
    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..hyper.epochs {
        let lr = step_lr(hyper.lr, hyper.lr_decay, hyper.decay_every, epoch);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(hyper.batch_size.max(1)).enumerate() {
            let idx = Tensor::from_vec(
                chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                chunk.len(),
                &nn::DEVICE,
            )?;
            let x = data.index_select(&idx, 0)?;
            let enc = TemporalEncoder::bind(&params, cfg, false)?;
            let dec = TemporalDecoder::bind(&params, cfg, false)?;
            let q = enc.forward(&x)?;
            let noise = standard_normal(&mut rng, q.mean.dims())?;
            let recon = dec.forward(&q.draw(&noise)?)?;
            let lv = params
                .tensor("cur.logvar", false)?
                .clamp(cfg.logvar_min, cfg.logvar_max)?
                .broadcast_as(recon.shape())?;
            let log_px = nn::sum_per_item(&nn::gaussian_log_density(&x, &recon, &lv)?)?;
            let loss = (q.kl_standard()? - log_px)?.mean_all()?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "curation loss at epoch {epoch}, batch {bi}, parameter norm {:.4e}",
                    params.l2_norm()?
                )));
            }
            let grads = loss.backward()?;
            opt.step(&params, &grads, lr)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        trace.push(total / count as f64);
    }
    let converged = trace_converged(&trace);
    if !converged {
        log::warn!(
            "curation pretraining did not settle: last losses {:?}",
            &trace[trace.len().saturating_sub(5)..]
        );
    }
    Ok(CurationCheckpoint {
        config: cfg.clone(),
        params,
        loss_trace: trace,
        converged,
    })
}

/// Mean squared residual of the curated reconstruction over windows.
pub fn curation_mse(ckpt: &CurationCheckpoint, windows: &[Array2<f64>]) -> Result<f64> {
    let x = windows_tensor(windows)?;
    let r = ckpt.reconstruct(&x)?;
    nn::scalar(&(r - x)?.sqr()?.mean_all()?)
}
