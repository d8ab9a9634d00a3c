//! Hierarchical temporal-spectral VAE.
//!
//! Generative model, per window of `W` steps:
//!
//! ```text
//! e_t ~ N(0, I)                              (W/2 x D_t)
//! z   = D(e_t)                               (W x C, decoder shared with q)
//! e_s_t ~ p(e_s_t | e_s_{t-1}, z_t)          (recurrent Gaussian prior)
//! x_t ~ N(mu(e_s_t, z_t), diag sigma^2(e_s_t, z_t))
//! ```
//!
//! Posterior: `q(e_t | x)` from the temporal encoder, the curated input
//! `d = D(e_t)`, then `q(e_s_t | e_s_{t-1}, a_t)` from the spectral encoder,
//! each step pushed through an affine coupling flow. Because `d` and `z`
//! are produced by the same decoder weights their delta densities cancel,
//! leaving
//!
//! ```text
//! ELBO = log p(x | e_s, z) + sum_t log p(e_s_t | .) + log p(e_t)
//!      - sum_t [log q(e0_t | .) - log|det|] - log q(e_t | x)
//! ```

mod checkpoint;
pub mod flow;

use std::time::Instant;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MinMaxNormalizer;
use crate::embedding::{
    init_embedding, make_optimizer, tensor_window, windows_tensor, CurationCheckpoint, Gaussian,
    ModelConfig, SpectralEncoder, SpectralPosterior, TemporalDecoder, TemporalEncoder,
};
use crate::error::{Error, Result};
use crate::nn::{
    self, standard_normal, step_lr, GruCell, Linear, OptimizerKind, ParamStore, DEVICE,
};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, write_metrics_csv, Checkpoint, CHECKPOINT_FORMAT,
};
pub use flow::AffineFlow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyper {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Monte Carlo draws for scoring.
    pub mc_samples_eval: usize,
    /// Monte Carlo draws per window during training.
    pub mc_samples_train: usize,
    pub window: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Epochs over which the latent terms ramp linearly up to full weight.
    pub kl_warmup: usize,
    /// Keep the pretrained temporal encoder/decoder fixed during joint training.
    pub freeze_curation: bool,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        TrainingHyper {
            batch_size: 32,
            lr: 0.002,
            lr_decay: 0.1,
            decay_every: 10,
            epochs: 50,
            momentum: 0.9,
            weight_decay: 0.0005,
            mc_samples_eval: 40,
            mc_samples_train: 1,
            window: 30,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: Some(100.0),
            kl_warmup: 0,
            freeze_curation: false,
        }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.mc_samples_eval == 0
            || self.mc_samples_train == 0
            || self.window == 0
        {
            return Err(Error::Config(
                "batch size, window and Monte Carlo counts must be positive".into(),
            ));
        }
        if !(self.lr > 0.0)
            || !(self.lr_decay > 0.0)
            || self.momentum < 0.0
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(
                "learning-rate schedule and regularisers must be positive".into(),
            ));
        }
        if !self.window.is_multiple_of(2) {
            return Err(Error::Config("window length must be even".into()));
        }
        Ok(())
    }
}

/// Standard-normal noise driving one batch of posterior draws.
#[derive(Debug, Clone)]
pub struct PosteriorNoise {
    /// `(B, W/2, D_t)`
    pub temporal: Tensor,
    /// `(B, W, D_s)`
    pub spectral: Tensor,
}

impl PosteriorNoise {
    pub fn sample(rng: &mut ChaCha8Rng, batch: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(PosteriorNoise {
            temporal: standard_normal(rng, &[batch, cfg.half_window(), cfg.temporal_dim])?,
            spectral: standard_normal(rng, &[batch, cfg.window, cfg.spectral_dim])?,
        })
    }

    pub fn zeros(batch: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(PosteriorNoise {
            temporal: Tensor::zeros(
                (batch, cfg.half_window(), cfg.temporal_dim),
                DType::F64,
                &DEVICE,
            )?,
            spectral: Tensor::zeros((batch, cfg.window, cfg.spectral_dim), DType::F64, &DEVICE)?,
        })
    }

    /// `L` draws from `seed`, tiled so every one of `windows` items sees the
    /// same draws. Rows are window-major.
    pub fn common(seed: u64, draws: usize, windows: usize, cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Self::sample(&mut rng, draws, cfg)?;
        let tile = |t: &Tensor| -> Result<Tensor> {
            let dims = t.dims().to_vec();
            let rep = t
                .unsqueeze(0)?
                .broadcast_as((windows, dims[0], dims[1], dims[2]))?;
            Ok(rep.reshape((windows * dims[0], dims[1], dims[2]))?)
        };
        Ok(PosteriorNoise {
            temporal: tile(&base.temporal)?,
            spectral: tile(&base.spectral)?,
        })
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(PosteriorNoise {
            temporal: self.temporal.narrow(0, start, len)?,
            spectral: self.spectral.narrow(0, start, len)?,
        })
    }
}

/// Every intermediate of one batched posterior/generative pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub temporal_posterior: Gaussian,
    pub e_t: Tensor,
    /// `d = D(e_t)`, also the generative `z`.
    pub curated: Tensor,
    pub spectral: SpectralPosterior,
    /// Post-flow spectral latent `(B, W, D_s)`.
    pub e_s: Tensor,
    /// `log|det d eK / d e0|` per step, `(B, W)`.
    pub flow_log_det: Tensor,
    pub prior: Gaussian,
    pub output: Gaussian,
}

/// Per-item ELBO terms, each `(B,)`.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    pub log_px: Tensor,
    pub log_p_es: Tensor,
    pub log_p_et: Tensor,
    pub log_q_es: Tensor,
    pub log_q_et: Tensor,
}

impl ElboTerms {
    pub fn elbo(&self) -> Result<Tensor> {
        self.weighted(1.0)
    }

    /// `log p(x|.) + beta * (log p - log q)` over the latents.
    pub fn weighted(&self, beta: f64) -> Result<Tensor> {
        let latent = ((&self.log_p_es + &self.log_p_et)? - (&self.log_q_es + &self.log_q_et)?)?;
        Ok((&self.log_px + (latent * beta)?)?)
    }

    pub fn mean(&self) -> Result<ElboBreakdown> {
        let m = |t: &Tensor| nn::scalar(&t.mean_all()?);
        Ok(ElboBreakdown {
            log_px: m(&self.log_px)?,
            log_p_es: m(&self.log_p_es)?,
            log_p_et: m(&self.log_p_et)?,
            log_q_es: m(&self.log_q_es)?,
            log_q_et: m(&self.log_q_et)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub log_px: f64,
    pub log_p_es: f64,
    pub log_p_et: f64,
    pub log_q_es: f64,
    pub log_q_et: f64,
}

impl ElboBreakdown {
    pub fn total(&self) -> f64 {
        self.log_px + self.log_p_es + self.log_p_et - self.log_q_es - self.log_q_et
    }

    /// Latent part `log p - log q` over both latents.
    pub fn latent_residual(&self) -> f64 {
        self.log_p_es + self.log_p_et - self.log_q_es - self.log_q_et
    }

    fn check(&self) -> Result<()> {
        let terms = [
            ("log p(x | e_s, e_t, z)", self.log_px),
            ("log p(e_s | z)", self.log_p_es),
            ("log p(e_t)", self.log_p_et),
            ("log q(e_s | d)", self.log_q_es),
            ("log q(e_t | x)", self.log_q_et),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite(format!("ELBO term {name}"))),
            None => Ok(()),
        }
    }
}

/// ELBO with the deterministic `d`/`z` densities kept explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplicitElbo {
    pub terms: ElboBreakdown,
    pub log_q_d: f64,
    pub log_p_z: f64,
}

impl ExplicitElbo {
    pub fn total(&self) -> f64 {
        self.terms.log_px + self.terms.log_p_es + self.log_p_z + self.terms.log_p_et
            - self.terms.log_q_es
            - self.log_q_d
            - self.terms.log_q_et
    }
}

/// Layers bound to one parameter snapshot.
#[derive(Debug, Clone)]
pub struct Net {
    pub cfg: ModelConfig,
    pub temporal_encoder: TemporalEncoder,
    pub temporal_decoder: TemporalDecoder,
    pub spectral_encoder: SpectralEncoder,
    pub flow: AffineFlow,
    prior_gru: GruCell,
    prior_mean: Linear,
    prior_logvar: Linear,
    head_hidden: Linear,
    head_mean: Linear,
    head_logvar: Linear,
}

impl Net {
    pub fn bind(store: &ParamStore, cfg: &ModelConfig, detach: bool) -> Result<Self> {
        Ok(Net {
            cfg: cfg.clone(),
            temporal_encoder: TemporalEncoder::bind(store, cfg, detach)?,
            temporal_decoder: TemporalDecoder::bind(store, cfg, detach)?,
            spectral_encoder: SpectralEncoder::bind(store, cfg, detach)?,
            flow: AffineFlow::bind(store, cfg, detach)?,
            prior_gru: GruCell::bind(store, "prior.gru", detach)?,
            prior_mean: Linear::bind(store, "prior.mean", detach)?,
            prior_logvar: Linear::bind(store, "prior.logvar", detach)?,
            head_hidden: Linear::bind(store, "head.hidden", detach)?,
            head_mean: Linear::bind(store, "head.mean", detach)?,
            head_logvar: Linear::bind(store, "head.logvar", detach)?,
        })
    }

    fn clamp(&self, t: &Tensor) -> Result<Tensor> {
        nn::clamp_logvar(t, self.cfg.logvar_min, self.cfg.logvar_max)
    }

    fn apply_flow(&self, e0: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, w, d) = e0.dims3()?;
        if self.flow.depth() == 0 {
            return Ok((e0.clone(), Tensor::zeros((b, w), DType::F64, &DEVICE)?));
        }
        let (y, ld) = self.flow.forward(&e0.reshape((b * w, d))?)?;
        Ok((y.reshape((b, w, d))?, ld.reshape((b, w))?))
    }

    /// `p(e_s_t | e_s_{t-1}, z_t)` for all steps given the full latent path.
    pub fn spectral_prior(&self, e_s: &Tensor, z: &Tensor) -> Result<Gaussian> {
        let (b, w, d) = e_s.dims3()?;
        let first = Tensor::zeros((b, 1, d), DType::F64, &DEVICE)?;
        let prev = if w > 1 {
            Tensor::cat(&[&first, &e_s.narrow(1, 0, w - 1)?], 1)?
        } else {
            first
        };
        let proj = self
            .prior_gru
            .project_inputs(&Tensor::cat(&[&prev, z], 2)?)?;
        let mut h = self.prior_gru.zeros(b)?;
        let mut hs = Vec::with_capacity(w);
        for t in 0..w {
            h = self
                .prior_gru
                .step_projected(&proj.narrow(1, t, 1)?.squeeze(1)?, &h)?;
            hs.push(h.clone());
        }
        let hs = Tensor::stack(&hs, 1)?;
        Ok(Gaussian {
            mean: self.prior_mean.forward(&hs)?,
            logvar: self.clamp(&self.prior_logvar.forward(&hs)?)?,
        })
    }

    /// `p(x | e_s, e_t, z)` per cell.
    pub fn output_head(&self, e_s: &Tensor, z: &Tensor) -> Result<Gaussian> {
        let h = self
            .head_hidden
            .forward(&Tensor::cat(&[e_s, z], 2)?)?
            .tanh()?;
        Ok(Gaussian {
            mean: self.head_mean.forward(&h)?,
            logvar: self.clamp(&self.head_logvar.forward(&h)?)?,
        })
    }

    pub fn pass(&self, x: &Tensor, noise: &PosteriorNoise) -> Result<Pass> {
        let (b, w, c) = x.dims3()?;
        if w != self.cfg.window || c != self.cfg.bands {
            return Err(Error::Shape(format!(
                "model expects windows of {} bands x {} steps, got {c} x {w}",
                self.cfg.bands, self.cfg.window
            )));
        }
        if noise.temporal.dim(0)? != b {
            return Err(Error::Shape(format!(
                "noise batch {} vs input batch {b}",
                noise.temporal.dim(0)?
            )));
        }
        let temporal_posterior = self.temporal_encoder.forward(x)?;
        let e_t = temporal_posterior.draw(&noise.temporal)?;
        let curated = self.temporal_decoder.forward(&e_t)?;
        let spectral = self.spectral_encoder.forward(&curated, &noise.spectral)?;
        let (e_s, flow_log_det) = self.apply_flow(&spectral.draws)?;
        let prior = self.spectral_prior(&e_s, &curated)?;
        let output = self.output_head(&e_s, &curated)?;
        Ok(Pass {
            temporal_posterior,
            e_t,
            curated,
            spectral,
            e_s,
            flow_log_det,
            prior,
            output,
        })
    }

    pub fn terms(&self, x: &Tensor, pass: &Pass) -> Result<ElboTerms> {
        let per = nn::sum_per_item;
        Ok(ElboTerms {
            log_px: per(&pass.output.log_density(x)?)?,
            log_p_es: per(&pass.prior.log_density(&pass.e_s)?)?,
            log_p_et: per(&nn::standard_log_density(&pass.e_t)?)?,
            log_q_es: (per(&pass.spectral.posterior.log_density(&pass.spectral.draws)?)?
                - per(&pass.flow_log_det)?)?,
            log_q_et: per(&pass.temporal_posterior.log_density(&pass.e_t)?)?,
        })
    }

    pub fn elbo_terms(&self, x: &Tensor, noise: &PosteriorNoise) -> Result<ElboTerms> {
        let pass = self.pass(x, noise)?;
        self.terms(x, &pass)
    }
}

/// Trained (or initial) model plus the input normalization it expects.
#[derive(Debug, Clone)]
pub struct HtsVaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub normalizer: MinMaxNormalizer,
    pub seed: u64,
}

/// One posterior draw for a single window, band/latent-major matrices.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    /// `D_t x W/2`
    pub e_t: Array2<f64>,
    /// `C x W`
    pub curated: Array2<f64>,
    /// Post-flow `D_s x W`.
    pub e_s: Array2<f64>,
    /// Per-step flow log-determinant.
    pub flow_log_det: Vec<f64>,
    pub terms: ElboBreakdown,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `C x W` mean of the output-head means over draws.
    pub mean: Array2<f64>,
    /// `C x W` mean per-cell log-likelihood over draws.
    pub log_lik: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Epoch-mean negative ELBO per window.
    pub objective: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HtsVaeModel,
    pub trace: Vec<EpochMetrics>,
}

/// Rows per batched inference call.
const INFERENCE_ROWS: usize = 4096;

fn to_matrix(t: &Tensor) -> Result<Array2<f64>> {
    // (W, K) -> K x W
    let rows = t.to_vec2::<f64>()?;
    let (w, k) = (rows.len(), rows.first().map_or(0, Vec::len));
    Ok(Array2::from_shape_fn((k, w), |(i, j)| rows[j][i]))
}

impl HtsVaeModel {
    pub fn new(config: ModelConfig, normalizer: MinMaxNormalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if normalizer.mins.len() != config.bands {
            return Err(Error::Shape(format!(
                "normalizer has {} bands, model {}",
                normalizer.mins.len(),
                config.bands
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_embedding(&mut params, &config, &mut rng)?;
        let (ds, c) = (config.spectral_dim, config.bands);
        GruCell::init(
            &mut params,
            "prior.gru",
            ds + c,
            config.prior_hidden,
            &mut rng,
        )?;
        Linear::init(
            &mut params,
            "prior.mean",
            config.prior_hidden,
            ds,
            false,
            &mut rng,
        )?;
        Linear::init(
            &mut params,
            "prior.logvar",
            config.prior_hidden,
            ds,
            false,
            &mut rng,
        )?;
        Linear::init(
            &mut params,
            "head.hidden",
            ds + c,
            config.head_hidden,
            false,
            &mut rng,
        )?;
        Linear::init(
            &mut params,
            "head.mean",
            config.head_hidden,
            c,
            false,
            &mut rng,
        )?;
        Linear::init(
            &mut params,
            "head.logvar",
            config.head_hidden,
            c,
            false,
            &mut rng,
        )?;
        flow::init_flow(&mut params, &config, &mut rng)?;
        Ok(HtsVaeModel {
            config,
            params,
            normalizer,
            seed,
        })
    }

    /// Copy the pretrained temporal path into this model.
    pub fn load_curation(&mut self, ckpt: &CurationCheckpoint) -> Result<()> {
        if ckpt.config.bands != self.config.bands
            || ckpt.config.window != self.config.window
            || ckpt.config.temporal_dim != self.config.temporal_dim
            || ckpt.config.conv_hidden != self.config.conv_hidden
        {
            return Err(Error::Shape(
                "curation checkpoint architecture differs from model".into(),
            ));
        }
        let snap: std::collections::BTreeMap<_, _> = ckpt
            .params
            .snapshot()?
            .into_iter()
            .filter(|(k, _)| is_curation_param(k))
            .collect();
        self.params
            .load_matching(&ParamStore::from_snapshot(&snap)?)?;
        Ok(())
    }

    pub fn net(&self, detach: bool) -> Result<Net> {
        Net::bind(&self.params, &self.config, detach)
    }

    pub fn check_window(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.config.bands, self.config.window) {
            return Err(Error::Shape(format!(
                "window {:?}, model expects {:?}",
                x.dim(),
                (self.config.bands, self.config.window)
            )));
        }
        Ok(())
    }

    /// Flow applied to one base vector; returns `(eK, log|det d eK / d e0|)`.
    pub fn flow_forward(&self, e0: &[f64]) -> Result<(Vec<f64>, f64)> {
        let flow = AffineFlow::bind(&self.params, &self.config, true)?;
        let x = Tensor::from_slice(e0, (1, e0.len()), &DEVICE)?;
        let (y, ld) = flow.forward_checked(&x)?;
        Ok((y.flatten_all()?.to_vec1()?, ld.to_vec1::<f64>()?[0]))
    }

    pub fn flow_inverse(&self, ek: &[f64]) -> Result<(Vec<f64>, f64)> {
        let flow = AffineFlow::bind(&self.params, &self.config, true)?;
        let x = Tensor::from_slice(ek, (1, ek.len()), &DEVICE)?;
        let (y, ld) = flow.inverse(&x)?;
        Ok((y.flatten_all()?.to_vec1()?, ld.to_vec1::<f64>()?[0]))
    }

    pub fn sample_posterior(
        &self,
        x: &Array2<f64>,
        draws: usize,
        seed: u64,
    ) -> Result<Vec<PosteriorDraw>> {
        self.check_window(x)?;
        let net = self.net(true)?;
        let noise = PosteriorNoise::common(seed, draws, 1, &self.config)?;
        let input = windows_tensor([x])?
            .broadcast_as((draws, self.config.window, self.config.bands))?
            .contiguous()?;
        let pass = net.pass(&input, &noise)?;
        let terms = net.terms(&input, &pass)?;
        let mut out = Vec::with_capacity(draws);
        for l in 0..draws {
            let pick = |t: &Tensor| -> Result<f64> { Ok(t.get(l)?.to_scalar::<f64>()?) };
            let draw = PosteriorDraw {
                e_t: to_matrix(&pass.e_t.get(l)?)?,
                curated: to_matrix(&pass.curated.get(l)?)?,
                e_s: to_matrix(&pass.e_s.get(l)?)?,
                flow_log_det: pass.flow_log_det.get(l)?.to_vec1()?,
                terms: ElboBreakdown {
                    log_px: pick(&terms.log_px)?,
                    log_p_es: pick(&terms.log_p_es)?,
                    log_p_et: pick(&terms.log_p_et)?,
                    log_q_es: pick(&terms.log_q_es)?,
                    log_q_et: pick(&terms.log_q_et)?,
                },
            };
            if let Some(step) = (0..self.config.window).find(|&t| {
                draw.e_s.column(t).iter().any(|v| !v.is_finite())
                    || !draw.flow_log_det[t].is_finite()
            }) {
                return Err(Error::NonFinite(format!("posterior draw {l}, step {step}")));
            }
            if draw.e_t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "posterior draw {l}, temporal latent"
                )));
            }
            draw.terms.check()?;
            out.push(draw);
        }
        Ok(out)
    }

    /// Monte Carlo ELBO of one window with `draws` samples.
    pub fn elbo(&self, x: &Array2<f64>, draws: usize, seed: u64) -> Result<(f64, ElboBreakdown)> {
        self.check_window(x)?;
        let net = self.net(true)?;
        let noise = PosteriorNoise::common(seed, draws, 1, &self.config)?;
        let mut sums = ElboBreakdown::default();
        let mut start = 0;
        while start < draws {
            let len = INFERENCE_ROWS.min(draws - start);
            let input = windows_tensor([x])?
                .broadcast_as((len, self.config.window, self.config.bands))?
                .contiguous()?;
            let terms = net.elbo_terms(&input, &noise.narrow(start, len)?)?;
            let s = |t: &Tensor| nn::scalar(&t.sum_all()?);
            sums.log_px += s(&terms.log_px)?;
            sums.log_p_es += s(&terms.log_p_es)?;
            sums.log_p_et += s(&terms.log_p_et)?;
            sums.log_q_es += s(&terms.log_q_es)?;
            sums.log_q_et += s(&terms.log_q_et)?;
            start += len;
        }
        let n = draws as f64;
        let mean = ElboBreakdown {
            log_px: sums.log_px / n,
            log_p_es: sums.log_p_es / n,
            log_p_et: sums.log_p_et / n,
            log_q_es: sums.log_q_es / n,
            log_q_et: sums.log_q_et / n,
        };
        mean.check()?;
        Ok((mean.total(), mean))
    }

    /// ELBO with `log q(d | e_t)` and `log p(z | e_t)` written out as
    /// narrow Gaussians of log-variance `kernel_logvar` around the decoder
    /// output. The generative `z` is decoded by a separately bound copy of
    /// the shared decoder weights.
    pub fn elbo_explicit(
        &self,
        x: &Array2<f64>,
        draws: usize,
        seed: u64,
        kernel_logvar: f64,
    ) -> Result<ExplicitElbo> {
        self.check_window(x)?;
        let net = self.net(true)?;
        let generative_decoder = TemporalDecoder::bind(&self.params, &self.config, true)?;
        let noise = PosteriorNoise::common(seed, draws, 1, &self.config)?;
        let input = windows_tensor([x])?
            .broadcast_as((draws, self.config.window, self.config.bands))?
            .contiguous()?;
        let q_t = net.temporal_encoder.forward(&input)?;
        let e_t = q_t.draw(&noise.temporal)?;
        let d = net.temporal_decoder.forward(&e_t)?;
        let z = generative_decoder.forward(&e_t)?;
        let spectral = net.spectral_encoder.forward(&d, &noise.spectral)?;
        let (e_s, log_det) = net.apply_flow(&spectral.draws)?;
        let prior = net.spectral_prior(&e_s, &z)?;
        let output = net.output_head(&e_s, &z)?;
        let kernel = Tensor::full(kernel_logvar, d.shape(), &DEVICE)?;
        let per = |t: &Tensor| -> Result<f64> { nn::scalar(&nn::sum_per_item(t)?.mean_all()?) };
        let terms = ElboBreakdown {
            log_px: per(&output.log_density(&input)?)?,
            log_p_es: per(&prior.log_density(&e_s)?)?,
            log_p_et: per(&nn::standard_log_density(&e_t)?)?,
            log_q_es: per(&spectral.posterior.log_density(&spectral.draws)?)? - per(&log_det)?,
            log_q_et: per(&q_t.log_density(&e_t)?)?,
        };
        Ok(ExplicitElbo {
            terms,
            log_q_d: per(&nn::gaussian_log_density(&d, &d, &kernel)?)?,
            log_p_z: per(&nn::gaussian_log_density(&d, &z, &kernel)?)?,
        })
    }

    /// Mean reconstruction and per-cell log-likelihood over `draws` samples
    /// for each window. All windows share the same noise draws.
    pub fn reconstruct(
        &self,
        windows: &[Array2<f64>],
        draws: usize,
        seed: u64,
    ) -> Result<Vec<Reconstruction>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        for w in windows {
            self.check_window(w)?;
        }
        if !self.params.all_finite()? {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let net = self.net(true)?;
        let per_chunk = (INFERENCE_ROWS / draws).max(1);
        let noise =
            PosteriorNoise::common(seed, draws, per_chunk.min(windows.len()), &self.config)?;
        let (w, c) = (self.config.window, self.config.bands);
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(per_chunk) {
            let n = chunk.len();
            let x = windows_tensor(chunk)?;
            let rep = x
                .unsqueeze(1)?
                .broadcast_as((n, draws, w, c))?
                .reshape((n * draws, w, c))?;
            let pass = net.pass(&rep, &noise.narrow(0, n * draws)?)?;
            let ll = pass
                .output
                .log_density(&rep)?
                .reshape((n, draws, w, c))?
                .mean(1)?;
            let mean = pass.output.mean.reshape((n, draws, w, c))?.mean(1)?;
            for i in 0..n {
                out.push(Reconstruction {
                    mean: tensor_window(&mean, i)?,
                    log_lik: tensor_window(&ll, i)?,
                });
            }
        }
        Ok(out)
    }

    /// Posterior-mean latents per window: `e_t` as `D_t x W/2` and post-flow
    /// `e_s` as `D_s x W`.
    pub fn posterior_means(
        &self,
        windows: &[Array2<f64>],
    ) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let net = self.net(true)?;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_ROWS) {
            let x = windows_tensor(chunk)?;
            let pass = net.pass(&x, &PosteriorNoise::zeros(chunk.len(), &self.config)?)?;
            for i in 0..chunk.len() {
                out.push((to_matrix(&pass.e_t.get(i)?)?, to_matrix(&pass.e_s.get(i)?)?));
            }
        }
        Ok(out)
    }
}

fn is_curation_param(name: &str) -> bool {
    name.starts_with("tenc.") || name.starts_with("tdec.")
}

fn clip_gradients(
    params: &ParamStore,
    grads: &mut candle_core::backprop::GradStore,
    max_norm: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for (_, v) in params.iter() {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += nn::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, v) in params.iter() {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// Maximise the ELBO over `windows` (band-major, already normalized).
pub fn train(
    init: &HtsVaeModel,
    windows: &[Array2<f64>],
    hyper: &TrainingHyper,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if hyper.window != init.config.window {
        return Err(Error::Config(format!(
            "training window {} differs from model window {}",
            hyper.window, init.config.window
        )));
    }
    let mut model = init.clone();
    model.params = init.params.deep_clone()?;
    if hyper.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            trace: Vec::new(),
        });
    }
    if windows.is_empty() {
        return Err(Error::Validation("no training windows".into()));
    }
    let data = windows_tensor(windows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = make_optimizer(hyper);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut trace: Vec<EpochMetrics> = Vec::with_capacity(hyper.epochs);
    let started = Instant::now();
    for epoch in 0..hyper.epochs {
        let lr = step_lr(hyper.lr, hyper.lr_decay, hyper.decay_every, epoch);
        let beta = if hyper.kl_warmup == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / hyper.kl_warmup as f64).min(1.0)
        };
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let idx = Tensor::from_vec(
                chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                chunk.len(),
                &DEVICE,
            )?;
            let mut x = data.index_select(&idx, 0)?;
            if hyper.mc_samples_train > 1 {
                let (n, w, c) = x.dims3()?;
                x = x
                    .unsqueeze(1)?
                    .broadcast_as((n, hyper.mc_samples_train, w, c))?
                    .reshape((n * hyper.mc_samples_train, w, c))?;
            }
            let noise = PosteriorNoise::sample(&mut rng, x.dim(0)?, &model.config)?;
            let net = model.net(false)?;
            let loss = net
                .elbo_terms(&x, &noise)?
                .weighted(beta)?
                .mean_all()?
                .neg()?;
            let value = nn::scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training objective at epoch {epoch}, batch {bi}, parameter norm {:.4e}",
                    model.params.l2_norm()?
                )));
            }
            let mut grads = loss.backward()?;
            if hyper.freeze_curation {
                for (name, var) in model.params.iter() {
                    if is_curation_param(name) {
                        grads.remove(var.as_tensor());
                    }
                }
            }
            if let Some(max) = hyper.grad_clip {
                clip_gradients(&model.params, &mut grads, max)?;
            }
            opt.step(&model.params, &grads, lr)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        let objective = total / count as f64;
        trace.push(EpochMetrics {
            epoch: epoch + 1,
            objective,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {} objective {objective:.4} lr {lr:.2e}", epoch + 1);
        let first = trace[0].objective;
        if objective - first > 10.0 * first.abs() {
            return Err(Error::Diverged(format!(
                "objective {objective:.4e} at epoch {} vs initial {first:.4e}; trace {:?}",
                epoch + 1,
                trace.iter().map(|m| m.objective).collect::<Vec<_>>()
            )));
        }
    }
    if !model.params.all_finite()? {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(TrainOutcome { model, trace })
}
