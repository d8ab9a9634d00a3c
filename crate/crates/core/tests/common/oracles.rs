//! Numerical oracles for the latent-variable model, shared by the unit tests
//! and the acceptance run.
#![allow(dead_code)]

use candle_core::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tasgen_core::data::MinMaxNormalizer;
use tasgen_core::embedding::{windows_tensor, ModelConfig};
use tasgen_core::nn::{self, ParamStore, DEVICE};
use tasgen_core::vae::{HtsVaeModel, PosteriorNoise};

pub fn small_config(
    bands: usize,
    window: usize,
    ds: usize,
    flow_layers: usize,
    hidden: usize,
) -> ModelConfig {
    ModelConfig {
        temporal_dim: 1,
        spectral_dim: ds,
        conv_hidden: hidden,
        gru_hidden: hidden,
        posterior_hidden: hidden,
        prior_hidden: hidden,
        head_hidden: hidden,
        flow_layers,
        flow_hidden: hidden,
        ..ModelConfig::new(bands, window)
    }
}

/// Add N(0, scale^2) noise to every parameter so zero-initialised layers
/// become non-trivial.
pub fn jitter(store: &ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in store.iter() {
        let noise = nn::standard_normal(&mut rng, v.dims()).unwrap();
        v.set(&(v.as_tensor() + (noise * scale).unwrap()).unwrap())
            .unwrap();
    }
}

pub fn random_window(rng: &mut ChaCha8Rng, bands: usize, window: usize) -> Array2<f64> {
    Array2::from_shape_fn((bands, window), |_| rng.random_range(0.0..1.0))
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log ∫ exp(f)` by the trapezoid rule on a uniform grid.
fn log_trapezoid(logf: &[f64], h: f64) -> f64 {
    let n = logf.len();
    let mut w: Vec<f64> = logf.to_vec();
    w[0] -= std::f64::consts::LN_2;
    w[n - 1] -= std::f64::consts::LN_2;
    logsumexp(&w) + h.ln()
}

fn grid(lo: f64, hi: f64, n: usize) -> (Vec<f64>, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    ((0..n).map(|i| lo + h * i as f64).collect(), h)
}

/// Brute-force log p(x) for the toy model: latents e_t (1), e_s_1, e_s_2.
/// The inner e_s_2 integral reuses one grid of output-head evaluations and
/// the closed-form Gaussian prior weights.
pub fn toy_log_evidence(model: &HtsVaeModel, x: &Array2<f64>, points: usize, es_bound: f64) -> f64 {
    let net = model.net(true).unwrap();
    let (et_grid, het) = grid(-6.0, 6.0, points);
    let (es_grid, hes) = grid(-es_bound, es_bound, points);
    let n = points;
    let xt = windows_tensor([x]).unwrap(); // (1, 2, 2)
    let es_col = Tensor::from_slice(&es_grid, (n, 1, 1), &DEVICE).unwrap();
    let es_pair = Tensor::cat(&[&es_col, &es_col], 1).unwrap(); // (n, 2, 1)
    let mut outer = Vec::with_capacity(n);
    for &et in &et_grid {
        let e_t = Tensor::from_slice(&[et], (1, 1, 1), &DEVICE).unwrap();
        let z = net.temporal_decoder.forward(&e_t).unwrap(); // (1, 2, C)
        let zb = z.broadcast_as((n, 2, 2)).unwrap().contiguous().unwrap();
        // output head: log p(x_t | e_s_t = grid, z_t) for t = 0, 1
        let out = net.output_head(&es_pair, &zb).unwrap();
        let xb = xt.broadcast_as((n, 2, 2)).unwrap();
        let lp = out
            .log_density(&xb)
            .unwrap()
            .sum(2)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        // prior: step 0 from zeros, step 1 conditioned on e_s_0 = grid
        let prior = net.spectral_prior(&es_pair, &zb).unwrap();
        let pm = prior.mean.squeeze(2).unwrap().to_vec2::<f64>().unwrap();
        let pv = prior.logvar.squeeze(2).unwrap().to_vec2::<f64>().unwrap();
        let (m0, v0) = (pm[0][0], pv[0][0]);
        let mut mid = Vec::with_capacity(n);
        for (i, &e0) in es_grid.iter().enumerate() {
            let (m1, v1) = (pm[i][1], pv[i][1]);
            let inner: Vec<f64> = es_grid
                .iter()
                .enumerate()
                .map(|(j, &e1)| nn::gaussian_log_density_scalar(e1, m1, v1) + lp[j][1])
                .collect();
            mid.push(
                nn::gaussian_log_density_scalar(e0, m0, v0) + lp[i][0] + log_trapezoid(&inner, hes),
            );
        }
        outer.push(nn::gaussian_log_density_scalar(et, 0.0, 0.0) + log_trapezoid(&mid, hes));
    }
    log_trapezoid(&outer, het)
}

/// Per input: (ELBO with 10,000 draws, evidence on the fine grid, coarse
/// minus fine evidence).
pub fn elbo_vs_evidence(cases: usize) -> Vec<(f64, f64, f64)> {
    let cfg = small_config(2, 2, 1, 0, 4);
    let model = HtsVaeModel::new(cfg, MinMaxNormalizer::identity(2), 3).unwrap();
    jitter(&model.params, 0.3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..cases as u64)
        .map(|case| {
            let x = random_window(&mut rng, 2, 2);
            let coarse = toy_log_evidence(&model, &x, 201, 10.0);
            let fine = toy_log_evidence(&model, &x, 401, 12.0);
            let (elbo, _) = model.elbo(&x, 10_000, 100 + case).unwrap();
            (elbo, fine, coarse - fine)
        })
        .collect()
}

pub struct FlowCheck {
    pub max_round_trip: f64,
    pub max_log_det_gap: f64,
    pub max_inverse_log_det_gap: f64,
}

/// Round trip and log-determinant against a central-difference Jacobian.
pub fn flow_check(cases: usize) -> FlowCheck {
    let cfg = small_config(8, 4, 4, 4, 8);
    let model = HtsVaeModel::new(cfg, MinMaxNormalizer::identity(8), 0).unwrap();
    jitter(&model.params, 0.5, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = FlowCheck {
        max_round_trip: 0.0,
        max_log_det_gap: 0.0,
        max_inverse_log_det_gap: 0.0,
    };
    for _ in 0..cases {
        let e: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (y, ld) = model.flow_forward(&e).unwrap();
        let (back, inv_ld) = model.flow_inverse(&y).unwrap();
        let err = e
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.max_round_trip = out.max_round_trip.max(err);
        out.max_inverse_log_det_gap = out.max_inverse_log_det_gap.max((ld + inv_ld).abs());
        let h = 1e-5;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(4, 4);
        for j in 0..4 {
            let mut plus = e.clone();
            let mut minus = e.clone();
            plus[j] += h;
            minus[j] -= h;
            let (yp, _) = model.flow_forward(&plus).unwrap();
            let (ym, _) = model.flow_forward(&minus).unwrap();
            for i in 0..4 {
                jac[(i, j)] = (yp[i] - ym[i]) / (2.0 * h);
            }
        }
        let numerical = jac.determinant().abs().ln();
        out.max_log_det_gap = out.max_log_det_gap.max((numerical - ld).abs());
    }
    out
}

/// `(parameters within 1e-3 relative error, parameters checked, model size)`.
pub fn gradient_check() -> (usize, usize, usize) {
    let cfg = small_config(2, 4, 1, 1, 2);
    let model = HtsVaeModel::new(cfg.clone(), MinMaxNormalizer::identity(2), 5).unwrap();
    let numel = model.params.numel();
    jitter(&model.params, 0.3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = windows_tensor([
        &random_window(&mut rng, 2, 4),
        &random_window(&mut rng, 2, 4),
    ])
    .unwrap();
    let noise = PosteriorNoise::sample(&mut rng, 2, &cfg).unwrap();
    let objective = || -> f64 {
        let net = model.net(true).unwrap();
        nn::scalar(
            &net.elbo_terms(&x, &noise)
                .unwrap()
                .elbo()
                .unwrap()
                .sum_all()
                .unwrap(),
        )
        .unwrap()
    };
    let net = model.net(false).unwrap();
    let loss = net
        .elbo_terms(&x, &noise)
        .unwrap()
        .elbo()
        .unwrap()
        .sum_all()
        .unwrap();
    let grads = loss.backward().unwrap();
    let h = 1e-5;
    let (mut total, mut good) = (0usize, 0usize);
    for (name, var) in model.params.iter() {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        for k in 0..base.len() {
            let mut shifted = base.clone();
            shifted[k] = base[k] + h;
            var.set(&Tensor::from_slice(&shifted, var.dims(), &DEVICE).unwrap())
                .unwrap();
            let fp = objective();
            shifted[k] = base[k] - h;
            var.set(&Tensor::from_slice(&shifted, var.dims(), &DEVICE).unwrap())
                .unwrap();
            let fm = objective();
            var.set(&Tensor::from_slice(&base, var.dims(), &DEVICE).unwrap())
                .unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let scale = analytic[k].abs().max(numeric.abs());
            let ok = scale < 1e-7 || (analytic[k] - numeric).abs() / scale < 1e-3;
            if !ok {
                eprintln!("{name}[{k}]: analytic {} numeric {numeric}", analytic[k]);
            }
            total += 1;
            good += ok as usize;
        }
    }
    (good, total, numel)
}

/// Largest relative gap between the explicit and cancelled ELBO, and
/// whether the two delta terms matched exactly in every window.
pub fn delta_cancellation(windows: u64) -> (f64, bool) {
    let cfg = small_config(6, 10, 3, 4, 8);
    let model = HtsVaeModel::new(cfg, MinMaxNormalizer::identity(6), 1).unwrap();
    jitter(&model.params, 0.2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    let mut equal = true;
    for i in 0..windows {
        let x = random_window(&mut rng, 6, 10);
        let (cancelled, _) = model.elbo(&x, 8, i).unwrap();
        let explicit = model.elbo_explicit(&x, 8, i, -12.0).unwrap();
        equal &= explicit.log_q_d == explicit.log_p_z;
        worst = worst.max((explicit.total() - cancelled).abs() / cancelled.abs().max(1e-300));
    }
    (worst, equal)
}
