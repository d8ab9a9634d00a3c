use candle_core::Tensor;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, step_lr, Linear, Optimizer, ParamStore, ParamTensor, Sgd, DEVICE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierHyper {
    pub hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        ClassifierHyper {
            hidden: 64,
            batch_size: 32,
            lr: 0.002,
            lr_decay: 0.1,
            decay_every: 10,
            epochs: 50,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
        }
    }
}

/// One-hidden-layer network over standardized features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LightweightClassifier {
    pub classes: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub params: std::collections::BTreeMap<String, ParamTensor>,
}

struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    fn bind(store: &ParamStore, detach: bool) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::bind(store, "cls.hidden", detach)?,
            out: Linear::bind(store, "cls.out", detach)?,
        })
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.tanh()?)
    }
}

fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.broadcast_sub(&logits.log_sum_exp(1)?.unsqueeze(1)?)?)
}

/// Merge identical rows into one row with a multiplicity.
fn collapse(features: &Array2<f64>, labels: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let mut index: std::collections::HashMap<(Vec<u64>, usize), usize> =
        std::collections::HashMap::new();
    let (mut rows, mut ys, mut counts) = (Vec::new(), Vec::new(), Vec::<f64>::new());
    for (row, &y) in features.rows().into_iter().zip(labels) {
        let key = (row.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y);
        match index.get(&key) {
            Some(&i) => counts[i] += 1.0,
            None => {
                index.insert(key, rows.len());
                rows.push(row.to_vec());
                ys.push(y);
                counts.push(1.0);
            }
        }
    }
    (rows, ys, counts)
}

/// Train on `features` (`N x F`) with class indices into `classes`.
///
/// Duplicate rows are merged into multiplicity weights and classes are
/// weighted by inverse frequency, so repeating the whole training set does
/// not change the result.
pub fn train_classifier(
    features: &Array2<f64>,
    labels: &[usize],
    classes: &[String],
    hyper: &ClassifierHyper,
) -> Result<LightweightClassifier> {
    if features.nrows() == 0 {
        return Err(Error::Validation("empty feature list".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes.len()) {
        return Err(Error::Validation(format!(
            "label index {bad} outside vocabulary"
        )));
    }
    let k = classes.len();
    let mut freq = vec![0.0; k];
    for &y in labels {
        freq[y] += 1.0;
    }
    if freq.iter().filter(|&&f| f > 0.0).count() < 2 {
        return Err(Error::Validation(
            "cannot train classifier on one class".into(),
        ));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier features".into()));
    }
    let (rows, ys, counts) = collapse(features, labels);
    let dim = features.ncols();
    let total: f64 = counts.iter().sum();
    let mut mean = vec![0.0; dim];
    for (r, &m) in rows.iter().zip(&counts) {
        for (acc, v) in mean.iter_mut().zip(r) {
            *acc += m * v / total;
        }
    }
    let mut scale = vec![0.0; dim];
    for (r, &m) in rows.iter().zip(&counts) {
        for ((acc, v), mu) in scale.iter_mut().zip(r).zip(&mean) {
            *acc += m * (v - mu).powi(2) / total;
        }
    }
    let scale: Vec<f64> = scale
        .iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();

    let class_weight: Vec<f64> = freq
        .iter()
        .map(|&f| if f > 0.0 { total / (k as f64 * f) } else { 0.0 })
        .collect();
    let row_weight: Vec<f64> = counts
        .iter()
        .zip(&ys)
        .map(|(m, &y)| m * class_weight[y])
        .collect();
    let norm = row_weight.iter().sum::<f64>() / row_weight.len() as f64;
    let row_weight: Vec<f64> = row_weight.iter().map(|w| w / norm).collect();

    let n = rows.len();
    let std_rows: Vec<f64> = rows
        .iter()
        .flat_map(|r| {
            r.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((v, m), s)| (v - m) / s)
        })
        .collect();
    let x_all = Tensor::from_vec(std_rows, (n, dim), &DEVICE)?;
    let onehot: Vec<f64> = ys
        .iter()
        .flat_map(|&y| (0..k).map(move |c| (c == y) as u8 as f64))
        .collect();
    let y_all = Tensor::from_vec(onehot, (n, k), &DEVICE)?;
    let w_all = Tensor::from_vec(row_weight, n, &DEVICE)?;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut store = ParamStore::new();
    Linear::init(&mut store, "cls.hidden", dim, hyper.hidden, false, &mut rng)?;
    Linear::init(&mut store, "cls.out", hyper.hidden, k, false, &mut rng)?;
    let mut opt = Sgd::new(hyper.momentum, hyper.weight_decay);
    let mut order: Vec<u32> = (0..n as u32).collect();
    for epoch in 0..hyper.epochs {
        let lr = step_lr(hyper.lr, hyper.lr_decay, hyper.decay_every, epoch);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let idx = Tensor::from_slice(chunk, chunk.len(), &DEVICE)?;
            let (x, y, w) = (
                x_all.index_select(&idx, 0)?,
                y_all.index_select(&idx, 0)?,
                w_all.index_select(&idx, 0)?,
            );
            let mlp = Mlp::bind(&store, false)?;
            let nll = (log_softmax(&mlp.logits(&x)?)? * y)?.sum(1)?.neg()?;
            let loss = ((nll * &w)?.sum_all()? / w.sum_all()?.to_scalar::<f64>()?)?;
            if !nn::scalar(&loss)?.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classifier loss at epoch {epoch}"
                )));
            }
            opt.step(&store, &loss.backward()?, lr)?;
        }
    }
    Ok(LightweightClassifier {
        classes: classes.to_vec(),
        feature_mean: mean,
        feature_scale: scale,
        params: store.snapshot()?,
    })
}

impl LightweightClassifier {
    fn mlp(&self) -> Result<Mlp> {
        Mlp::bind(&ParamStore::from_snapshot(&self.params)?, true)
    }

    fn standardize(&self, features: &Array2<f64>) -> Result<Tensor> {
        if features.ncols() != self.feature_mean.len() {
            return Err(Error::Shape(format!(
                "classifier expects {} features, got {}",
                self.feature_mean.len(),
                features.ncols()
            )));
        }
        let data: Vec<f64> = features
            .rows()
            .into_iter()
            .flat_map(|r| {
                r.iter()
                    .zip(&self.feature_mean)
                    .zip(&self.feature_scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Tensor::from_vec(data, features.dim(), &DEVICE)?)
    }

    /// Raw logits, `N x K`.
    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        let l = self.mlp()?.logits(&self.standardize(features)?)?;
        let rows = l.to_vec2::<f64>()?;
        Ok(Array2::from_shape_fn(
            (rows.len(), self.classes.len()),
            |(i, j)| rows[i][j],
        ))
    }

    pub fn probabilities(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        let mut p = self.logits(features)?;
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Ok(p)
    }

    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(self
            .logits(features)?
            .rows()
            .into_iter()
            .map(|r| argmax(r.to_owned()))
            .collect())
    }

    /// Short content hash identifying these parameters.
    pub fn version(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Ok(format!("mlp{}-{h:016x}", self.feature_scale.len()))
    }
}

/// First index of the maximum.
pub fn argmax(v: Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
