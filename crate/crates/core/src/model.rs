//! Linear prediction heads trained by minibatch SGD.
//!
//! Classification uses mean binary cross-entropy on `sigmoid(w·x + b)`.
//! Regression uses mean squared error between the raw logit and the label
//! rescaled from `0..=100` to `0..=1`, with an optional L1 penalty applied
//! as a proximal soft-threshold after every step.

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, sigmoid, Scalar};
use crate::seed;

/// Regression labels live on this scale.
pub const LABEL_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct LinearModel<T> {
    pub task: Task,
    pub bias: T,
    pub weights: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub x: Vec<T>,
    /// 0/1 for classification, `0..=100` for regression.
    pub y: T,
}

impl<T> Sample<T> {
    pub fn new(x: Vec<T>, y: T) -> Self {
        Sample { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l1_lambda: f64,
    pub epochs: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 10,
            l1_lambda: 0.0,
            epochs: 1,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l1_lambda >= 0.0) {
            return Err(Error::Config("l1_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> LinearModel<T> {
    pub fn zeros(dim: usize, task: Task) -> Self {
        LinearModel {
            task,
            bias: T::zero(),
            weights: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Number of flattened parameters: weights then bias.
    pub fn num_params(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn write_params(&self, out: &mut Vec<T>) {
        out.extend_from_slice(&self.weights);
        out.push(self.bias);
    }

    pub fn to_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    /// Reads `num_params()` values from the front of `params`.
    pub fn read_params(&mut self, params: &[T]) {
        let d = self.weights.len();
        self.weights.copy_from_slice(&params[..d]);
        self.bias = params[d];
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict_logit(&self, x: &[T]) -> Result<T> {
        self.check_dim(x)?;
        Ok(self.logit(x))
    }

    pub(crate) fn logit(&self, x: &[T]) -> T {
        dot(&self.weights, x) + self.bias
    }

    /// Probability for classification, normalized logit for regression.
    pub fn predict_score(&self, x: &[T]) -> Result<T> {
        self.predict_logit(x).map(|z| self.score_from_logit(z))
    }

    pub fn score_from_logit(&self, z: T) -> T {
        match self.task {
            Task::Classification => sigmoid(z),
            Task::Regression => z,
        }
    }

    /// Score with no input, i.e. at the zero vector.
    pub fn bias_score(&self) -> T {
        self.score_from_logit(self.bias)
    }

    /// Score from the mean of per-chunk logits.
    pub fn predict_score_chunks(&self, chunks: &[Vec<T>]) -> Result<T> {
        if chunks.is_empty() {
            return Ok(self.bias_score());
        }
        let mut sum = T::zero();
        for c in chunks {
            sum = sum + self.predict_logit(c)?;
        }
        Ok(self.score_from_logit(sum / T::of_usize(chunks.len())))
    }

    /// Maps a raw label to the training target.
    pub fn target(&self, y: T) -> T {
        match self.task {
            Task::Classification => y,
            Task::Regression => y / T::of(LABEL_SCALE),
        }
    }

    /// Mean loss over a batch, without the L1 term.
    pub fn loss(&self, batch: &[Sample<T>]) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = T::zero();
        for s in batch {
            self.check_dim(&s.x)?;
            let z = self.logit(&s.x);
            let t = self.target(s.y);
            total = total
                + match self.task {
                    Task::Classification => bce_with_logit(z, t),
                    Task::Regression => (z - t) * (z - t),
                };
        }
        Ok(total / T::of_usize(batch.len()))
    }

    /// Analytic mean gradient of [`LinearModel::loss`]: `(weights, bias)`.
    pub fn grad(&self, batch: &[Sample<T>]) -> Result<(Vec<T>, T)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for s in batch {
            self.check_dim(&s.x)?;
        }
        let idx: Vec<usize> = (0..batch.len()).collect();
        Ok(self.grad_indexed(batch, &idx))
    }

    fn grad_indexed(&self, samples: &[Sample<T>], idx: &[usize]) -> (Vec<T>, T) {
        let mut gw = vec![T::zero(); self.weights.len()];
        let mut gb = T::zero();
        for &i in idx {
            let s = &samples[i];
            let z = self.logit(&s.x);
            let t = self.target(s.y);
            let r = match self.task {
                Task::Classification => sigmoid(z) - t,
                Task::Regression => (z - t) * T::of(2.0),
            };
            for (g, &x) in gw.iter_mut().zip(&s.x) {
                *g = *g + r * x;
            }
            gb = gb + r;
        }
        let n = T::of_usize(idx.len());
        gw.iter_mut().for_each(|g| *g = *g / n);
        (gw, gb / n)
    }

    /// Soft-threshold every weight by `threshold`; the bias is exempt.
    pub fn prox_l1(&mut self, threshold: T) {
        for w in &mut self.weights {
            let shrunk = w.abs() - threshold;
            *w = if shrunk > T::zero() {
                w.signum() * shrunk
            } else {
                T::zero()
            };
        }
    }
}

fn bce_with_logit<T: Scalar>(z: T, y: T) -> T {
    // log(1 + e^z) - y z, stable for large |z|
    let softplus = if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

/// One pass over `samples` in an order shuffled by the seed for `epoch`.
/// The trailing partial batch is used.
pub fn sgd_epoch<T: Scalar>(
    model: &LinearModel<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    epoch: usize,
) -> LinearModel<T> {
    let mut next = model.clone();
    if samples.is_empty() {
        return next;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(&[cfg.rng_seed, epoch as u64])));
    let lr = T::of(cfg.learning_rate);
    let threshold = lr * T::of(cfg.l1_lambda);
    for batch in order.chunks(cfg.batch_size.max(1)) {
        let (gw, gb) = next.grad_indexed(samples, batch);
        for (w, g) in next.weights.iter_mut().zip(&gw) {
            *w = *w - lr * *g;
        }
        next.bias = next.bias - lr * gb;
        if next.task == Task::Regression && cfg.l1_lambda > 0.0 {
            next.prox_l1(threshold);
        }
    }
    next
}

/// Runs `cfg.epochs` epochs, numbered from zero.
pub fn train<T: Scalar>(
    model: &LinearModel<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
) -> LinearModel<T> {
    (0..cfg.epochs).fold(model.clone(), |m, e| sgd_epoch(&m, samples, cfg, e))
}

/// Clamps a regression score back onto the reported `0..=100` scale.
pub fn report_regression(score: f64) -> f64 {
    (score * LABEL_SCALE).clamp(0.0, LABEL_SCALE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn model(w: Vec<f64>, b: f64, task: Task) -> LinearModel<f64> {
        LinearModel { task, bias: b, weights: w }
    }

    #[test]
    fn logit_examples() {
        let m = model(vec![0.0, 0.0], 0.3, Task::Classification);
        assert_eq!(m.predict_logit(&[5.0, -1.0]).unwrap(), 0.3);
        let m = model(vec![1.0, 2.0], 0.0, Task::Regression);
        assert_eq!(m.predict_logit(&[3.0, 4.0]).unwrap(), 11.0);
        let m = model(vec![1.0, 2.0], -0.7, Task::Regression);
        assert_eq!(m.predict_logit(&[0.0, 0.0]).unwrap(), -0.7);
        assert!(matches!(
            m.predict_logit(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn score_examples() {
        let c = model(vec![0.0], 0.0, Task::Classification);
        assert_eq!(c.predict_score(&[1.0]).unwrap(), 0.5);
        let r = model(vec![0.0], 0.0, Task::Regression);
        assert_eq!(r.predict_score(&[1.0]).unwrap(), 0.0);
        assert_eq!(report_regression(-0.05), 0.0);
        assert_eq!(report_regression(1.7), 100.0);
        assert_eq!(report_regression(0.42), 42.0);
    }

    #[test]
    fn grad_examples() {
        let c = model(vec![0.0, 0.0], 0.0, Task::Classification);
        let (gw, gb) = c.grad(&[Sample::new(vec![1.0, 2.0], 1.0)]).unwrap();
        assert_eq!(gb, -0.5);
        assert_eq!(gw, vec![-0.5, -1.0]);

        let r = model(vec![0.5, 0.25], 0.1, Task::Regression);
        let x = vec![0.2, 0.4];
        let y = r.predict_logit(&x).unwrap() * LABEL_SCALE;
        let (gw, gb) = r.grad(&[Sample::new(x, y)]).unwrap();
        assert!(gw.iter().all(|g| g.abs() < 1e-15) && gb.abs() < 1e-15);

        assert!(matches!(c.grad(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn huge_lambda_zeroes_weights() {
        let mut rng = seed::rng(3);
        let samples: Vec<Sample<f64>> = (0..25)
            .map(|_| Sample::new((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0.0..100.0)))
            .collect();
        let cfg = TrainConfig { l1_lambda: 1e6, ..TrainConfig::default() };
        let start = model(vec![0.3; 8], 0.0, Task::Regression);
        let out = sgd_epoch(&start, &samples, &cfg, 0);
        assert!(out.weights.iter().all(|&w| w == 0.0));
        assert_ne!(out.bias, 0.0);
    }

    #[test]
    fn l1_sign_preserving_and_shrinking() {
        let mut m = model(vec![0.5, -0.5, 0.01, -0.01, 0.0], 1.0, Task::Regression);
        m.prox_l1(0.1);
        assert_eq!(m.weights, vec![0.4, -0.4, 0.0, 0.0, 0.0]);
        assert_eq!(m.bias, 1.0);
    }

    #[test]
    fn seeded_epochs_are_reproducible() {
        let samples: Vec<Sample<f64>> = (0..23)
            .map(|i| Sample::new(vec![(i as f64).sin(), (i as f64).cos()], (i % 2) as f64))
            .collect();
        let cfg = TrainConfig { epochs: 5, rng_seed: 11, ..TrainConfig::default() };
        let m0 = LinearModel::zeros(2, Task::Classification);
        assert_eq!(train(&m0, &samples, &cfg), train(&m0, &samples, &cfg));
        let other = TrainConfig { rng_seed: 12, ..cfg.clone() };
        assert_ne!(train(&m0, &samples, &cfg), train(&m0, &samples, &other));
        let none = TrainConfig { epochs: 0, ..cfg };
        assert_eq!(train(&m0, &samples, &none), m0);
    }

    #[test]
    fn works_in_f32() {
        let samples = vec![Sample::new(vec![1.0f32, 0.0], 1.0), Sample::new(vec![0.0f32, 1.0], 0.0)];
        let cfg = TrainConfig { epochs: 50, learning_rate: 0.5, ..TrainConfig::default() };
        let m = train(&LinearModel::<f32>::zeros(2, Task::Classification), &samples, &cfg);
        assert!(m.predict_score(&[1.0, 0.0]).unwrap() > m.predict_score(&[0.0, 1.0]).unwrap());
    }

    #[test]
    fn checkpoint_json_shape() {
        let m = model(vec![0.1, -2.5], 0.3, Task::Regression);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"task":"regression","bias":0.3,"weights":[0.1,-2.5]}"#);
        let back: LinearModel<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn chunk_logits_average() {
        let m = model(vec![1.0, -1.0], 0.5, Task::Classification);
        let chunks = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        let expected = sigmoid((1.5 + -2.5) / 2.0);
        assert_eq!(m.predict_score_chunks(&chunks).unwrap(), expected);
        assert_eq!(m.predict_score_chunks(&[]).unwrap(), sigmoid(0.5));
    }
}
