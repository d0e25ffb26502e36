use ndarray::{Array1, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Real;
use super::network::{Mode, Network};
use crate::dataset::{class_weights, AugmentationPolicy, PairedSample};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `(w0, w1)`; computed from the training labels when absent.
    pub class_weights: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            class_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn best_val_auc(&self) -> f64 {
        self.epochs.get(self.best_epoch).map_or(0.0, |e| e.val_auc)
    }
}

/// Patience bookkeeping: improvement means strictly greater than the best
/// score so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, seen: 0 }
    }

    /// Records the next epoch's score; returns true when it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        let epoch = self.seen;
        self.seen += 1;
        match self.best {
            Some((_, b)) if !(score > b) => false,
            _ => {
                self.best = Some((epoch, score));
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.best.is_some_and(|(e, _)| self.seen - 1 - e >= self.patience)
    }

    pub fn best_epoch(&self) -> usize {
        self.best.map_or(0, |b| b.0)
    }
}

/// Scores the network after each epoch.
pub trait Validator {
    fn score(&mut self, net: &Network<f32>) -> Result<f64>;
}

/// Sample-level validation AUC.
pub struct AucValidator<'a> {
    pub samples: &'a [PairedSample],
}

impl Validator for AucValidator<'_> {
    fn score(&mut self, net: &Network<f32>) -> Result<f64> {
        let probs = predict_probs(net, self.samples)?;
        let labels: Vec<u8> = self.samples.iter().map(|s| s.label).collect();
        roc_auc(&labels, &probs)
    }
}

/// Replays a fixed sequence of scores; for testing the stopping rule.
pub struct ScriptedValidator {
    pub scores: Vec<f64>,
    pub calls: usize,
}

impl Validator for ScriptedValidator {
    fn score(&mut self, _net: &Network<f32>) -> Result<f64> {
        let s = self.scores.get(self.calls).copied().unwrap_or(0.0);
        self.calls += 1;
        Ok(s)
    }
}

pub(crate) fn stack_batch(samples: &[&PairedSample], shape: (usize, usize, usize)) -> Array4<f32> {
    let mut x = Array4::zeros((samples.len(), shape.0, shape.1, shape.2));
    for (mut dst, s) in x.outer_iter_mut().zip(samples) {
        dst.assign(&s.channels);
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probabilities in (0, 1), computed in eval mode in batches of 64.
pub fn predict_probs(net: &Network<f32>, samples: &[PairedSample]) -> Result<Vec<f64>> {
    let shape = net.descriptor().input_shape;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        if let Some(bad) = refs.iter().find(|s| s.channels.dim() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "sample {:?} vs model input {:?}",
                bad.channels.dim(),
                shape
            )));
        }
        let logits = net.logits(&stack_batch(&refs, shape))?;
        out.extend(logits.iter().map(|&z| sigmoid(z as f64).clamp(1e-15, 1.0 - 1e-15)));
    }
    Ok(out)
}

/// Class-weighted binary cross-entropy on logits, averaged over the batch,
/// with its gradient w.r.t. the logits.
pub fn weighted_bce<T: Real>(logits: &Array1<T>, labels: &[u8], weights: (f64, f64)) -> (f64, Array1<T>) {
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let grad = Array1::from_shape_fn(logits.len(), |i| {
        let z = logits[i].f64();
        let y = labels[i] as f64;
        let w = if labels[i] > 0 { weights.1 } else { weights.0 };
        // log(1 + e^z) - y z, computed stably
        loss += w * (z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z);
        T::of(w * (sigmoid(z) - y) / b)
    });
    (loss / b, grad)
}

pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[ArrayD<T>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-7, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut [ArrayD<T>], grads: &[ArrayD<T>]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let step = self.lr * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t));
        let (b1t, b2t, step, eps) = (T::of(b1), T::of(b2), T::of(step), T::of(self.eps));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            });
        }
    }
}

/// Mini-batch training with restore-best early stopping. The best-epoch
/// parameters (including BN running statistics) are left in `net`.
pub fn fit(
    net: &mut Network<f32>,
    train: &[PairedSample],
    augmentation: &AugmentationPolicy,
    cfg: &TrainConfig,
    validator: &mut dyn Validator,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    let weights = match cfg.class_weights {
        Some(w) => {
            class_weights(&labels)?;
            w
        }
        None => class_weights(&labels)?,
    };
    let shape = net.descriptor().input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let mut adam = Adam::new(net.params(), cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainingHistory::default();
    let mut best = (net.params().to_vec(), net.buffers().to_vec());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            // BN needs more than one value per channel; drop a trailing singleton.
            if batch_idx.len() < 2 && train.len() > 1 {
                continue;
            }
            let augmented: Vec<PairedSample> = batch_idx
                .iter()
                .map(|&i| crate::dataset::augment(&train[i], augmentation, &mut rng))
                .collect();
            let refs: Vec<&PairedSample> = augmented.iter().collect();
            let x = stack_batch(&refs, shape);
            let y: Vec<u8> = refs.iter().map(|s| s.label).collect();
            let cache = net.forward(&x, Mode::Train { dropout_seed: rng.gen() })?;
            let (loss, dlogits) = weighted_bce(&cache.logits, &y, weights);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = net.backward(&cache, dlogits.view());
            adam.step(net.params_mut(), &grads);
            net.update_running_stats(&cache);
            loss_sum += loss * y.len() as f64;
            count += y.len();
        }
        if net.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let val_auc = validator.score(net)?;
        history.epochs.push(EpochRecord {
            train_loss: loss_sum / count.max(1) as f64,
            val_auc,
        });
        tracing::debug!(epoch, val_auc, train_loss = loss_sum / count.max(1) as f64, "epoch");
        if stopper.observe(val_auc) {
            best = (net.params().to_vec(), net.buffers().to_vec());
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    net.params_mut().clone_from_slice(&best.0);
    net.buffers_mut().clone_from_slice(&best.1);
    Ok(history)
}

/// Mean loss gradient over a batch, exposed for scaling checks.
pub fn batch_gradient(net: &Network<f64>, x: &Array4<f64>, labels: &[u8], weights: (f64, f64), dropout_seed: u64) -> Result<Vec<ArrayD<f64>>> {
    let cache = net.forward(x, Mode::Train { dropout_seed })?;
    let (_, d) = weighted_bce(&cache.logits, labels, weights);
    Ok(net.backward(&cache, d.view()))
}

pub(crate) fn labels_of(samples: &[PairedSample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Pairing;
    use crate::detector::descriptor::ArchitectureDescriptor;
    use crate::roi::Region;
    use ndarray::Array3;

    fn toy(n: usize, seed: u64) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let shift = if label == 1 { -0.8 } else { 0.0 };
                PairedSample {
                    channels: Array3::from_shape_fn((2, 8, 8), |(_, r, c)| {
                        let blob = if (2..5).contains(&r) && (3..6).contains(&c) { shift } else { 0.0 };
                        blob + rng.gen_range(-0.3..0.3)
                    }),
                    pairing: Pairing::T2Adc,
                    label,
                    patient_id: format!("p{}", i / 4),
                    slice_index: i,
                    region: Region::Pz,
                }
            })
            .collect()
    }

    #[test]
    fn stopping_rule_counts_patience_after_best() {
        let mut s = EarlyStopping::new(3);
        let scores = [0.5, 0.6, 0.6, 0.55, 0.59];
        let mut stopped_at = None;
        for (i, &v) in scores.iter().enumerate() {
            s.observe(v);
            if s.should_stop() {
                stopped_at = Some(i);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn scripted_plateau_stops_ten_after_best_and_restores() {
        let data = toy(16, 1);
        let desc = ArchitectureDescriptor::minimal(8, 8);
        let mut net = Network::<f32>::new(&desc, 3).unwrap();
        let mut scores: Vec<f64> = (0..6).map(|i| 0.5 + 0.05 * i as f64).collect();
        scores.extend(std::iter::repeat(0.6).take(30));
        let mut v = ScriptedValidator { scores, calls: 0 };
        // record the parameters after each epoch through a wrapping validator
        struct Recording<'a> {
            inner: &'a mut ScriptedValidator,
            snapshots: Vec<Vec<ArrayD<f32>>>,
        }
        impl Validator for Recording<'_> {
            fn score(&mut self, net: &Network<f32>) -> Result<f64> {
                self.snapshots.push(net.params().to_vec());
                self.inner.score(net)
            }
        }
        let mut rec = Recording { inner: &mut v, snapshots: Vec::new() };
        let cfg = TrainConfig { batch_size: 8, seed: 4, ..TrainConfig::default() };
        let h = fit(&mut net, &data, &AugmentationPolicy::OFF, &cfg, &mut rec).unwrap();
        assert_eq!(h.best_epoch, 5);
        assert!(h.stopped_early);
        assert_eq!(h.epochs.len(), 16);
        assert_eq!(net.params(), rec.snapshots[5].as_slice());
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let data = toy(64, 2);
        let (train, val) = data.split_at(48);
        let desc = ArchitectureDescriptor::minimal(8, 8);
        let mut net = Network::<f32>::new(&desc, 0).unwrap();
        let cfg = TrainConfig { max_epochs: 30, batch_size: 8, ..TrainConfig::default() };
        let h = fit(&mut net, train, &AugmentationPolicy::OFF, &cfg, &mut AucValidator { samples: val }).unwrap();
        assert!(h.best_val_auc() > 0.9, "{h:?}");
        let again = AucValidator { samples: val }.score(&net).unwrap();
        assert!((again - h.best_val_auc()).abs() < 1e-6);
    }

    #[test]
    fn doubled_class_weights_double_the_gradient() {
        let desc = ArchitectureDescriptor::minimal(8, 8);
        let net = Network::<f64>::new(&desc, 9).unwrap();
        let data = toy(6, 3);
        let refs: Vec<&PairedSample> = data.iter().collect();
        let x = stack_batch(&refs, (2, 8, 8)).mapv(f64::from);
        let y: Vec<u8> = data.iter().map(|s| s.label).collect();
        let g1 = batch_gradient(&net, &x, &y, (1.0, 3.0), 1).unwrap();
        let g2 = batch_gradient(&net, &x, &y, (2.0, 6.0), 1).unwrap();
        let flat = |g: &[ArrayD<f64>]| g.iter().flat_map(|a| a.iter().copied()).collect::<Vec<_>>();
        let (a, b) = (flat(&g1), flat(&g2));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        assert!((cos - 1.0).abs() < 1e-6);
        assert!((nb / na - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = Array1::from(vec![2.0f64, -1.0]);
        let (loss, g) = weighted_bce(&z, &[1, 0], (0.5, 2.0));
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = (2.0 * -(s(2.0)).ln() + 0.5 * -(1.0 - s(-1.0)).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
        assert!((g[0] - 2.0 * (s(2.0) - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_training_rejected() {
        let mut data = toy(8, 1);
        for s in &mut data {
            s.label = 0;
        }
        let mut net = Network::<f32>::new(&ArchitectureDescriptor::minimal(8, 8), 0).unwrap();
        let r = fit(&mut net, &data, &AugmentationPolicy::OFF, &TrainConfig::default(), &mut ScriptedValidator { scores: vec![], calls: 0 });
        assert!(matches!(r, Err(Error::SingleClass(_))));
    }
}
