//! Label classifier f and the leakage probe f′.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use super::{container, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub hidden: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            learning_rate: 0.001,
            batch_size: 64,
            momentum: 0.9,
            epochs: 500,
            hidden: vec![128, 64, 32],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid("momentum must lie in [0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_worst_group: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelClassifier {
    pub net: Mlp,
    pub config: ClassifierConfig,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned snapshot; `None` for the initialization.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl ValidationSet {
    /// Minimum per-group accuracy of `net`.
    pub fn worst_group(&self, net: &Mlp) -> f64 {
        let preds: Vec<usize> = self.inputs.par_iter().map(|x| net.predict(x)).collect();
        let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for ((p, y), g) in preds.iter().zip(&self.labels).zip(&self.groups) {
            let e = counts.entry(*g).or_default();
            e.1 += 1;
            if p == y {
                e.0 += 1;
            }
        }
        counts
            .values()
            .map(|(c, t)| *c as f64 / *t as f64)
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_inputs(inputs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<usize> {
    if inputs.len() != labels.len() {
        return Err(Error::Dimension(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    let dim = inputs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Precondition("no training rows".into()))?;
    if dim == 0 {
        return Err(Error::Dimension("inputs have zero width".into()));
    }
    for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
        if x.len() != dim {
            return Err(Error::Dimension(format!("row {i}: width {} but expected {dim}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("row {i}: non-finite input")));
        }
        if y >= num_classes {
            return Err(Error::Invalid(format!("row {i}: label {y} out of range")));
        }
    }
    Ok(dim)
}

/// Momentum descent on softmax cross-entropy. After each epoch `evaluate`
/// scores the network; the earliest epoch with the highest score is returned.
/// Without scores the final epoch is returned.
pub fn train_classifier_with<F>(
    inputs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    config: &ClassifierConfig,
    seed: u64,
    mut evaluate: F,
) -> Result<LabelClassifier>
where
    F: FnMut(usize, &Mlp) -> Option<f64>,
{
    config.validate()?;
    if num_classes < 2 {
        return Err(Error::Invalid("a classifier needs at least two classes".into()));
    }
    let dim = check_inputs(inputs, labels, num_classes)?;
    let mut sizes = vec![dim];
    sizes.extend(&config.hidden);
    sizes.push(num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(&sizes, &mut rng)?;
    let mut velocity = vec![0.0; net.flat_params().len()];
    let mut params = net.flat_params();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Mlp)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = net.loss_and_grad(&xs, &ys);
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            total += loss;
            batches += 1;
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad.flat_params()) {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
            net.set_flat_params(&params)?;
            if !net.all_finite() {
                return Err(Error::NonFinite { epoch, batch: b });
            }
        }
        let score = evaluate(epoch, &net);
        history.push(EpochRecord {
            epoch,
            loss: total / batches.max(1) as f64,
            val_worst_group: score,
        });
        if let Some(s) = score {
            if best.as_ref().is_none_or(|(bs, _, _)| s > *bs) {
                best = Some((s, epoch, net.clone()));
            }
        }
    }
    let (net, best_epoch) = match best {
        Some((_, e, snapshot)) => (snapshot, Some(e)),
        None if config.epochs > 0 => (net, Some(config.epochs)),
        None => (net, None),
    };
    Ok(LabelClassifier {
        net,
        config: config.clone(),
        seed,
        history,
        best_epoch,
    })
}

/// Train f; with a validation set, keep the snapshot with the best
/// validation worst-group accuracy.
pub fn train_classifier(
    inputs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    config: &ClassifierConfig,
    val: Option<&ValidationSet>,
    seed: u64,
) -> Result<LabelClassifier> {
    if let Some(v) = val {
        if v.inputs.len() != v.labels.len() || v.inputs.len() != v.groups.len() || v.inputs.is_empty() {
            return Err(Error::Dimension("validation inputs, labels and groups differ in length".into()));
        }
    }
    train_classifier_with(inputs, labels, num_classes, config, seed, |_, net| {
        val.map(|v| v.worst_group(net))
    })
}

impl LabelClassifier {
    pub fn predict(&self, x: &[f64]) -> usize {
        self.net.predict(x)
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<usize>> {
        let dim = self.net.input_dim();
        if let Some(x) = xs.iter().find(|x| x.len() != dim) {
            return Err(Error::Dimension(format!("input width {} but the classifier expects {dim}", x.len())));
        }
        Ok(xs.par_iter().map(|x| self.net.predict(x)).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode("label-classifier", self, &self.net.flat_params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut model, params): (LabelClassifier, Vec<f64>) = container::decode("label-classifier", bytes)?;
        model.net = Mlp::zeros(&model.net.sizes());
        model.net.set_flat_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::load_bytes(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageResult {
    pub accuracy: f64,
    pub chance: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Train a fresh probe from representations to the spurious label and report
/// its accuracy on a class-balanced held-out half.
pub fn audit_leakage(
    representations: &[Vec<f64>],
    spurious: &[usize],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<LeakageResult> {
    if representations.len() != spurious.len() {
        return Err(Error::Dimension(format!(
            "{} representations for {} spurious labels",
            representations.len(),
            spurious.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in spurious.iter().enumerate() {
        by_class.entry(s).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Invalid("spurious label is constant".into()));
    }
    let k = *by_class.keys().last().expect("non-empty") + 1;
    let per_class = by_class.values().map(Vec::len).min().expect("non-empty") / 2;
    if per_class == 0 {
        return Err(Error::Precondition("too few records for a held-out split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..per_class]);
        train.extend_from_slice(&idx[per_class..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| representations[i].clone()).collect();
    let ys: Vec<usize> = train.iter().map(|&i| spurious[i]).collect();
    let probe = train_classifier(&xs, &ys, k, config, None, seed)?;
    let tx: Vec<Vec<f64>> = test.iter().map(|&i| representations[i].clone()).collect();
    let preds = probe.predict_batch(&tx)?;
    let correct = preds.iter().zip(&test).filter(|(p, &i)| **p == spurious[i]).count();
    Ok(LeakageResult {
        accuracy: correct as f64 / test.len() as f64,
        chance: 1.0 / by_class.len() as f64,
        train_size: train.len(),
        test_size: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            hidden: vec![8, 8, 8],
            ..Default::default()
        }
    }

    fn binary_toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..16u32 {
            let bits: Vec<f64> = (0..4).map(|b| ((i >> b) & 1) as f64).collect();
            ys.push(bits[0] as usize);
            xs.push(bits);
        }
        (xs, ys)
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let (xs, ys) = binary_toy();
        let cfg = ClassifierConfig { epochs: 0, ..small() };
        let c = train_classifier(&xs, &ys, 2, &cfg, None, 1).unwrap();
        assert!(c.history.is_empty());
        assert_eq!(c.best_epoch, None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(c.net, Mlp::new(&[4, 8, 8, 8, 2], &mut rng).unwrap());
    }

    #[test]
    fn scripted_early_stopping_keeps_best_epoch() {
        let (xs, ys) = binary_toy();
        let cfg = ClassifierConfig { epochs: 6, ..small() };
        let schedule = [0.5, 0.6, 0.9, 0.7, 0.4, 0.9];
        let c = train_classifier_with(&xs, &ys, 2, &cfg, 4, |e, _| Some(schedule[e - 1])).unwrap();
        assert_eq!(c.best_epoch, Some(3));
        let three = train_classifier(&xs, &ys, 2, &ClassifierConfig { epochs: 3, ..small() }, None, 4).unwrap();
        assert_eq!(c.net, three.net);
    }

    #[test]
    fn roundtrip_bytes() {
        let (xs, ys) = binary_toy();
        let cfg = ClassifierConfig { epochs: 2, ..small() };
        let c = train_classifier(&xs, &ys, 2, &cfg, None, 9).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(LabelClassifier::from_bytes(&bytes).unwrap(), c);
        assert!(crate::nn::ConceptModel::from_bytes(&bytes).is_err());
    }

    #[test]
    fn constant_spurious_label_rejected() {
        let xs = vec![vec![0.0]; 10];
        assert!(audit_leakage(&xs, &[1; 10], &small(), 0).is_err());
    }
}
