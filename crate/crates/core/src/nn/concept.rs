//! Concept model g: one weighted logistic head per concept over precomputed features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{container, sigmoid, softplus};
use crate::data::AnnotationMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub epochs: usize,
    /// Abstained cells contribute zero loss instead of counting as negatives.
    #[serde(default)]
    pub mask_abstain: bool,
}

impl Default for ConceptTrainConfig {
    fn default() -> Self {
        ConceptTrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            momentum: 0.9,
            epochs: 200,
            mask_abstain: false,
        }
    }
}

impl ConceptTrainConfig {
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
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Trained {
        #[serde(skip)]
        weights: Vec<f64>,
        #[serde(skip)]
        bias: f64,
        /// #negatives / #positives.
        pos_weight: f64,
    },
    /// The column had no positives or no negatives; predicts its constant value.
    Skipped { constant: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptModel {
    pub concepts: Vec<String>,
    pub feature_dim: usize,
    pub heads: Vec<Head>,
    pub config: ConceptTrainConfig,
    pub seed: u64,
    /// Mean training loss per epoch over trained heads.
    pub history: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Weighted binary cross-entropy of one head, averaged over the batch, with
/// gradients for the weights and bias. Masked rows contribute nothing.
pub fn head_loss_and_grad(
    weights: &[f64],
    bias: f64,
    pos_weight: f64,
    xs: &[Vec<f64>],
    ys: &[u8],
    mask: &[bool],
) -> (f64, Vec<f64>, f64) {
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    let n = xs.len().max(1) as f64;
    for ((x, &y), &keep) in xs.iter().zip(ys).zip(mask) {
        if !keep {
            continue;
        }
        let z = bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        let y = y as f64;
        loss += pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
        let s = sigmoid(z);
        let dz = (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / n;
        gb += dz;
        for (g, v) in gw.iter_mut().zip(x) {
            *g += dz * v;
        }
    }
    (loss / n, gw, gb)
}

fn check_features(features: &[Vec<f64>], dim: usize) -> Result<()> {
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Dimension(format!(
                "row {i}: feature dim {} but the model expects {dim}",
                f.len()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("row {i}: non-finite feature")));
        }
    }
    Ok(())
}

/// Train one head per matrix column with momentum mini-batch descent.
/// The epoch shuffle is drawn from a ChaCha8 stream seeded by `seed` and shared by all heads.
pub fn train_concept_model(
    features: &[Vec<f64>],
    matrix: &AnnotationMatrix,
    config: &ConceptTrainConfig,
    seed: u64,
) -> Result<ConceptModel> {
    config.validate()?;
    matrix.validate()?;
    if features.len() != matrix.rows() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} matrix rows",
            features.len(),
            matrix.rows()
        )));
    }
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Precondition("no training rows".into()))?;
    check_features(features, dim)?;
    let m = matrix.cols();
    let n = features.len();
    let keep: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..m).map(|j| !(config.mask_abstain && matrix.abstain[i][j])).collect())
        .collect();

    let mut warnings = Vec::new();
    let mut heads = Vec::with_capacity(m);
    let mut trainable = Vec::new();
    for j in 0..m {
        let (mut pos, mut neg) = (0usize, 0usize);
        for i in 0..n {
            if keep[i][j] {
                if matrix.bits[i][j] == 1 {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
        if pos == 0 || neg == 0 {
            let w = format!(
                "concept `{}` has {pos} positives and {neg} negatives; head skipped",
                matrix.concept_phrases[j]
            );
            log::warn!("{w}");
            warnings.push(w);
            heads.push(Head::Skipped {
                constant: u8::from(pos > 0),
            });
        } else {
            heads.push(Head::Trained {
                weights: vec![0.0; dim],
                bias: 0.0,
                pos_weight: neg as f64 / pos as f64,
            });
            trainable.push(j);
        }
    }

    let mut velocity: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; dim], 0.0); m];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| features[i].clone()).collect();
            for &j in &trainable {
                let ys: Vec<u8> = chunk.iter().map(|&i| matrix.bits[i][j]).collect();
                let mask: Vec<bool> = chunk.iter().map(|&i| keep[i][j]).collect();
                let Head::Trained {
                    weights,
                    bias,
                    pos_weight,
                } = &mut heads[j]
                else {
                    unreachable!("trainable heads are trained");
                };
                let (loss, gw, gb) = head_loss_and_grad(weights, *bias, *pos_weight, &xs, &ys, &mask);
                if !loss.is_finite() {
                    return Err(Error::NonFinite { epoch, batch: b });
                }
                epoch_loss += loss;
                let (vw, vb) = &mut velocity[j];
                for ((w, v), g) in weights.iter_mut().zip(vw.iter_mut()).zip(&gw) {
                    *v = config.momentum * *v + g;
                    *w -= config.learning_rate * *v;
                }
                *vb = config.momentum * *vb + gb;
                *bias -= config.learning_rate * *vb;
                if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::NonFinite { epoch, batch: b });
                }
            }
            batches += 1;
        }
        let denom = (batches * trainable.len()).max(1) as f64;
        history.push(epoch_loss / denom);
    }
    Ok(ConceptModel {
        concepts: matrix.concept_phrases.clone(),
        feature_dim: dim,
        heads,
        config: config.clone(),
        seed,
        history,
        warnings,
    })
}

impl ConceptModel {
    /// Probability per concept; skipped heads return their constant.
    pub fn soft(&self, x: &[f64]) -> Vec<f64> {
        self.heads
            .iter()
            .map(|h| match h {
                Head::Trained { weights, bias, .. } => {
                    sigmoid(bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
                }
                Head::Skipped { constant } => *constant as f64,
            })
            .collect()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.heads {
            if let Head::Trained { weights, bias, .. } = h {
                out.extend_from_slice(weights);
                out.push(*bias);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode("concept-model", self, &self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut model, params): (ConceptModel, Vec<f64>) = container::decode("concept-model", bytes)?;
        let mut at = 0;
        let dim = model.feature_dim;
        for h in &mut model.heads {
            if let Head::Trained { weights, bias, .. } = h {
                if at + dim + 1 > params.len() {
                    return Err(Error::Invalid("model file has too few parameters".into()));
                }
                *weights = params[at..at + dim].to_vec();
                *bias = params[at + dim];
                at += dim + 1;
            }
        }
        if at != params.len() {
            return Err(Error::Invalid("model file has surplus parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::save_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::load_bytes(path)?)
    }
}

/// Hard mode thresholds the soft probability at 0.5; ties round to 1.
pub fn predict_concepts(model: &ConceptModel, features: &[Vec<f64>], mode: PredictMode) -> Result<Vec<Vec<f64>>> {
    check_features(features, model.feature_dim)?;
    Ok(features
        .par_iter()
        .map(|x| {
            let p = model.soft(x);
            match mode {
                PredictMode::Soft => p,
                PredictMode::Hard => p.into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MatrixSource;

    fn toy(n: usize) -> (Vec<Vec<f64>>, AnnotationMatrix) {
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) / n as f64 * 4.0).collect();
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let mut m = AnnotationMatrix::zeros(ids, vec!["positive".into(), "always".into()], MatrixSource::Raw);
        for (i, x) in xs.iter().enumerate() {
            m.bits[i][0] = u8::from(*x > 0.0);
            m.bits[i][1] = 1;
        }
        (xs.into_iter().map(|x| vec![x]).collect(), m)
    }

    #[test]
    fn separable_head_and_skipped_head() {
        let (f, m) = toy(40);
        let model = train_concept_model(&f, &m, &ConceptTrainConfig::default(), 7).unwrap();
        assert!(matches!(model.heads[1], Head::Skipped { constant: 1 }));
        assert!(model.warnings[0].contains("always"));
        let hard = predict_concepts(&model, &f, PredictMode::Hard).unwrap();
        for (i, row) in hard.iter().enumerate() {
            assert_eq!(row[0] as u8, m.bits[i][0]);
            assert_eq!(row[1], 1.0);
        }
        let soft = predict_concepts(&model, &f, PredictMode::Soft).unwrap();
        for (h, s) in hard.iter().zip(&soft) {
            for (a, b) in h.iter().zip(s) {
                assert_eq!(*a == 1.0, *b >= 0.5);
            }
        }
    }

    #[test]
    fn deterministic_bytes_and_roundtrip() {
        let (f, m) = toy(30);
        let cfg = ConceptTrainConfig {
            epochs: 20,
            ..Default::default()
        };
        let a = train_concept_model(&f, &m, &cfg, 3).unwrap();
        let b = train_concept_model(&f, &m, &cfg, 3).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(ConceptModel::from_bytes(&a.to_bytes().unwrap()).unwrap(), a);
    }

    #[test]
    fn tie_rounds_up() {
        let model = ConceptModel {
            concepts: vec!["c".into()],
            feature_dim: 1,
            heads: vec![Head::Trained {
                weights: vec![0.0],
                bias: 0.0,
                pos_weight: 1.0,
            }],
            config: ConceptTrainConfig::default(),
            seed: 0,
            history: vec![],
            warnings: vec![],
        };
        assert_eq!(predict_concepts(&model, &[vec![3.0]], PredictMode::Soft).unwrap()[0][0], 0.5);
        assert_eq!(predict_concepts(&model, &[vec![3.0]], PredictMode::Hard).unwrap()[0][0], 1.0);
        assert!(predict_concepts(&model, &[vec![3.0, 1.0]], PredictMode::Hard).is_err());
    }

    #[test]
    fn masked_rows_carry_no_loss() {
        let xs = vec![vec![1.0], vec![-1.0]];
        let (l, gw, gb) = head_loss_and_grad(&[0.5], 0.1, 2.0, &xs, &[1, 0], &[false, false]);
        assert_eq!((l, gw[0], gb), (0.0, 0.0, 0.0));
    }
}
