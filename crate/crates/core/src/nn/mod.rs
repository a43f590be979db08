//! Hard-CBM numerics: concept heads, the label MLP, soft projections,
//! the leakage probe and finite-difference gradient checks.

mod classifier;
mod concept;
mod container;

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use classifier::{
    audit_leakage, train_classifier, train_classifier_with, ClassifierConfig, EpochRecord, LabelClassifier,
    LeakageResult, ValidationSet,
};
pub use concept::{
    head_loss_and_grad, predict_concepts, train_concept_model, ConceptModel, ConceptTrainConfig, Head, PredictMode,
};

/// Affine layer; `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    #[serde(skip)]
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let mut d = Dense::zeros(inputs, outputs);
        for w in &mut d.weights {
            *w = rng.sample(dist);
        }
        d
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let mut s = self.bias[o];
                for (w, v) in row.iter().zip(x) {
                    s += w * v;
                }
                s
            })
            .collect()
    }
}

/// Affine layers with ReLU between them and raw logits out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            layers: sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
        })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    /// Post-activation outputs of every layer, input first.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(acts.last().expect("non-empty"));
            if k < last {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).pop().expect("non-empty")
    }

    /// Index of the largest logit; the first wins ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Mean softmax cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[usize]) -> (f64, Mlp) {
        let mut grad = Mlp::zeros(&self.sizes());
        let mut loss = 0.0;
        let n = xs.len().max(1) as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.trace(x);
            let logits = acts.last().expect("non-empty");
            let lse = log_sum_exp(logits);
            loss += lse - logits[y];
            let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            delta[y] -= 1.0;
            for k in (0..self.layers.len()).rev() {
                let layer = &self.layers[k];
                let input = &acts[k];
                let g = &mut grad.layers[k];
                for o in 0..layer.outputs {
                    let d = delta[o] / n;
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw += d * v;
                    }
                }
                if k > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                    for (p, a) in prev.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (loss / n, grad)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let needed: usize = self.layers.iter().map(|l| l.inputs * l.outputs + l.outputs).sum();
        if params.len() != needed {
            return Err(Error::Dimension(format!("{} parameters for a network of {needed}", params.len())));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.inputs * l.outputs;
            l.weights = params[at..at + nw].to_vec();
            at += nw;
            l.bias = params[at..at + l.outputs].to_vec();
            at += l.outputs;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// ĝ_i(x) = ⟨h(x), C_i⟩ / ‖C_i‖² for every concept vector C_i.
pub fn project_soft_concepts(features: &[Vec<f64>], concepts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let norms = concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let n: f64 = c.iter().map(|v| v * v).sum();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::Invalid(format!("concept vector {i} has zero norm")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    features
        .iter()
        .map(|h| {
            concepts
                .iter()
                .zip(&norms)
                .map(|(c, n)| {
                    if c.len() != h.len() {
                        return Err(Error::Dimension(format!(
                            "feature dim {} vs concept dim {}",
                            h.len(),
                            c.len()
                        )));
                    }
                    Ok(h.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / n)
                })
                .collect()
        })
        .collect()
}

/// Largest relative error between `f`'s analytic gradient and central
/// differences, over every parameter. The denominator is floored at 1e-6
/// so that vanishing gradients are compared absolutely.
pub fn grad_check<F>(params: &[f64], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let (_, analytic) = f(params);
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + eps;
        let up = f(&p).0;
        p[k] = orig - eps;
        let down = f(&p).0;
        p[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Gradient check of the MLP's cross-entropy over a batch.
pub fn grad_check_mlp(net: &Mlp, xs: &[Vec<f64>], ys: &[usize], eps: f64) -> Result<f64> {
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    grad_check(&net.flat_params(), eps, |p| {
        let mut m = net.clone();
        m.set_flat_params(p).expect("same shape");
        let (loss, g) = m.loss_and_grad(&refs, ys);
        (loss, g.flat_params())
    })
}

/// Gradient check of one weighted-BCE concept head; the bias is the last parameter.
pub fn grad_check_head(
    weights: &[f64],
    bias: f64,
    pos_weight: f64,
    xs: &[Vec<f64>],
    ys: &[u8],
    eps: f64,
) -> Result<f64> {
    let mut params = weights.to_vec();
    params.push(bias);
    let d = weights.len();
    let mask = vec![true; ys.len()];
    grad_check(&params, eps, |p| {
        let (loss, gw, gb) = head_loss_and_grad(&p[..d], p[d], pos_weight, xs, ys, &mask);
        let mut g = gw;
        g.push(gb);
        (loss, g)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn projection_cases() {
        let c = vec![vec![1.0, 2.0, 2.0], vec![2.0, -1.0, 0.0]];
        let p = project_soft_concepts(&[c[0].clone()], &c).unwrap();
        assert_eq!(p[0][0], 1.0);
        assert_eq!(p[0][1], 0.0);
        let twice: Vec<f64> = c[0].iter().map(|v| 2.0 * v).collect();
        assert_eq!(project_soft_concepts(&[twice], &c).unwrap()[0][0], 2.0);
        assert!(project_soft_concepts(&[vec![1.0, 0.0, 0.0]], &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::new(&[6, 10, 8, 5, 2], &mut rng).unwrap();
            let xs: Vec<Vec<f64>> = (0..8).map(|_| randn(&mut rng, 6)).collect();
            let ys: Vec<usize> = (0..8).map(|i| i % 2).collect();
            let err = grad_check_mlp(&net, &xs, &ys, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn single_head_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = randn(&mut rng, 4);
        let x = vec![randn(&mut rng, 4)];
        assert!(grad_check_head(&w, 0.3, 2.5, &x, &[1], 1e-5).unwrap() < 1e-7);
    }

    #[test]
    fn zero_network_symmetric_point() {
        let net = Mlp::zeros(&[3, 4, 4, 4, 2]);
        let xs = vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]];
        assert!(grad_check_mlp(&net, &xs, &[0, 1], 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn numerics_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
