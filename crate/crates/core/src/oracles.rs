//! Naive reference implementations used to cross-check production paths.
//!
//! Nothing here imports from the rest of the crate.

/// Textbook Pearson correlation via deviations from the mean.
/// Returns 0 when either input is constant.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "oracle inputs differ in length");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut d = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    d / (na.sqrt() * nb.sqrt())
}

/// All index pairs `(i, j)`, `i < j`, whose cosine similarity exceeds `theta`.
pub fn pairwise_sim_oracle(vectors: &[Vec<f64>], theta: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..vectors.len() {
        for j in (i + 1)..vectors.len() {
            if cosine(&vectors[i], &vectors[j]) > theta {
                out.push((i, j));
            }
        }
    }
    out
}

/// Greedy first-wins survivor set recomputed from the all-pairs list.
pub fn greedy_survivors_oracle(vectors: &[Vec<f64>], theta: f64) -> Vec<usize> {
    let pairs = pairwise_sim_oracle(vectors, theta);
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..vectors.len() {
        let clash = kept.iter().any(|&k| pairs.contains(&(k, i)));
        if !clash {
            kept.push(i);
        }
    }
    kept
}

/// Phi coefficient of a 2×2 table where a class of probability `p_class`
/// carries an attribute with probability `rate_in` and the other class with `rate_out`.
pub fn phi_from_rates(p_class: f64, rate_in: f64, rate_out: f64) -> f64 {
    let p_attr = p_class * rate_in + (1.0 - p_class) * rate_out;
    let p_both = p_class * rate_in;
    let den = (p_class * (1.0 - p_class) * p_attr * (1.0 - p_attr)).sqrt();
    if den == 0.0 {
        return 0.0;
    }
    (p_both - p_class * p_attr) / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_one() {
        let x = [1.0, 0.0, 1.0, 1.0];
        assert!((pearson_oracle(&x, &x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_pairs_above_one() {
        let v = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
        assert!(pairwise_sim_oracle(&v, 1.0).is_empty());
        assert_eq!(pairwise_sim_oracle(&v, 0.5), vec![(0, 1), (1, 2)]);
        assert_eq!(greedy_survivors_oracle(&v, 0.5), vec![0, 2]);
    }

    #[test]
    fn phi_of_balanced_table() {
        assert!(phi_from_rates(0.5, 0.5, 0.5).abs() < 1e-15);
        assert!((phi_from_rates(0.5, 1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((phi_from_rates(0.5, 0.95, 0.05) - 0.9).abs() < 1e-12);
    }
}
