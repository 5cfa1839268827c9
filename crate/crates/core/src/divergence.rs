//! Jensen–Shannon divergence (base 2) and its aggregation over answer tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability vector's sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-6;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Distribution(format!("length mismatch: {} vs {}", p.len(), q.len())));
    }
    for v in [p, q] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || v.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Distribution(format!("not a probability vector (sum {sum})")));
        }
    }
    Ok(())
}

/// `p · log2(p / m)` with `0 · log 0 = 0`.
fn kl_term(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p.max(LOG_FLOOR).log2() - m.max(LOG_FLOOR).log2())
    }
}

/// Base-2 Jensen–Shannon divergence, in `[0, 1]`.
///
/// Each summand is computed from `(p_i, q_i)` symmetrically, so swapping the
/// arguments gives a bit-identical result.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (kl_term(a, m) + kl_term(b, m))
        })
        .sum();
    Ok(js.clamp(0.0, 1.0))
}

/// Square root of [`js_divergence`]; a metric on the simplex.
pub fn js_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    js_divergence(p, q).map(f64::sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Max,
}

/// Output distributions at the answer-predicting positions of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistributions {
    /// `(row, position)` of each distribution.
    pub index: Vec<(usize, usize)>,
    pub probs: Vec<Vec<f64>>,
}

impl AnswerDistributions {
    pub fn new(index: Vec<(usize, usize)>, probs: Vec<Vec<f64>>) -> Result<Self> {
        if index.is_empty() {
            return Err(Error::Distribution("answer index is empty".into()));
        }
        if index.len() != probs.len() {
            return Err(Error::Distribution(format!(
                "{} indices for {} distributions",
                index.len(),
                probs.len()
            )));
        }
        Ok(Self { index, probs })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Per-position JS divergences between two distribution sets over the same positions.
pub fn per_position_js(a: &AnswerDistributions, b: &AnswerDistributions) -> Result<Vec<f64>> {
    if a.index != b.index {
        return Err(Error::Distribution("answer positions differ".into()));
    }
    a.probs.iter().zip(&b.probs).map(|(p, q)| js_divergence(p, q)).collect()
}

pub fn aggregate_js(a: &AnswerDistributions, b: &AnswerDistributions, reduction: Reduction) -> Result<f64> {
    let per = per_position_js(a, b)?;
    Ok(reduce(&per, reduction))
}

pub(crate) fn reduce(values: &[f64], reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Reduction::Max => values.iter().copied().fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent reference: ½KL(p‖m) + ½KL(q‖m) using natural logs converted to bits.
    fn js_reference(p: &[f64], q: &[f64]) -> f64 {
        let mut total = 0.0;
        for (&a, &b) in p.iter().zip(q) {
            let m = (a + b) / 2.0;
            if a > 0.0 {
                total += 0.5 * a * (a / m).ln();
            }
            if b > 0.0 {
                total += 0.5 * b * (b / m).ln();
            }
        }
        total / std::f64::consts::LN_2
    }

    #[test]
    fn identical_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert_eq!(js_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_point_masses_are_one() {
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((js_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_mass_against_uniform() {
        let expected = js_reference(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((expected - 0.311278).abs() < 1e-6);
        let js = js_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((js - 0.311278).abs() < 1e-6, "{js}");
    }

    #[test]
    fn explicit_zeros_contribute_nothing() {
        let p = [0.5, 0.5, 0.0, 0.0];
        let q = [0.25, 0.75, 0.0, 0.0];
        let js4 = js_divergence(&p, &q).unwrap();
        let js2 = js_divergence(&p[..2], &q[..2]).unwrap();
        assert_eq!(js4, js2);
        assert!((js4 - js_reference(&p, &q)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.0 + 1e-7, 0.0], &[0.5, 0.5]).is_ok());
    }

    fn dists(probs: Vec<Vec<f64>>) -> AnswerDistributions {
        let index = (0..probs.len()).map(|i| (0, i)).collect();
        AnswerDistributions::new(index, probs).unwrap()
    }

    #[test]
    fn aggregate_mean_and_max() {
        let a = dists(vec![vec![0.5, 0.5], vec![1.0, 0.0]]);
        let b = dists(vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(aggregate_js(&a, &a, Reduction::Mean).unwrap(), 0.0);
        assert!((aggregate_js(&a, &b, Reduction::Mean).unwrap() - 0.5).abs() < 1e-12);
        assert!((aggregate_js(&a, &b, Reduction::Max).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_mismatched_positions() {
        let a = dists(vec![vec![1.0]]);
        let b = AnswerDistributions::new(vec![(1, 0)], vec![vec![1.0]]).unwrap();
        assert!(aggregate_js(&a, &b, Reduction::Mean).is_err());
        assert!(AnswerDistributions::new(vec![], vec![]).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("positive mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_matches_reference(p in simplex(5), q in simplex(5)) {
            let pq = js_divergence(&p, &q).unwrap();
            let qp = js_divergence(&q, &p).unwrap();
            prop_assert_eq!(pq.to_bits(), qp.to_bits());
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert!((pq - js_reference(&p, &q)).abs() < 1e-9);
        }

        #[test]
        fn aggregate_matches_loop(ps in proptest::collection::vec(simplex(4), 1..6), seed in 0u64..1000) {
            let qs: Vec<Vec<f64>> = ps.iter().enumerate().map(|(i, p)| {
                let mut q = p.clone();
                q.rotate_left((i + seed as usize) % 4);
                q
            }).collect();
            let mut total = 0.0;
            for (p, q) in ps.iter().zip(&qs) {
                total += js_reference(p, q);
            }
            let agg = aggregate_js(&dists(ps.clone()), &dists(qs), Reduction::Mean).unwrap();
            prop_assert!((agg - total / ps.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn triangle_inequality_on_sampled_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut sample = || {
            let v: Vec<f64> = (0..3).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        for _ in 0..10_000 {
            let (p, q, r) = (sample(), sample(), sample());
            let lhs = js_distance(&p, &r).unwrap();
            let rhs = js_distance(&p, &q).unwrap() + js_distance(&q, &r).unwrap();
            assert!(lhs <= rhs + 1e-9, "{lhs} > {rhs}");
        }
    }
}
