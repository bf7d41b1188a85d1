//! Temporally weighted aggregation of frame-level features into one track embedding.

use super::{l2_normalize, Embedding, ReidError};

/// Hidden channels of the learned temporal scorer.
pub const CONV_HIDDEN: usize = 64;
/// Temporal kernel width of both scorer layers.
pub const CONV_KERNEL: usize = 3;

/// Produces one scalar score per frame; the softmax of the scores weights the sum.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TemporalScorer {
    /// Equal scores, i.e. a plain mean.
    #[default]
    Uniform,
    LearnedConv(ConvScorer),
}

/// Two same-padded temporal convolutions, `D -> 64` then `64 -> 1`, with a ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvScorer {
    dim: usize,
    /// `[hidden][dim][kernel]`, flattened.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `[hidden][kernel]`, flattened.
    w2: Vec<f64>,
    b2: f64,
}

impl ConvScorer {
    pub fn new(dim: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Result<Self, ReidError> {
        let shape_ok = dim > 0
            && w1.len() == CONV_HIDDEN * dim * CONV_KERNEL
            && b1.len() == CONV_HIDDEN
            && w2.len() == CONV_HIDDEN * CONV_KERNEL;
        if !shape_ok {
            return Err(ReidError::InvalidParameter(format!(
                "conv scorer shapes inconsistent with dim {dim}: w1 {}, b1 {}, w2 {}",
                w1.len(),
                b1.len(),
                w2.len()
            )));
        }
        if w1.iter().chain(&b1).chain(&w2).any(|v| !v.is_finite()) || !b2.is_finite() {
            return Err(ReidError::InvalidParameter("non-finite scorer weight".into()));
        }
        Ok(ConvScorer { dim, w1, b1, w2, b2 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub(crate) fn parts(&self) -> (&[f64], &[f64], &[f64], f64) {
        (&self.w1, &self.b1, &self.w2, self.b2)
    }

    pub fn scores<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>, ReidError> {
        let len = rows.len();
        for r in rows {
            if r.as_ref().len() != self.dim {
                return Err(ReidError::DimensionMismatch { expected: self.dim, got: r.as_ref().len() });
            }
        }
        let half = (CONV_KERNEL / 2) as isize;
        let mut hidden = vec![0.0; CONV_HIDDEN * len];
        for c in 0..CONV_HIDDEN {
            for t in 0..len {
                let mut acc = self.b1[c];
                for k in 0..CONV_KERNEL {
                    let src = t as isize + k as isize - half;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let row = rows[src as usize].as_ref();
                    for (d, x) in row.iter().enumerate() {
                        acc += self.w1[(c * self.dim + d) * CONV_KERNEL + k] * x;
                    }
                }
                hidden[c * len + t] = acc.max(0.0);
            }
        }
        let mut out = vec![self.b2; len];
        for (t, o) in out.iter_mut().enumerate() {
            for c in 0..CONV_HIDDEN {
                for k in 0..CONV_KERNEL {
                    let src = t as isize + k as isize - half;
                    if src >= 0 && src < len as isize {
                        *o += self.w2[c * CONV_KERNEL + k] * hidden[c * len + src as usize];
                    }
                }
            }
        }
        Ok(out)
    }
}

impl TemporalScorer {
    pub fn scores<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>, ReidError> {
        match self {
            TemporalScorer::Uniform => Ok(vec![0.0; rows.len()]),
            TemporalScorer::LearnedConv(s) => s.scores(rows),
        }
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax-weighted sum of `rows` under explicit `scores`, normalized.
pub fn aggregate_with_scores<R: AsRef<[f64]>>(rows: &[R], scores: &[f64]) -> Result<Embedding, ReidError> {
    let Some(first) = rows.first() else { return Err(ReidError::EmptySequence) };
    if scores.len() != rows.len() {
        return Err(ReidError::DimensionMismatch { expected: rows.len(), got: scores.len() });
    }
    let dim = first.as_ref().len();
    let weights = softmax(scores);
    let mut acc = vec![0.0; dim];
    for (row, w) in rows.iter().zip(&weights) {
        let row = row.as_ref();
        if row.len() != dim {
            return Err(ReidError::DimensionMismatch { expected: dim, got: row.len() });
        }
        for (a, x) in acc.iter_mut().zip(row) {
            *a += w * x;
        }
    }
    l2_normalize(&acc)
}

/// Collapses a temporally ordered `L x D` feature sequence into one unit embedding.
pub fn temporal_aggregate<R: AsRef<[f64]>>(rows: &[R], scorer: &TemporalScorer) -> Result<Embedding, ReidError> {
    if rows.is_empty() {
        return Err(ReidError::EmptySequence);
    }
    let scores = scorer.scores(rows)?;
    aggregate_with_scores(rows, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_is_normalized_mean() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let out = temporal_aggregate(&rows, &TemporalScorer::Uniform).unwrap();
        let expected = l2_normalize(&[2.0 / 3.0, 2.0 / 3.0]).unwrap();
        assert_abs_diff_eq!(out.as_slice()[0], expected.as_slice()[0], epsilon = 1e-12);
        let single = temporal_aggregate(&[vec![3.0, 4.0]], &TemporalScorer::Uniform).unwrap();
        assert_eq!(single.as_slice(), &[0.6, 0.8]);
        assert!(matches!(temporal_aggregate::<Vec<f64>>(&[], &TemporalScorer::Uniform), Err(ReidError::EmptySequence)));
    }

    #[test]
    fn explicit_scores() {
        // softmax(ln 3, 0) = (0.75, 0.25)
        let out = aggregate_with_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[3f64.ln(), 0.0]).unwrap();
        let n = (0.75f64 * 0.75 + 0.25 * 0.25).sqrt();
        assert_abs_diff_eq!(out.as_slice()[0], 0.75 / n, epsilon = 1e-12);
        assert_abs_diff_eq!(out.as_slice()[1], 0.25 / n, epsilon = 1e-12);
        assert_abs_diff_eq!(out.as_slice()[0], 0.9487, epsilon = 1e-4);
        assert_abs_diff_eq!(out.as_slice()[1], 0.3162, epsilon = 1e-4);
    }

    #[test]
    fn opposite_rows_vanish() {
        let r = temporal_aggregate(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &TemporalScorer::Uniform);
        assert!(matches!(r, Err(ReidError::ZeroVector)));
    }

    fn random_conv(dim: usize, seed: u64) -> ConvScorer {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
        ConvScorer::new(dim, v(CONV_HIDDEN * dim * CONV_KERNEL), v(CONV_HIDDEN), v(CONV_HIDDEN * CONV_KERNEL), 0.1).unwrap()
    }

    /// Direct evaluation of the two convolutions for one output position.
    fn conv_oracle(s: &ConvScorer, rows: &[Vec<f64>], t: usize) -> f64 {
        let (w1, b1, w2, b2) = s.parts();
        let d = s.dim();
        let at = |i: isize| -> Option<&Vec<f64>> { if i < 0 { None } else { rows.get(i as usize) } };
        let hidden = |c: usize, pos: isize| -> f64 {
            let mut a = b1[c];
            for k in 0..3 {
                if let Some(r) = at(pos + k as isize - 1) {
                    for j in 0..d {
                        a += w1[(c * d + j) * 3 + k] * r[j];
                    }
                }
            }
            a.max(0.0)
        };
        let mut out = b2;
        for c in 0..CONV_HIDDEN {
            for k in 0..3 {
                let pos = t as isize + k as isize - 1;
                if pos >= 0 && (pos as usize) < rows.len() {
                    out += w2[c * 3 + k] * hidden(c, pos);
                }
            }
        }
        out
    }

    #[test]
    fn conv_scores_match_direct_evaluation() {
        let s = random_conv(5, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scores = s.scores(&rows).unwrap();
        for (t, sc) in scores.iter().enumerate() {
            assert_abs_diff_eq!(*sc, conv_oracle(&s, &rows, t), epsilon = 1e-12);
        }
        let out = temporal_aggregate(&rows, &TemporalScorer::LearnedConv(s.clone())).unwrap();
        assert_abs_diff_eq!(out.dot(&out), 1.0, epsilon = 1e-12);
        assert!(s.scores(&[vec![1.0; 4]]).is_err());
        assert!(ConvScorer::new(5, vec![0.0; 3], vec![0.0; CONV_HIDDEN], vec![0.0; CONV_HIDDEN * 3], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn aggregation_invariants(
            rows in proptest::collection::vec(proptest::collection::vec(0.1..1.0f64, 4), 1..8),
            scores_seed in proptest::collection::vec(-3.0..3.0f64, 8),
            shift in -50.0..50.0f64,
            rot in 0usize..8,
        ) {
            let scores = &scores_seed[..rows.len()];
            let base = aggregate_with_scores(&rows, scores).unwrap();
            prop_assert!((base.dot(&base) - 1.0).abs() < 1e-12);

            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let out = aggregate_with_scores(&rows, &shifted).unwrap();
            for (a, b) in base.as_slice().iter().zip(out.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }

            let k = rot % rows.len();
            let mut prow = rows.clone();
            prow.rotate_left(k);
            let mut pscore = scores.to_vec();
            pscore.rotate_left(k);
            let out = aggregate_with_scores(&prow, &pscore).unwrap();
            for (a, b) in base.as_slice().iter().zip(out.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
