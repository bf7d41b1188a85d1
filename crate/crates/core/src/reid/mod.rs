//! Appearance embeddings: normalization, track aggregation, camera bias
//! mitigation, k-reciprocal re-ranking and track-level re-id evaluation.

mod aggregate;
mod eval;
pub mod io;
mod rerank;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geo::CameraId;

pub use aggregate::{aggregate_with_scores, temporal_aggregate, ConvScorer, TemporalScorer, CONV_HIDDEN, CONV_KERNEL};
pub use eval::{eval_track_reid, LabeledTrack, ReidScores};
pub use rerank::{euclidean_distance_matrix, k_reciprocal_rerank, RerankParams};

/// Embedding width of the production re-id backbone.
pub const DEFAULT_EMBEDDING_DIM: usize = 2048;
/// Portion of the camera mean subtracted from each track embedding.
pub const DEFAULT_BIAS_LAMBDA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty feature sequence")]
    EmptySequence,
    #[error("gallery of {gallery} items is smaller than k1 = {k1}")]
    InsufficientGallery { gallery: usize, k1: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("query {0} has no valid gallery match")]
    NoValidGallery(usize),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A unit-norm appearance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    /// Euclidean distance; lies in [0, 2] for unit vectors.
    pub fn distance(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &[f64]) -> Result<Embedding, ReidError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(ReidError::ZeroVector);
    }
    Ok(Embedding(v.iter().map(|x| x / norm).collect()))
}

/// Normalized mean of two views of a track, e.g. original and horizontally flipped.
pub fn average_embeddings(a: &Embedding, b: &Embedding) -> Result<Embedding, ReidError> {
    if a.dim() != b.dim() {
        return Err(ReidError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let mean: Vec<f64> = a.0.iter().zip(&b.0).map(|(x, y)| (x + y) / 2.0).collect();
    l2_normalize(&mean)
}

/// Subtracts `lambda` times each camera's mean embedding and re-normalizes.
pub fn mitigate_camera_bias(tracks: &[(CameraId, Embedding)], lambda: f64) -> Result<Vec<Embedding>, ReidError> {
    let mut stats = CameraEmbeddingStats::default();
    for (cam, e) in tracks {
        stats.observe(cam, e)?;
    }
    tracks.iter().map(|(cam, e)| stats.mitigate(cam, e, lambda)).collect()
}

/// Running per-camera sums of track embeddings.
#[derive(Debug, Clone, Default)]
pub struct CameraEmbeddingStats {
    sums: BTreeMap<CameraId, (Vec<f64>, usize)>,
}

impl CameraEmbeddingStats {
    pub fn observe(&mut self, camera: &CameraId, e: &Embedding) -> Result<(), ReidError> {
        let entry = self.sums.entry(camera.clone()).or_insert_with(|| (vec![0.0; e.dim()], 0));
        if entry.0.len() != e.dim() {
            return Err(ReidError::DimensionMismatch { expected: entry.0.len(), got: e.dim() });
        }
        for (s, x) in entry.0.iter_mut().zip(e.as_slice()) {
            *s += x;
        }
        entry.1 += 1;
        Ok(())
    }

    pub fn count(&self, camera: &CameraId) -> usize {
        self.sums.get(camera).map_or(0, |s| s.1)
    }

    /// The camera embedding `g_c`, if any track of `camera` has been observed.
    pub fn mean(&self, camera: &CameraId) -> Option<Vec<f64>> {
        self.sums.get(camera).map(|(sum, n)| sum.iter().map(|s| s / *n as f64).collect())
    }

    pub fn mitigate(&self, camera: &CameraId, e: &Embedding, lambda: f64) -> Result<Embedding, ReidError> {
        if lambda == 0.0 {
            return Ok(e.clone());
        }
        let Some(g) = self.mean(camera) else { return Ok(e.clone()) };
        if g.len() != e.dim() {
            return Err(ReidError::DimensionMismatch { expected: g.len(), got: e.dim() });
        }
        let shifted: Vec<f64> = e.as_slice().iter().zip(&g).map(|(f, gc)| f - lambda * gc).collect();
        l2_normalize(&shifted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn normalize() {
        assert_eq!(e(&[3.0, 4.0]).as_slice(), &[0.6, 0.8]);
        let u = e(&[0.0, 1.0, 0.0]);
        assert_eq!(e(u.as_slice()), u);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(ReidError::ZeroVector)));
    }

    #[test]
    fn averaging() {
        let a = e(&[1.0, 0.0]);
        assert_eq!(average_embeddings(&a, &a).unwrap(), a);
        let m = average_embeddings(&a, &e(&[0.0, 1.0])).unwrap();
        assert_abs_diff_eq!(m.as_slice()[0], 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.as_slice()[1], 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(average_embeddings(&a, &e(&[-1.0, 0.0])), Err(ReidError::ZeroVector)));
    }

    #[test]
    fn camera_bias() {
        let c: CameraId = "c1".into();
        let tracks = vec![(c.clone(), e(&[1.0, 0.0])), (c.clone(), e(&[0.0, 1.0]))];
        assert_eq!(mitigate_camera_bias(&tracks, 0.0).unwrap(), vec![tracks[0].1.clone(), tracks[1].1.clone()]);
        let out = mitigate_camera_bias(&tracks, 0.5).unwrap();
        // g_c = (0.5, 0.5); f1 - 0.5 g_c = (0.75, -0.25)
        assert_abs_diff_eq!(out[0].as_slice()[0], 0.75 / 0.625f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].as_slice()[1], -0.25 / 0.625f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].as_slice()[0], 0.9487, epsilon = 1e-4);
        let single = vec![(c, e(&[0.6, 0.8]))];
        assert!(matches!(mitigate_camera_bias(&single, 1.0), Err(ReidError::ZeroVector)));
    }

    #[test]
    fn cameras_are_independent() {
        let tracks = vec![("a".into(), e(&[1.0, 0.0])), ("b".into(), e(&[0.0, 1.0])), ("b".into(), e(&[1.0, 1.0]))];
        let out = mitigate_camera_bias(&tracks, 0.5).unwrap();
        // a lone track in camera a: f - 0.5 f normalizes back to f
        assert_abs_diff_eq!(out[0].as_slice()[0], 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn mitigation_is_unit_norm(raw in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 4), 2..6), lambda in 0.0..0.9f64) {
            let tracks: Vec<(CameraId, Embedding)> = raw.iter().enumerate().filter_map(|(i, v)| {
                l2_normalize(v).ok().map(|emb| (CameraId::new(if i % 2 == 0 { "a" } else { "b" }), emb))
            }).collect();
            if let Ok(out) = mitigate_camera_bias(&tracks, lambda) {
                for o in out {
                    prop_assert!((o.dot(&o) - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
