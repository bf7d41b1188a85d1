//! Track-level re-identification scores (mAP, CMC).

use crate::geo::CameraId;

use super::ReidError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTrack {
    pub id: u64,
    pub camera: CameraId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReidScores {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
}

/// Ranks the gallery for each query by ascending distance (ties by gallery
/// index). Gallery entries sharing both identity and camera with the query
/// are ignored.
pub fn eval_track_reid(query: &[LabeledTrack], gallery: &[LabeledTrack], dist: &[Vec<f64>]) -> Result<ReidScores, ReidError> {
    if dist.len() != query.len() {
        return Err(ReidError::DimensionMismatch { expected: query.len(), got: dist.len() });
    }
    if query.is_empty() {
        return Err(ReidError::InvalidParameter("no queries".into()));
    }
    let (mut ap_sum, mut hit1, mut hit5) = (0.0, 0usize, 0usize);
    for (qi, (q, row)) in query.iter().zip(dist).enumerate() {
        if row.len() != gallery.len() {
            return Err(ReidError::DimensionMismatch { expected: gallery.len(), got: row.len() });
        }
        let mut ranked: Vec<usize> =
            (0..gallery.len()).filter(|&g| !(gallery[g].id == q.id && gallery[g].camera == q.camera)).collect();
        ranked.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let matches: Vec<bool> = ranked.iter().map(|&g| gallery[g].id == q.id).collect();
        let positives = matches.iter().filter(|m| **m).count();
        if positives == 0 {
            return Err(ReidError::NoValidGallery(qi));
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &m) in matches.iter().enumerate() {
            if m {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / positives as f64;
        let first = matches.iter().position(|m| *m).expect("positives > 0");
        hit1 += usize::from(first < 1);
        hit5 += usize::from(first < 5);
    }
    let n = query.len() as f64;
    Ok(ReidScores { map: ap_sum / n, cmc1: hit1 as f64 / n, cmc5: hit5 as f64 / n })
}
