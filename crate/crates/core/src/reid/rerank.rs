//! k-reciprocal re-ranking of a query/gallery distance matrix.
//!
//! Follows the published k-reciprocal encoding procedure: neighbour ranks
//! come from squared distances normalized by each row's maximum, each
//! probe's k-reciprocal set is expanded with the k1/2-reciprocal sets of its
//! members, Gaussian-weighted into a sparse vector, optionally smoothed over
//! its k2 nearest neighbours, and compared by Jaccard distance. The final
//! matrix mixes the Jaccard term with the raw Euclidean distance.
//!
//! Neighbour lists include every item tied with the last admitted one, so
//! equal input distances always produce equal outputs. Without ties this is
//! exactly the fixed-k procedure.

use super::{Embedding, ReidError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams { k1: 20, k2: 6, lambda: 0.3 }
    }
}

/// Pairwise Euclidean distances, `query.len() x gallery.len()`.
pub fn euclidean_distance_matrix(query: &[Embedding], gallery: &[Embedding]) -> Vec<Vec<f64>> {
    query.iter().map(|q| gallery.iter().map(|g| q.distance(g)).collect()).collect()
}

/// numpy-style round half to even, as used for `k1 / 2`.
fn round_half_even(x: f64) -> usize {
    let r = x.round();
    let out = if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 { r - 1.0 } else { r };
    out as usize
}

struct Ranking {
    dist: Vec<Vec<f64>>,
    order: Vec<Vec<usize>>,
}

impl Ranking {
    /// The first `k` entries of row `i`'s ranking plus anything tied with the last one.
    fn nearest(&self, i: usize, k: usize) -> &[usize] {
        let row = &self.order[i];
        let k = k.min(row.len());
        if k == 0 {
            return &row[..0];
        }
        let boundary = self.dist[i][row[k - 1]];
        let mut end = k;
        while end < row.len() && self.dist[i][row[end]] == boundary {
            end += 1;
        }
        &row[..end]
    }

    fn k_reciprocal(&self, i: usize, k: usize) -> Vec<usize> {
        self.nearest(i, k + 1).iter().copied().filter(|&j| self.nearest(j, k + 1).contains(&i)).collect()
    }
}

pub fn k_reciprocal_rerank(
    query: &[Embedding],
    gallery: &[Embedding],
    params: RerankParams,
) -> Result<Vec<Vec<f64>>, ReidError> {
    let RerankParams { k1, k2, lambda } = params;
    if k2 < 1 || k1 <= k2 {
        return Err(ReidError::InvalidParameter(format!("need k1 > k2 >= 1, got k1={k1} k2={k2}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ReidError::InvalidParameter(format!("lambda {lambda} outside [0, 1]")));
    }
    if gallery.len() < k1 {
        return Err(ReidError::InsufficientGallery { gallery: gallery.len(), k1 });
    }
    let nq = query.len();
    let all: Vec<&Embedding> = query.iter().chain(gallery).collect();
    let n = all.len();
    if let Some(d) = all.iter().map(|e| e.dim()).find(|&d| d != all[0].dim()) {
        return Err(ReidError::DimensionMismatch { expected: all[0].dim(), got: d });
    }

    let raw: Vec<Vec<f64>> = all.iter().map(|a| all.iter().map(|b| a.distance(b)).collect()).collect();
    let dist: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| {
            let sq: Vec<f64> = row.iter().map(|d| d * d).collect();
            let max = sq.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                sq.iter().map(|v| v / max).collect()
            } else {
                sq
            }
        })
        .collect();
    let order: Vec<Vec<usize>> = dist
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let ranking = Ranking { dist, order };

    let half = round_half_even(k1 as f64 / 2.0);
    let mut v = vec![vec![0.0; n]; n];
    for (i, v_row) in v.iter_mut().enumerate() {
        let recip = ranking.k_reciprocal(i, k1);
        let mut expansion = recip.clone();
        for &cand in &recip {
            let cand_recip = ranking.k_reciprocal(cand, half);
            let shared = cand_recip.iter().filter(|c| recip.contains(c)).count();
            if shared as f64 > 2.0 / 3.0 * cand_recip.len() as f64 {
                expansion.extend(cand_recip);
            }
        }
        expansion.sort_unstable();
        expansion.dedup();
        let weights: Vec<f64> = expansion.iter().map(|&j| (-ranking.dist[i][j]).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in expansion.iter().zip(weights) {
            v_row[j] = w / total;
        }
    }

    if k2 != 1 {
        v = (0..n)
            .map(|i| {
                let nn = ranking.nearest(i, k2);
                let mut acc = vec![0.0; n];
                for &j in nn {
                    for (a, x) in acc.iter_mut().zip(&v[j]) {
                        *a += x;
                    }
                }
                acc.iter().map(|a| a / nn.len() as f64).collect()
            })
            .collect();
    }

    let out = (0..nq)
        .map(|i| {
            (0..gallery.len())
                .map(|g| {
                    let j = nq + g;
                    let shared: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a.min(*b)).sum();
                    let jaccard = 1.0 - shared / (2.0 - shared);
                    jaccard * (1.0 - lambda) + raw[i][j] * lambda
                })
                .collect()
        })
        .collect();
    Ok(out)
}
