//! Re-id training objectives as plain math: batch-hard triplet loss,
//! label-smoothed cross entropy with analytic gradients, the cosine
//! excitation schedule and the K x L batch sampler.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("epoch {m} outside [0, {total}]")]
    OutOfRange { m: i64, total: i64 },
    #[error("need {needed} identities, dataset has {available}")]
    InsufficientIdentities { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Row-major feature matrix with one identity label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Vec<Vec<f64>>,
    pub ids: Vec<u64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss, averaged over anchors.
pub fn batch_hard_triplet(batch: &LabeledBatch, margin: f64) -> Result<f64, LossError> {
    Ok(batch_hard_triplet_grad(batch, margin)?.0)
}

/// Loss and its gradient with respect to every feature row. Where a
/// distance is zero its (sub)gradient is taken as zero.
pub fn batch_hard_triplet_grad(batch: &LabeledBatch, margin: f64) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let n = batch.features.len();
    if batch.ids.len() != n {
        return Err(LossError::Shape(format!("{n} feature rows but {} ids", batch.ids.len())));
    }
    if !(margin >= 0.0) {
        return Err(LossError::InvalidParameter(format!("margin {margin} must be >= 0")));
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for id in &batch.ids {
        *counts.entry(*id).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(LossError::DegenerateBatch("batch holds a single identity".into()));
    }
    if let Some((id, _)) = counts.iter().find(|(_, c)| **c < 2) {
        return Err(LossError::DegenerateBatch(format!("identity {id} has a single sample")));
    }
    let d = batch.features[0].len();
    if batch.features.iter().any(|f| f.len() != d) {
        return Err(LossError::Shape("ragged feature rows".into()));
    }

    let f = &batch.features;
    let mut grad = vec![vec![0.0; d]; n];
    let mut total = 0.0;
    // d||x - y|| / dx, scaled by `w`, added to x and subtracted from y
    let push = |grad: &mut [Vec<f64>], x: usize, y: usize, w: f64| {
        let len = dist(&f[x], &f[y]);
        if len == 0.0 {
            return;
        }
        for k in 0..d {
            let g = w * (f[x][k] - f[y][k]) / len;
            grad[x][k] += g;
            grad[y][k] -= g;
        }
    };
    for a in 0..n {
        let mut hardest_pos = (f64::NEG_INFINITY, a);
        let mut hardest_neg = (f64::INFINITY, a);
        for j in 0..n {
            if j == a {
                continue;
            }
            let dj = dist(&f[a], &f[j]);
            if batch.ids[j] == batch.ids[a] {
                if dj > hardest_pos.0 {
                    hardest_pos = (dj, j);
                }
            } else if dj < hardest_neg.0 {
                hardest_neg = (dj, j);
            }
        }
        let hinge = margin + hardest_pos.0 - hardest_neg.0;
        if hinge > 0.0 {
            total += hinge;
            push(&mut grad, a, hardest_pos.1, 1.0 / n as f64);
            push(&mut grad, a, hardest_neg.1, -1.0 / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTarget {
    pub y: Vec<f64>,
    pub true_class: usize,
    pub epsilon: f64,
}

pub fn smooth_targets(c: usize, num_classes: usize, epsilon: f64) -> Result<SmoothedTarget, LossError> {
    if num_classes < 2 || c >= num_classes {
        return Err(LossError::InvalidParameter(format!("class {c} of {num_classes}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(LossError::InvalidParameter(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let off = epsilon / num_classes as f64;
    let mut y = vec![off; num_classes];
    // the complement of the off-class mass, so the row sums to exactly 1
    y[c] = 1.0 - off * (num_classes - 1) as f64;
    Ok(SmoothedTarget { y, true_class: c, epsilon })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// C x D
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearClassifier { w: vec![vec![0.0; dim]; classes], b: vec![0.0; classes] }
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.b).map(|(row, bj)| row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + bj).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeGradients {
    pub features: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn check_ce_shapes(features: &[Vec<f64>], targets: &[SmoothedTarget], clf: &LinearClassifier) -> Result<(), LossError> {
    if features.len() != targets.len() || features.is_empty() {
        return Err(LossError::Shape(format!("{} feature rows, {} targets", features.len(), targets.len())));
    }
    let c = clf.b.len();
    let d = features[0].len();
    if clf.w.len() != c || clf.w.iter().any(|r| r.len() != d) || features.iter().any(|f| f.len() != d) {
        return Err(LossError::Shape("classifier and features disagree".into()));
    }
    if targets.iter().any(|t| t.y.len() != c) {
        return Err(LossError::Shape(format!("targets must have {c} classes")));
    }
    Ok(())
}

pub fn smoothed_cross_entropy(features: &[Vec<f64>], targets: &[SmoothedTarget], clf: &LinearClassifier) -> Result<f64, LossError> {
    Ok(smoothed_cross_entropy_grad(features, targets, clf)?.0)
}

#[allow(clippy::needless_range_loop)]
pub fn smoothed_cross_entropy_grad(
    features: &[Vec<f64>],
    targets: &[SmoothedTarget],
    clf: &LinearClassifier,
) -> Result<(f64, CeGradients), LossError> {
    check_ce_shapes(features, targets, clf)?;
    let n = features.len() as f64;
    let (c, d) = (clf.b.len(), features[0].len());
    let mut grads = CeGradients { features: vec![vec![0.0; d]; features.len()], w: vec![vec![0.0; d]; c], b: vec![0.0; c] };
    let mut loss = 0.0;
    for (i, (f, t)) in features.iter().zip(targets).enumerate() {
        let logp = log_softmax(&clf.logits(f));
        loss -= t.y.iter().zip(&logp).map(|(y, lp)| y * lp).sum::<f64>();
        let sum_y: f64 = t.y.iter().sum();
        for j in 0..c {
            // d/dz_j of -sum_k y_k log p_k
            let dz = (logp[j].exp() * sum_y - t.y[j]) / n;
            grads.b[j] += dz;
            for k in 0..d {
                grads.w[j][k] += dz * f[k];
                grads.features[i][k] += dz * clf.w[j][k];
            }
        }
    }
    Ok((loss / n, grads))
}

/// `0.5 (1 + cos(pi m / M))`.
pub fn excitation_schedule(m: i64, total: i64) -> Result<f64, LossError> {
    if total < 1 || m < 0 || m > total {
        return Err(LossError::OutOfRange { m, total });
    }
    Ok(0.5 * (1.0 + (std::f64::consts::PI * m as f64 / total as f64).cos()))
}

/// One identity's share of a batch: a track and `L` of its frame indices in
/// temporal order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchEntry {
    pub id: u64,
    pub track: usize,
    pub frames: Vec<usize>,
}

/// Picks `k` distinct identities, one random track each, and `l` frames per
/// track (with replacement when the track is shorter than `l`).
/// `dataset` maps identity to tracks, each track being frame timestamps.
pub fn sample_batch(dataset: &BTreeMap<u64, Vec<Vec<f64>>>, k: usize, l: usize, seed: u64) -> Result<Vec<BatchEntry>, LossError> {
    if k == 0 || l == 0 {
        return Err(LossError::InvalidParameter("K and L must be positive".into()));
    }
    let usable: Vec<u64> =
        dataset.iter().filter(|(_, tracks)| tracks.iter().any(|t| !t.is_empty())).map(|(id, _)| *id).collect();
    if usable.len() < k {
        return Err(LossError::InsufficientIdentities { needed: k, available: usable.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<u64> = usable.choose_multiple(&mut rng, k).copied().collect();
    let mut plan = Vec::with_capacity(k);
    for id in ids {
        let tracks: Vec<usize> = (0..dataset[&id].len()).filter(|&t| !dataset[&id][t].is_empty()).collect();
        let track = *tracks.choose(&mut rng).expect("usable identity has a track");
        let stamps = &dataset[&id][track];
        let mut frames: Vec<usize> = if stamps.len() >= l {
            let mut all: Vec<usize> = (0..stamps.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(l);
            all
        } else {
            (0..l).map(|_| rng.random_range(0..stamps.len())).collect()
        };
        frames.sort_by(|a, b| stamps[*a].total_cmp(&stamps[*b]).then(a.cmp(b)));
        plan.push(BatchEntry { id, track, frames });
    }
    Ok(plan)
}

/// Worst relative error seen by [`gradient_check`] for each objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckReport {
    pub instances: usize,
    pub triplet_max_rel_err: f64,
    pub ce_max_rel_err: f64,
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(params: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + h;
            let up = f(params);
            params[i] = orig - h;
            let down = f(params);
            params[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn unflatten(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Compares both objectives' analytic gradients with central differences on
/// `instances` random problems (D <= 8, N <= 16).
pub fn gradient_check(instances: usize, seed: u64) -> GradientCheckReport {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientCheckReport { instances, triplet_max_rel_err: 0.0, ce_max_rel_err: 0.0 };
    let mut done = 0;
    while done < instances {
        let d = rng.random_range(1..=8);
        let ids_n = rng.random_range(2..=4usize);
        let per = rng.random_range(2..=4usize);
        let ids: Vec<u64> = (0..ids_n * per).map(|i| (i / per) as u64).collect();
        let n = ids.len();
        let flat: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let margin = rng.random_range(0.0..1.0);

        let batch = LabeledBatch { features: unflatten(&flat, d), ids: ids.clone() };
        let (loss, g) = batch_hard_triplet_grad(&batch, margin).expect("valid batch");
        // central differences are meaningless at a kink; resample those
        if !triplet_smooth_at(&batch, margin, 10.0 * H) || loss == 0.0 {
            continue;
        }
        let mut p = flat.clone();
        let numeric = central_diff(&mut p, H, |x| {
            batch_hard_triplet(&LabeledBatch { features: unflatten(x, d), ids: ids.clone() }, margin).expect("valid batch")
        });
        let analytic: Vec<f64> = g.concat();
        report.triplet_max_rel_err = report.triplet_max_rel_err.max(rel_err(&analytic, &numeric));

        let c = rng.random_range(2..=5usize);
        let feats = unflatten(&flat, d);
        let targets: Vec<SmoothedTarget> =
            (0..n).map(|_| smooth_targets(rng.random_range(0..c), c, rng.random_range(0.0..0.5)).expect("valid target")).collect();
        let clf = LinearClassifier {
            w: (0..c).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            b: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let (_, cg) = smoothed_cross_entropy_grad(&feats, &targets, &clf).expect("valid shapes");
        let mut p = flat.clone();
        let num_f = central_diff(&mut p, H, |x| smoothed_cross_entropy(&unflatten(x, d), &targets, &clf).expect("valid shapes"));
        let mut wflat = clf.w.concat();
        let num_w = central_diff(&mut wflat, H, |x| {
            let clf = LinearClassifier { w: unflatten(x, d), b: clf.b.clone() };
            smoothed_cross_entropy(&feats, &targets, &clf).expect("valid shapes")
        });
        let mut bflat = clf.b.clone();
        let num_b = central_diff(&mut bflat, H, |x| {
            let clf = LinearClassifier { w: clf.w.clone(), b: x.to_vec() };
            smoothed_cross_entropy(&feats, &targets, &clf).expect("valid shapes")
        });
        for (a, num) in [(cg.features.concat(), num_f), (cg.w.concat(), num_w), (cg.b.clone(), num_b)] {
            report.ce_max_rel_err = report.ce_max_rel_err.max(rel_err(&a, &num));
        }
        done += 1;
    }
    report
}

/// True when no hinge sits within `tol` of zero and every hardest
/// positive/negative is unique by more than `tol`.
fn triplet_smooth_at(batch: &LabeledBatch, margin: f64, tol: f64) -> bool {
    let f = &batch.features;
    for a in 0..f.len() {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for j in (0..f.len()).filter(|&j| j != a) {
            let dj = dist(&f[a], &f[j]);
            if dj < tol {
                return false;
            }
            if batch.ids[j] == batch.ids[a] {
                pos.push(dj);
            } else {
                neg.push(dj);
            }
        }
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(f64::total_cmp);
        if pos.len() > 1 && pos[0] - pos[1] < tol || neg.len() > 1 && neg[1] - neg[0] < tol {
            return false;
        }
        if (margin + pos[0] - neg[0]).abs() < tol {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_d(v: &[f64], ids: &[u64]) -> LabeledBatch {
        LabeledBatch { features: v.iter().map(|x| vec![*x]).collect(), ids: ids.to_vec() }
    }

    #[test]
    fn triplet_examples() {
        let same = LabeledBatch { features: vec![vec![0.5, 0.5]; 4], ids: vec![1, 1, 2, 2] };
        assert!((batch_hard_triplet(&same, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(batch_hard_triplet(&one_d(&[0.0, 0.1, 1.0, 1.1], &[1, 1, 2, 2]), 0.3).unwrap(), 0.0);
        let l = batch_hard_triplet(&one_d(&[0.0, 1.0, 0.5, 1.5], &[1, 1, 2, 2]), 0.3).unwrap();
        assert!((l - 0.8).abs() < 1e-12, "{l}");
    }

    #[test]
    fn triplet_errors() {
        assert!(matches!(batch_hard_triplet(&one_d(&[0.0, 1.0], &[1, 1]), 0.3), Err(LossError::DegenerateBatch(_))));
        assert!(matches!(batch_hard_triplet(&one_d(&[0.0, 1.0, 2.0], &[1, 1, 2]), 0.3), Err(LossError::DegenerateBatch(_))));
    }

    #[test]
    fn targets() {
        assert_eq!(smooth_targets(1, 3, 0.0).unwrap().y, vec![0.0, 1.0, 0.0]);
        let t = smooth_targets(0, 2, 0.1).unwrap();
        assert!((t.y[0] - 0.95).abs() < 1e-15 && (t.y[1] - 0.05).abs() < 1e-15);
        assert!(smooth_targets(3, 3, 0.1).is_err());
        assert!(smooth_targets(0, 1, 0.1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let clf = LinearClassifier::zeros(2, 3);
        let l = smoothed_cross_entropy(&[vec![0.3, -1.0, 2.0]], &[smooth_targets(0, 2, 0.0).unwrap()], &clf).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let f = vec![vec![0.2, 0.4], vec![-1.0, 0.5]];
        let t = vec![smooth_targets(0, 3, 0.1).unwrap(), smooth_targets(2, 3, 0.1).unwrap()];
        let clf = LinearClassifier { w: vec![vec![1.0, 2.0], vec![-0.5, 0.1], vec![0.3, 0.3]], b: vec![0.1, 0.2, 0.3] };
        let shifted = LinearClassifier { b: clf.b.iter().map(|b| b + 5.0).collect(), ..clf.clone() };
        let (a, b) = (smoothed_cross_entropy(&f, &t, &clf).unwrap(), smoothed_cross_entropy(&f, &t, &shifted).unwrap());
        assert!((a - b).abs() < 1e-12);
        // large logits stay finite
        let big = LinearClassifier { b: vec![1000.0, -1000.0, 0.0], ..clf };
        assert!(smoothed_cross_entropy(&f, &t, &big).unwrap().is_finite());
    }

    #[test]
    fn schedule() {
        assert_eq!(excitation_schedule(0, 10).unwrap(), 1.0);
        assert_eq!(excitation_schedule(10, 10).unwrap(), 0.0);
        assert_eq!(excitation_schedule(5, 10).unwrap(), 0.5);
        assert_eq!(excitation_schedule(11, 10), Err(LossError::OutOfRange { m: 11, total: 10 }));
        assert!(excitation_schedule(-1, 10).is_err());
        assert!(excitation_schedule(0, 0).is_err());
        for total in 1..40 {
            let v: Vec<f64> = (0..=total).map(|m| excitation_schedule(m, total).unwrap()).collect();
            assert!(v.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    fn toy_dataset() -> BTreeMap<u64, Vec<Vec<f64>>> {
        let mut d = BTreeMap::new();
        d.insert(1, vec![vec![3.0, 1.0, 2.0, 0.5]]);
        d.insert(2, vec![vec![], vec![9.0, 8.0, 7.0]]);
        d.insert(3, vec![vec![0.1]]);
        d.insert(4, vec![vec![]]);
        d
    }

    #[test]
    fn sampler() {
        let d = toy_dataset();
        let single = sample_batch(&d, 1, 1, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].frames.len(), 1);
        assert_eq!(sample_batch(&d, 3, 2, 9).unwrap(), sample_batch(&d, 3, 2, 9).unwrap());
        for seed in 0..50 {
            let plan = sample_batch(&d, 2, 2, seed).unwrap();
            assert_ne!(plan[0].id, plan[1].id);
            for e in &plan {
                let stamps = &d[&e.id][e.track];
                assert!(!stamps.is_empty());
                assert!(e.frames.windows(2).all(|w| stamps[w[0]] <= stamps[w[1]]));
            }
        }
        assert_eq!(sample_batch(&d, 4, 1, 0), Err(LossError::InsufficientIdentities { needed: 4, available: 3 }));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let r = gradient_check(60, 11);
        assert!(r.triplet_max_rel_err <= 1e-5, "{r:?}");
        assert!(r.ce_max_rel_err <= 1e-5, "{r:?}");
    }

    proptest! {
        #[test]
        fn triplet_nonnegative(feats in proptest::collection::vec(-2.0f64..2.0, 8), margin in 0.0f64..1.0) {
            let b = one_d(&feats, &[1, 1, 2, 2, 3, 3, 3, 1]);
            prop_assert!(batch_hard_triplet(&b, margin).unwrap() >= 0.0);
        }

        #[test]
        fn targets_sum_to_one(c in 0usize..50, extra in 1usize..50, eps in 0.0f64..=1.0) {
            let t = smooth_targets(c, c + extra + 1, eps).unwrap();
            prop_assert!((t.y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn separated_batches_have_zero_loss(gap in 0.31f64..5.0, spread in 0.0f64..0.5) {
            let b = one_d(&[0.0, spread, spread + gap + spread, 2.0 * spread + gap + spread], &[1, 1, 2, 2]);
            prop_assert_eq!(batch_hard_triplet(&b, 0.3).unwrap(), 0.0);
        }
    }
}
