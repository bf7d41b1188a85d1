//! CLEAR-MOT accuracy and identity measures (IDP, IDR, IDF1) over single-
//! or multi-camera trajectories.
//!
//! A frame is keyed by `(camera, frame)`. Multi-camera inputs carry global
//! ids, so an identity is matched across the union of all camera frames.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment;
use crate::geo::CameraId;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("id {id} has two boxes in camera {camera} frame {frame}")]
    DuplicateBox { id: u64, camera: CameraId, frame: u64 },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Box as `[x, y, w, h]`.
pub type Tlwh = [f64; 4];

pub fn iou_tlwh(a: &Tlwh, b: &Tlwh) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

type FrameKey = (CameraId, u64);

/// Boxes per identity, at most one per `(camera, frame)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectorySet {
    by_id: BTreeMap<u64, BTreeMap<FrameKey, Tlwh>>,
}

impl TrajectorySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u64, camera: CameraId, frame: u64, tlwh: Tlwh) -> Result<(), MetricsError> {
        let slot = self.by_id.entry(id).or_default();
        let key = (camera, frame);
        if slot.contains_key(&key) {
            return Err(MetricsError::DuplicateBox { id, camera: key.0, frame });
        }
        slot.insert(key, tlwh);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_id.keys().copied()
    }

    pub fn num_boxes(&self) -> usize {
        self.by_id.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn boxes(&self, id: u64) -> Option<&BTreeMap<(CameraId, u64), Tlwh>> {
        self.by_id.get(&id)
    }

    /// Every box grouped by `(camera, frame)`, ids ascending within a frame.
    fn by_frame(&self) -> BTreeMap<&FrameKey, Vec<(u64, &Tlwh)>> {
        let mut out: BTreeMap<&FrameKey, Vec<(u64, &Tlwh)>> = BTreeMap::new();
        for (id, boxes) in &self.by_id {
            for (k, b) in boxes {
                out.entry(k).or_default().push((*id, b));
            }
        }
        out
    }

    /// Renames ids so that identities in different cameras never share an
    /// id. Used to score single-camera tracking, where ids are camera-local.
    pub fn split_by_camera(&self) -> TrajectorySet {
        let mut keys: BTreeMap<(CameraId, u64), u64> = BTreeMap::new();
        let mut out = TrajectorySet::new();
        for (id, boxes) in &self.by_id {
            for ((cam, frame), b) in boxes {
                let next = keys.len() as u64 + 1;
                let new_id = *keys.entry((cam.clone(), *id)).or_insert(next);
                out.by_id.entry(new_id).or_default().insert((cam.clone(), *frame), *b);
            }
        }
        out
    }

    /// Applies `f` to every id. `f` must be injective.
    pub fn rename(&self, f: impl Fn(u64) -> u64) -> TrajectorySet {
        TrajectorySet { by_id: self.by_id.iter().map(|(id, b)| (f(*id), b.clone())).collect() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearCounts {
    pub num_gt: usize,
    pub matches: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub id_switches: usize,
    pub mota: f64,
}

const NO_MATCH: f64 = 1e6;

/// CLEAR-MOT counting with per-camera carry-over of previous matches.
pub fn evaluate_mota(gt: &TrajectorySet, pred: &TrajectorySet, iou_thresh: f64) -> ClearCounts {
    let gt_frames = gt.by_frame();
    let pred_frames = pred.by_frame();
    let keys: BTreeSet<&FrameKey> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();

    let mut c = ClearCounts::default();
    // camera -> gt id -> pred id it was last matched to
    let mut last: BTreeMap<&CameraId, BTreeMap<u64, u64>> = BTreeMap::new();
    let empty = Vec::new();
    for key in keys {
        let g = gt_frames.get(key).unwrap_or(&empty);
        let p = pred_frames.get(key).unwrap_or(&empty);
        let prev = last.entry(&key.0).or_default();
        let mut g_done = vec![false; g.len()];
        let mut p_done = vec![false; p.len()];
        let mut matched = 0;

        for (gi, (gid, gb)) in g.iter().enumerate() {
            let Some(pid) = prev.get(gid) else { continue };
            if let Some(pi) = p.iter().position(|(id, _)| id == pid) {
                if !p_done[pi] && iou_tlwh(gb, p[pi].1) >= iou_thresh {
                    g_done[gi] = true;
                    p_done[pi] = true;
                    matched += 1;
                }
            }
        }

        let g_left: Vec<usize> = (0..g.len()).filter(|&i| !g_done[i]).collect();
        let p_left: Vec<usize> = (0..p.len()).filter(|&i| !p_done[i]).collect();
        if !g_left.is_empty() && !p_left.is_empty() {
            let cost: Vec<Vec<f64>> = g_left
                .iter()
                .map(|&gi| {
                    p_left
                        .iter()
                        .map(|&pi| {
                            let v = iou_tlwh(g[gi].1, p[pi].1);
                            if v >= iou_thresh {
                                1.0 - v
                            } else {
                                NO_MATCH
                            }
                        })
                        .collect()
                })
                .collect();
            for (r, col) in assignment::solve(&cost) {
                if cost[r][col] >= NO_MATCH {
                    continue;
                }
                let (gid, pid) = (g[g_left[r]].0, p[p_left[col]].0);
                if prev.get(&gid).is_some_and(|&old| old != pid) {
                    c.id_switches += 1;
                }
                prev.insert(gid, pid);
                matched += 1;
            }
        }
        c.num_gt += g.len();
        c.matches += matched;
        c.fn_ += g.len() - matched;
        c.fp += p.len() - matched;
    }
    let errors = (c.fp + c.fn_ + c.id_switches) as f64;
    c.mota = 1.0 - errors / c.num_gt.max(1) as f64;
    c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityCounts {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    pub idp: f64,
    pub idr: f64,
    pub idf1: f64,
}

impl IdentityCounts {
    fn from_tp(idtp: usize, num_gt: usize, num_pred: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        if num_gt == 0 && num_pred == 0 {
            return IdentityCounts { idp: 1.0, idr: 1.0, idf1: 1.0, ..Default::default() };
        }
        IdentityCounts {
            idtp,
            idfp: num_pred - idtp,
            idfn: num_gt - idtp,
            idp: ratio(idtp, num_pred),
            idr: ratio(idtp, num_gt),
            idf1: ratio(2 * idtp, num_gt + num_pred),
        }
    }
}

/// Number of `(camera, frame)` where each gt/pred id pair overlaps enough.
/// Rows follow `gt.ids()`, columns `pred.ids()`.
pub fn overlap_counts(gt: &TrajectorySet, pred: &TrajectorySet, iou_thresh: f64) -> Vec<Vec<usize>> {
    let pred_ids: Vec<u64> = pred.ids().collect();
    let col: BTreeMap<u64, usize> = pred_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let pred_frames = pred.by_frame();
    gt.by_id
        .values()
        .map(|boxes| {
            let mut row = vec![0; pred_ids.len()];
            for (key, gb) in boxes {
                for (pid, pb) in pred_frames.get(key).into_iter().flatten() {
                    if iou_tlwh(gb, pb) >= iou_thresh {
                        row[col[pid]] += 1;
                    }
                }
            }
            row
        })
        .collect()
}

/// Identity measures under the id correspondence maximizing matched boxes.
pub fn evaluate_identity(gt: &TrajectorySet, pred: &TrajectorySet, iou_thresh: f64) -> IdentityCounts {
    let m = overlap_counts(gt, pred, iou_thresh);
    let best = m.iter().flatten().copied().max().unwrap_or(0);
    let idtp = if best == 0 {
        0
    } else {
        let cost: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|&x| (best - x) as f64).collect()).collect();
        assignment::solve(&cost).into_iter().map(|(r, c)| m[r][c]).sum()
    };
    IdentityCounts::from_tp(idtp, gt.num_boxes(), pred.num_boxes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotSummary {
    pub mota: f64,
    pub idp: f64,
    pub idr: f64,
    pub idf1: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub id_switches: usize,
    pub num_gt: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

pub fn evaluate(gt: &TrajectorySet, pred: &TrajectorySet, iou_thresh: f64) -> MotSummary {
    let c = evaluate_mota(gt, pred, iou_thresh);
    let i = evaluate_identity(gt, pred, iou_thresh);
    MotSummary {
        mota: c.mota,
        idp: i.idp,
        idr: i.idr,
        idf1: i.idf1,
        fp: c.fp,
        fn_: c.fn_,
        id_switches: c.id_switches,
        num_gt: c.num_gt,
        idtp: i.idtp,
        idfp: i.idfp,
        idfn: i.idfn,
    }
}

impl MotSummary {
    /// Fixed-order, human-readable table.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8} {:>8} {:>8}\n",
            "IDF1", "IDP", "IDR", "MOTA", "FP", "FN", "IDSW", "GT",
            self.idf1, self.idp, self.idr, self.mota, self.fp, self.fn_, self.id_switches, self.num_gt
        )
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, MetricsError> {
    s.trim().parse().map_err(|_| MetricsError::Format { line, msg: format!("not a number: {s:?}") })
}

fn parse_u64(s: &str, line: usize) -> Result<u64, MetricsError> {
    let v = parse_f64(s, line)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(MetricsError::Format { line, msg: format!("not a non-negative integer: {s:?}") });
    }
    Ok(v as u64)
}

fn records(reader: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader)
}

/// MOTChallenge-shaped rows `frame,id,x,y,w,h,...` for one camera. Rows with
/// a zero in the optional 7th (consider) column are skipped.
pub fn read_mot_csv(reader: impl Read, camera: &CameraId) -> Result<TrajectorySet, MetricsError> {
    let mut set = TrajectorySet::new();
    for (i, rec) in records(reader).records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if rec.len() < 6 {
            return Err(MetricsError::Format { line, msg: format!("expected at least 6 fields, got {}", rec.len()) });
        }
        if rec.get(6).is_some_and(|v| v.trim() == "0") {
            continue;
        }
        let tlwh = [parse_f64(&rec[2], line)?, parse_f64(&rec[3], line)?, parse_f64(&rec[4], line)?, parse_f64(&rec[5], line)?];
        set.insert(parse_u64(&rec[1], line)?, camera.clone(), parse_u64(&rec[0], line)?, tlwh)?;
    }
    Ok(set)
}

/// Rows `camera,frame,id,x,y,w,h,...` as written for track outputs.
pub fn read_camera_csv(reader: impl Read) -> Result<TrajectorySet, MetricsError> {
    let mut set = TrajectorySet::new();
    for (i, rec) in records(reader).records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if rec.len() < 7 {
            return Err(MetricsError::Format { line, msg: format!("expected at least 7 fields, got {}", rec.len()) });
        }
        let tlwh = [parse_f64(&rec[3], line)?, parse_f64(&rec[4], line)?, parse_f64(&rec[5], line)?, parse_f64(&rec[6], line)?];
        set.insert(parse_u64(&rec[2], line)?, CameraId::new(&rec[0]), parse_u64(&rec[1], line)?, tlwh)?;
    }
    Ok(set)
}
