//! Detection records, confidence filtering, NMS and per-tick batching.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::CameraId;
use crate::reid::Embedding;

/// Confidence floor used on the AI City data.
pub const DEFAULT_ALPHA_MIN: f64 = 0.35;
/// IoU above which two boxes are treated as the same vehicle.
pub const DEFAULT_NMS_IOU: f64 = 0.85;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("camera {0} contributes more than one frame to the batch")]
    DuplicateCamera(CameraId),
    #[error("{0} embeddings for {1} detections")]
    EmbeddingCountMismatch(usize, usize),
    #[error("malformed detection row {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VehicleClass {
    Car,
    Bus,
    Truck,
    Van,
    Suv,
    Other,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 6] =
        [VehicleClass::Car, VehicleClass::Bus, VehicleClass::Truck, VehicleClass::Van, VehicleClass::Suv, VehicleClass::Other];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: i64) -> Option<Self> {
        usize::try_from(i).ok().and_then(|i| Self::ALL.get(i).copied())
    }
}

impl FromStr for VehicleClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Self::from_index(i).ok_or_else(|| format!("class index {i} out of range"));
        }
        match s.to_ascii_lowercase().as_str() {
            "car" => Ok(VehicleClass::Car),
            "bus" => Ok(VehicleClass::Bus),
            "truck" => Ok(VehicleClass::Truck),
            "van" => Ok(VehicleClass::Van),
            "suv" => Ok(VehicleClass::Suv),
            "other" => Ok(VehicleClass::Other),
            _ => Err(format!("unknown class {s:?}")),
        }
    }
}

/// One vehicle observation `[x1, y1, x2, y2, alpha, beta]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub alpha: f64,
    pub beta: VehicleClass,
}

impl Detection {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, alpha: f64, beta: VehicleClass) -> Result<Self, IngestError> {
        let d = Detection { x1, y1, x2, y2, alpha, beta };
        d.validate()?;
        Ok(d)
    }

    pub fn from_tlwh(x: f64, y: f64, w: f64, h: f64, alpha: f64, beta: VehicleClass) -> Result<Self, IngestError> {
        Self::new(x, y, x + w, y + h, alpha, beta)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let finite = [self.x1, self.y1, self.x2, self.y2, self.alpha].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 || !(0.0..=1.0).contains(&self.alpha) {
            return Err(IngestError::InvalidDetection(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn tlwh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }
}

/// Detections of one camera at one frame, optionally with per-detection embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub camera: CameraId,
    pub frame_index: u64,
    pub timestamp: f64,
    pub detections: Vec<Detection>,
    pub embeddings: Option<Vec<Embedding>>,
}

impl FrameRecord {
    pub fn new(camera: CameraId, frame_index: u64, fps: f64, detections: Vec<Detection>) -> Self {
        FrameRecord { camera, frame_index, timestamp: frame_index as f64 / fps, detections, embeddings: None }
    }

    pub fn with_embeddings(mut self, embeddings: Vec<Embedding>) -> Result<Self, IngestError> {
        if embeddings.len() != self.detections.len() {
            return Err(IngestError::EmbeddingCountMismatch(embeddings.len(), self.detections.len()));
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    /// Keeps the detections (and aligned embeddings) at `keep`, in that order.
    pub fn retain_indices(&mut self, keep: &[usize]) {
        self.detections = keep.iter().map(|&i| self.detections[i]).collect();
        if let Some(emb) = self.embeddings.take() {
            self.embeddings = Some(keep.iter().map(|&i| emb[i].clone()).collect());
        }
    }
}

/// Frames from all cameras that are ready at one time step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TickBatch {
    pub tick: u64,
    pub frames: Vec<FrameRecord>,
}

pub fn filter_confidence(dets: &[Detection], alpha_min: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.alpha >= alpha_min).copied().collect()
}

fn confidence_indices(dets: &[Detection], alpha_min: f64) -> Vec<usize> {
    (0..dets.len()).filter(|&i| dets[i].alpha >= alpha_min).collect()
}

pub fn iou(a: &Detection, b: &Detection) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy class-agnostic NMS returning kept indices in greedy order.
pub fn nms_indices(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.alpha
            .total_cmp(&a.alpha)
            .then(a.x1.total_cmp(&b.x1))
            .then(a.y1.total_cmp(&b.y1))
            .then(i.cmp(&j))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&dets[k], &dets[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}

/// Confidence filter followed by NMS, keeping embeddings aligned.
pub fn preprocess_frame(frame: &mut FrameRecord, alpha_min: f64, iou_thresh: f64) {
    let confident = confidence_indices(&frame.detections, alpha_min);
    frame.retain_indices(&confident);
    let kept = nms_indices(&frame.detections, iou_thresh);
    frame.retain_indices(&kept);
}

pub fn batch_frames(pending: Vec<FrameRecord>, tick: u64) -> Result<TickBatch, IngestError> {
    let mut by_camera: BTreeMap<CameraId, FrameRecord> = BTreeMap::new();
    for f in pending {
        let cam = f.camera.clone();
        if by_camera.insert(cam.clone(), f).is_some() {
            return Err(IngestError::DuplicateCamera(cam));
        }
    }
    Ok(TickBatch { tick, frames: by_camera.into_values().collect() })
}

/// One row of a detection CSV: `frame,id,x,y,w,h,conf,class`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRow {
    pub frame: u64,
    pub id: i64,
    pub detection: Detection,
}

/// Reads a headerless MOTChallenge-style detection CSV in file order.
pub fn read_detection_csv(reader: impl Read) -> Result<Vec<DetectionRow>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |msg: String| IngestError::Parse { line: line + 1, msg };
        if rec.len() < 7 {
            return Err(parse_err(format!("expected at least 7 fields, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64, IngestError> {
            rec[i].parse::<f64>().map_err(|e| parse_err(format!("field {i}: {e}")))
        };
        let frame = num(0)?;
        if frame < 0.0 || frame.fract() != 0.0 {
            return Err(parse_err(format!("bad frame index {frame}")));
        }
        let beta = match rec.get(7) {
            Some(s) if !s.is_empty() => s.parse::<VehicleClass>().map_err(parse_err)?,
            _ => VehicleClass::Car,
        };
        let detection = Detection::from_tlwh(num(2)?, num(3)?, num(4)?, num(5)?, num(6)?, beta)
            .map_err(|e| parse_err(e.to_string()))?;
        rows.push(DetectionRow { frame: frame as u64, id: num(1)? as i64, detection });
    }
    Ok(rows)
}

pub fn write_detection_csv(mut w: impl Write, rows: &[DetectionRow]) -> Result<(), IngestError> {
    for r in rows {
        let [x, y, bw, bh] = r.detection.tlwh();
        writeln!(w, "{},{},{},{},{},{},{},{}", r.frame, r.id, x, y, bw, bh, r.detection.alpha, r.detection.beta.index())?;
    }
    Ok(())
}

/// Groups rows into one frame per index `0..num_frames`, attaching row-aligned embeddings.
pub fn frames_from_rows(
    camera: &CameraId,
    fps: f64,
    rows: &[DetectionRow],
    embeddings: Option<&[Embedding]>,
    num_frames: u64,
) -> Result<Vec<FrameRecord>, IngestError> {
    if let Some(e) = embeddings {
        if e.len() != rows.len() {
            return Err(IngestError::EmbeddingCountMismatch(e.len(), rows.len()));
        }
    }
    let mut frames: Vec<FrameRecord> = (0..num_frames).map(|f| FrameRecord::new(camera.clone(), f, fps, Vec::new())).collect();
    let mut embs: Vec<Vec<Embedding>> = vec![Vec::new(); num_frames as usize];
    for (i, r) in rows.iter().enumerate() {
        let Some(frame) = frames.get_mut(r.frame as usize) else { continue };
        frame.detections.push(r.detection);
        if let Some(e) = embeddings {
            embs[r.frame as usize].push(e[i].clone());
        }
    }
    if embeddings.is_some() {
        for (f, e) in frames.iter_mut().zip(embs) {
            f.embeddings = Some(e);
        }
    }
    Ok(frames)
}
