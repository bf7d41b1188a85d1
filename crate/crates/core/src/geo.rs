//! Geodesy, planar pixel/world projection and the camera topology graph.
//!
//! Homographies map image pixels directly onto the (lon, lat) plane in
//! degrees. Camera scenes span well under a kilometre, so the planar
//! approximation is far below the tolerances the traffic rules work at.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius of the spherical model, in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const NEWTON_STEPS: usize = 2;
const DET_EPS: f64 = 1e-12;
const HORIZON_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("invalid coordinate lat={lat} lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("degenerate point configuration for homography estimation")]
    DegenerateConfiguration,
    #[error("point maps onto the horizon line")]
    HorizonPoint,
    #[error("homography is singular")]
    SingularHomography,
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Camera identifier, e.g. `c001`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraId(pub String);

impl CameraId {
    pub fn new(id: impl Into<String>) -> Self {
        CameraId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CameraId {
    fn from(s: &str) -> Self {
        CameraId(s.to_owned())
    }
}

/// A WGS84-style latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::InvalidCoordinate { lat, lon });
        }
        // 180 and -180 are the same meridian; keep the half-open range.
        let lon = if lon == 180.0 { -180.0 } else { lon };
        Ok(GeoPoint { lat, lon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        PixelPoint { x, y }
    }
}

/// Great-circle distance in metres on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Planar projective transform from pixels to the (lon, lat) plane.
///
/// The inverse is computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    inv: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeoError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::SingularHomography);
        }
        let m = if m[(2, 2)].abs() > DET_EPS { m / m[(2, 2)] } else { m };
        // Hadamard ratio: scale-free, so tiny degree-per-pixel matrices pass
        let col_norms: f64 = m.column_iter().map(|c| c.norm()).product();
        if col_norms == 0.0 || m.determinant().abs() / col_norms <= DET_EPS {
            return Err(GeoError::SingularHomography);
        }
        let inv = m.try_inverse().ok_or(GeoError::SingularHomography)?;
        Ok(Homography { m, inv })
    }

    pub fn identity() -> Self {
        Homography { m: Matrix3::identity(), inv: Matrix3::identity() }
    }

    /// Builds from a row-major 9-element array.
    pub fn from_row_slice(v: &[f64]) -> Result<Self, GeoError> {
        if v.len() != 9 {
            return Err(GeoError::InvalidTopology(format!("homography needs 9 values, got {}", v.len())));
        }
        Homography::new(Matrix3::from_row_slice(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse_matrix(&self) -> &Matrix3<f64> {
        &self.inv
    }

    pub fn to_row_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                out.push(self.m[(r, c)]);
            }
        }
        out
    }
}

fn apply(m: &Matrix3<f64>, x: f64, y: f64) -> Result<(f64, f64), GeoError> {
    let p = m * Vector3::new(x, y, 1.0);
    if p.z.abs() < HORIZON_EPS {
        return Err(GeoError::HorizonPoint);
    }
    Ok((p.x / p.z, p.y / p.z))
}

pub fn pixel_to_geo(h: &Homography, p: PixelPoint) -> Result<GeoPoint, GeoError> {
    let (lon, lat) = apply(&h.m, p.x, p.y)?;
    GeoPoint::new(lat, lon)
}

/// Inverse map. Geo-referenced matrices are badly conditioned (degree
/// offsets next to ~1e-7 degree/pixel terms), so the direct inverse is
/// polished with Newton steps on the forward map.
pub fn geo_to_pixel(h: &Homography, g: GeoPoint) -> Result<PixelPoint, GeoError> {
    let (mut x, mut y) = apply(&h.inv, g.lon, g.lat)?;
    let m = &h.m;
    for _ in 0..NEWTON_STEPS {
        let p = m * Vector3::new(x, y, 1.0);
        if p.z.abs() < HORIZON_EPS {
            break;
        }
        let (fx, fy) = (p.x / p.z, p.y / p.z);
        let z2 = p.z * p.z;
        let j00 = (m[(0, 0)] * p.z - p.x * m[(2, 0)]) / z2;
        let j01 = (m[(0, 1)] * p.z - p.x * m[(2, 1)]) / z2;
        let j10 = (m[(1, 0)] * p.z - p.y * m[(2, 0)]) / z2;
        let j11 = (m[(1, 1)] * p.z - p.y * m[(2, 1)]) / z2;
        let det = j00 * j11 - j01 * j10;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let (rx, ry) = (g.lon - fx, g.lat - fy);
        x += (j11 * rx - j01 * ry) / det;
        y += (j00 * ry - j10 * rx) / det;
    }
    Ok(PixelPoint { x, y })
}

/// Similarity transform taking points to zero centroid and mean distance sqrt(2).
fn hartley_transform(pts: &[(f64, f64)]) -> Result<Matrix3<f64>, GeoError> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(GeoError::DegenerateConfiguration);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized direct linear transform from pixel/geo correspondences.
pub fn estimate_homography(pairs: &[(PixelPoint, GeoPoint)]) -> Result<Homography, GeoError> {
    if pairs.len() < 4 {
        return Err(GeoError::DegenerateConfiguration);
    }
    let src: Vec<(f64, f64)> = pairs.iter().map(|(p, _)| (p.x, p.y)).collect();
    let dst: Vec<(f64, f64)> = pairs.iter().map(|(_, g)| (g.lon, g.lat)).collect();
    let t_src = hartley_transform(&src)?;
    let t_dst = hartley_transform(&dst)?;

    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let ps = t_src * Vector3::new(s.0, s.1, 1.0);
        let pd = t_dst * Vector3::new(d.0, d.1, 1.0);
        let (x, y) = (ps.x, ps.y);
        let (u, v) = (pd.x, pd.y);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a.row_mut(r0).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeoError::DegenerateConfiguration)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    let second_smallest = svd.singular_values[order[1]];
    if largest <= 0.0 || second_smallest / largest < 1e-10 {
        return Err(GeoError::DegenerateConfiguration);
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst.try_inverse().ok_or(GeoError::DegenerateConfiguration)?;
    Homography::new(t_dst_inv * hn * t_src).map_err(|_| GeoError::DegenerateConfiguration)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraInfo {
    pub id: CameraId,
    pub position: GeoPoint,
    pub homography: Homography,
    pub fps: f64,
}

fn unordered(a: &CameraId, b: &CameraId) -> (CameraId, CameraId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Cameras plus the symmetric adjacency and overlap relations between them.
///
/// Both relations store each unordered pair once, smaller id first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CameraTopology {
    cameras: BTreeMap<CameraId, CameraInfo>,
    adjacency: BTreeSet<(CameraId, CameraId)>,
    overlap: BTreeSet<(CameraId, CameraId)>,
}

impl CameraTopology {
    pub fn new(
        cameras: Vec<CameraInfo>,
        adjacent: &[(CameraId, CameraId)],
        overlap: &[(CameraId, CameraId)],
    ) -> Result<Self, GeoError> {
        let mut map = BTreeMap::new();
        for cam in cameras {
            if !(cam.fps > 0.0) || !cam.fps.is_finite() {
                return Err(GeoError::InvalidTopology(format!("camera {} has fps {}", cam.id, cam.fps)));
            }
            let id = cam.id.clone();
            if map.insert(id.clone(), cam).is_some() {
                return Err(GeoError::InvalidTopology(format!("duplicate camera id {id}")));
            }
        }
        let mut topo = CameraTopology { cameras: map, ..Default::default() };
        for (a, b) in adjacent {
            topo.check_pair(a, b)?;
            topo.adjacency.insert(unordered(a, b));
        }
        for (a, b) in overlap {
            topo.check_pair(a, b)?;
            let pair = unordered(a, b);
            if !topo.adjacency.contains(&pair) {
                return Err(GeoError::InvalidTopology(format!("overlap pair ({a}, {b}) is not adjacent")));
            }
            topo.overlap.insert(pair);
        }
        Ok(topo)
    }

    fn check_pair(&self, a: &CameraId, b: &CameraId) -> Result<(), GeoError> {
        for id in [a, b] {
            if !self.cameras.contains_key(id) {
                return Err(GeoError::UnknownCamera(id.clone()));
            }
        }
        if a == b {
            return Err(GeoError::InvalidTopology(format!("self pair ({a}, {a})")));
        }
        Ok(())
    }

    pub fn camera(&self, id: &CameraId) -> Result<&CameraInfo, GeoError> {
        self.cameras.get(id).ok_or_else(|| GeoError::UnknownCamera(id.clone()))
    }

    /// Cameras in id order.
    pub fn cameras(&self) -> impl Iterator<Item = &CameraInfo> {
        self.cameras.values()
    }

    pub fn camera_ids(&self) -> Vec<CameraId> {
        self.cameras.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn adjacent_pairs(&self) -> impl Iterator<Item = &(CameraId, CameraId)> {
        self.adjacency.iter()
    }

    pub fn overlap_pairs(&self) -> impl Iterator<Item = &(CameraId, CameraId)> {
        self.overlap.iter()
    }

    pub fn are_overlapping(&self, c1: &CameraId, c2: &CameraId) -> Result<bool, GeoError> {
        self.camera(c1)?;
        self.camera(c2)?;
        Ok(c1 != c2 && self.overlap.contains(&unordered(c1, c2)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeoError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GeoError> {
        let file: TopologyFile = serde_json::from_str(text)?;
        file.into_topology()
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile {
            cameras: self
                .cameras
                .values()
                .map(|c| CameraEntry {
                    id: c.id.clone(),
                    lat: c.position.lat,
                    lon: c.position.lon,
                    fps: c.fps,
                    homography: Some(c.homography.to_row_vec()),
                    homography_pairs: None,
                })
                .collect(),
            adjacent: self.adjacency.iter().map(|(a, b)| [a.clone(), b.clone()]).collect(),
            overlap: self.overlap.iter().map(|(a, b)| [a.clone(), b.clone()]).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("topology serializes")
    }
}

/// True iff the unordered pair is in the adjacency relation. Never true for `c1 == c2`.
pub fn are_adjacent(t: &CameraTopology, c1: &CameraId, c2: &CameraId) -> Result<bool, GeoError> {
    t.camera(c1)?;
    t.camera(c2)?;
    Ok(c1 != c2 && t.adjacency.contains(&unordered(c1, c2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyPair {
    pub px: f64,
    pub py: f64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: CameraId,
    pub lat: f64,
    pub lon: f64,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography_pairs: Option<Vec<HomographyPair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<Vec<f64>>,
}

/// On-disk topology JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub cameras: Vec<CameraEntry>,
    #[serde(default)]
    pub adjacent: Vec<[CameraId; 2]>,
    #[serde(default)]
    pub overlap: Vec<[CameraId; 2]>,
}

impl TopologyFile {
    pub fn into_topology(self) -> Result<CameraTopology, GeoError> {
        let mut cams = Vec::with_capacity(self.cameras.len());
        for entry in self.cameras {
            let homography = match (&entry.homography, &entry.homography_pairs) {
                (Some(m), _) => Homography::from_row_slice(m)?,
                (None, Some(pairs)) => {
                    let pts = pairs
                        .iter()
                        .map(|p| Ok((PixelPoint::new(p.px, p.py), GeoPoint::new(p.lat, p.lon)?)))
                        .collect::<Result<Vec<_>, GeoError>>()?;
                    if pts.len() < 4 {
                        return Err(GeoError::InvalidTopology(format!(
                            "camera {} needs at least 4 homography pairs",
                            entry.id
                        )));
                    }
                    estimate_homography(&pts)?
                }
                (None, None) => {
                    return Err(GeoError::InvalidTopology(format!("camera {} has no homography", entry.id)))
                }
            };
            cams.push(CameraInfo {
                id: entry.id,
                position: GeoPoint::new(entry.lat, entry.lon)?,
                homography,
                fps: entry.fps,
            });
        }
        let adj: Vec<_> = self.adjacent.into_iter().map(|[a, b]| (a, b)).collect();
        let ov: Vec<_> = self.overlap.into_iter().map(|[a, b]| (a, b)).collect();
        CameraTopology::new(cams, &adj, &ov)
    }
}
