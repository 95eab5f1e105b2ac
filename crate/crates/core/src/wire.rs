//! Serialized forms exchanged with external detectors and written to disk.
//!
//! * The external-process protocol is line-delimited JSON: one
//!   [`WireRequest`] per line on the child's stdin, one [`WireResponse`] per
//!   line on its stdout. Responses may come back in any order and are
//!   correlated by `request_id`.
//! * A [`DetectionDocument`] holds one image's detections grouped by region.
//!   The replay backend reads it, `detect` writes it (with a single
//!   full-frame region), and `eval` consumes it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassRegistry;
use crate::geometry::{BBox, GeometryError, ScoredBox};

/// Version tag written into every machine-readable document.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: u64,
    pub image_id: String,
    pub region: [f64; 4],
    pub resize_to: [u32; 2],
    pub allowed_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub request_id: u64,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Pipeline branch that produced the detection (`resized` or `tiled`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    /// `[row, col]` of the originating tile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<[u32; 2]>,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("invalid region key {0:?}")]
    RegionKey(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl WireDetection {
    pub fn from_scored(d: &ScoredBox, registry: &ClassRegistry) -> Self {
        Self {
            label: registry.label(d.class_id).unwrap_or("unknown").to_string(),
            score: d.score,
            bbox: d.bbox.to_array(),
            branch: None,
            tile: None,
        }
    }

    pub fn to_scored(&self, registry: &ClassRegistry) -> Result<ScoredBox, DecodeError> {
        let class_id = registry
            .lookup(&self.label)
            .ok_or_else(|| DecodeError::UnknownLabel(self.label.clone()))?;
        Ok(ScoredBox::new(BBox::try_from(self.bbox)?, class_id, self.score)?)
    }
}

/// Key under which a region's detections are stored: `x_min,y_min,x_max,y_max`.
pub fn region_key(region: &BBox) -> String {
    let [a, b, c, d] = region.to_array();
    format!("{a},{b},{c},{d}")
}

pub fn parse_region_key(key: &str) -> Option<BBox> {
    let v: Vec<f64> = key.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    let arr: [f64; 4] = v.try_into().ok()?;
    BBox::try_from(arr).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDocument {
    pub version: u32,
    pub image_id: String,
    /// Region key → detections in region-local pixels.
    pub regions: BTreeMap<String, Vec<WireDetection>>,
}

impl DetectionDocument {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            image_id: image_id.into(),
            regions: BTreeMap::new(),
        }
    }

    /// All detections moved into global coordinates.
    pub fn global_detections(&self, registry: &ClassRegistry) -> Result<Vec<ScoredBox>, DecodeError> {
        let mut out = Vec::new();
        for (key, dets) in &self.regions {
            let region = parse_region_key(key).ok_or_else(|| DecodeError::RegionKey(key.clone()))?;
            for d in dets {
                let mut s = d.to_scored(registry)?;
                s.bbox = s.bbox.translate(region.x_min(), region.y_min());
                out.push(s);
            }
        }
        Ok(out)
    }
}
