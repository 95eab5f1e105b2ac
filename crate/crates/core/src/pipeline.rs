//! Dual-branch detection over one high-resolution frame.
//!
//! Branch A sees the whole frame (resized by the detector to
//! [`PipelineConfig::resized_input`]) and reports the large classes. Branch B
//! sees every cell of a grid and reports the small classes. Tile detections
//! are moved back to frame coordinates, both sets are merged, and class-wise
//! NMS removes duplicates. In [`Mode::ResizeOnly`] branch A reports every
//! class and no tiles are requested.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, InferenceRequest};
use crate::dataset::{Annotation, ClassRegistry, ClassSet, DatasetError, DatasetIndex, ImageRecord};
use crate::geometry::{nms, ScoredBox, Scored};
use crate::tiling::{make_grid, remap_detections, GridSpec, TileId, TilingError};
use crate::wire::{region_key, DetectionDocument, WireDetection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Resized,
    Tiled,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Resized => "resized",
            Branch::Tiled => "tiled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub branch: Branch,
    pub tile: Option<TileId>,
}

/// A fused detection in frame coordinates, tagged with where it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scored: ScoredBox,
    pub provenance: Provenance,
}

impl Scored for Detection {
    fn scored(&self) -> &ScoredBox {
        &self.scored
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image {image_id}, {branch} branch{}: {source}", tile.map(|t| format!(", tile {t}")).unwrap_or_default())]
    Backend {
        image_id: String,
        branch: Branch,
        tile: Option<TileId>,
        #[source]
        source: BackendError,
    },
    #[error("image {image_id}: {source}")]
    Tiling {
        image_id: String,
        #[source]
        source: TilingError,
    },
    #[error("invalid routing: {0}")]
    Routing(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Partition of the registry between the two branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRouting {
    pub tiled_classes: ClassSet,
    pub resized_classes: ClassSet,
}

impl ClassRouting {
    /// Tiled classes as given; every other class goes to the resized branch.
    pub fn new(registry: &ClassRegistry, tiled_classes: ClassSet) -> Result<Self, PipelineError> {
        let all = registry.all();
        if let Some(bad) = tiled_classes.iter().find(|c| !all.contains(*c)) {
            return Err(PipelineError::Routing(format!("class {bad} is not in the registry")));
        }
        Ok(Self {
            resized_classes: all.difference(&tiled_classes),
            tiled_classes,
        })
    }

    /// Parses a comma-separated list of tiled labels.
    pub fn from_labels(registry: &ClassRegistry, tiled: &str) -> Result<Self, PipelineError> {
        Self::new(registry, registry.parse_set(tiled)?)
    }

    /// `damper` tiled, everything else resized.
    pub fn plad_default(registry: &ClassRegistry) -> Result<Self, PipelineError> {
        Self::from_labels(registry, "damper")
    }

    pub fn validate(&self, registry: &ClassRegistry) -> Result<(), PipelineError> {
        if !self.tiled_classes.is_disjoint(&self.resized_classes) {
            return Err(PipelineError::Routing("tiled and resized classes overlap".into()));
        }
        if self.tiled_classes.union(&self.resized_classes) != registry.all() {
            return Err(PipelineError::Routing("routing does not cover the registry exactly".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Mspad,
    ResizeOnly,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mspad" => Ok(Mode::Mspad),
            "resize-only" => Ok(Mode::ResizeOnly),
            _ => Err(format!("unknown mode {s:?} (expected mspad or resize-only)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mspad => "mspad",
            Mode::ResizeOnly => "resize-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub routing: ClassRouting,
    pub grid: GridSpec,
    pub resized_input: (u32, u32),
    pub tiled_input: (u32, u32),
    pub fusion_nms_iou: f64,
}

impl PipelineConfig {
    /// 4×4 grid, dampers tiled, 512×512 detector inputs, fusion IoU 0.5.
    pub fn plad_default(registry: &ClassRegistry, mode: Mode) -> Result<Self, PipelineError> {
        Ok(Self {
            mode,
            routing: ClassRouting::plad_default(registry)?,
            grid: GridSpec::default(),
            resized_input: (512, 512),
            tiled_input: (512, 512),
            fusion_nms_iou: 0.5,
        })
    }

    pub fn validate(&self, registry: &ClassRegistry) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.fusion_nms_iou) {
            return Err(PipelineError::Routing(format!(
                "fusion IoU {} outside [0, 1]",
                self.fusion_nms_iou
            )));
        }
        if self.mode == Mode::Mspad {
            self.routing.validate(registry)?;
        }
        Ok(())
    }
}

/// Runs both branches on one image and fuses their output.
///
/// `truth` is forwarded to the backends (oracle kinds need it). The result is
/// sorted by descending score with deterministic tie-breaking.
pub fn run_image(
    record: &ImageRecord,
    config: &PipelineConfig,
    registry: &ClassRegistry,
    branch_a: &dyn Backend,
    branch_b: &dyn Backend,
    truth: Option<&[Annotation]>,
) -> Result<Vec<Detection>, PipelineError> {
    let frame = record.frame();
    let resized_classes = match config.mode {
        Mode::Mspad => config.routing.resized_classes.clone(),
        Mode::ResizeOnly => registry.all(),
    };
    let backend_err = |branch, tile, source| PipelineError::Backend {
        image_id: record.image_id.clone(),
        branch,
        tile,
        source,
    };

    let request = InferenceRequest {
        image_id: record.image_id.clone(),
        region: frame,
        resize_to: config.resized_input,
        allowed_classes: resized_classes.clone(),
    };
    let mut merged: Vec<Detection> = branch_a
        .infer(&request, truth)
        .map_err(|e| backend_err(Branch::Resized, None, e))?
        .into_iter()
        .filter(|d| resized_classes.contains(d.class_id))
        .filter_map(|d| {
            let bbox = d.bbox.clip(&frame)?;
            Some(Detection {
                scored: ScoredBox { bbox, ..d },
                provenance: Provenance {
                    branch: Branch::Resized,
                    tile: None,
                },
            })
        })
        .collect();

    if config.mode == Mode::Mspad {
        let tiled = &config.routing.tiled_classes;
        let tiles = make_grid(record.width, record.height, config.grid).map_err(|source| PipelineError::Tiling {
            image_id: record.image_id.clone(),
            source,
        })?;
        let requests: Vec<InferenceRequest> = tiles
            .iter()
            .map(|t| InferenceRequest {
                image_id: record.image_id.clone(),
                region: t.region,
                resize_to: config.tiled_input,
                allowed_classes: tiled.clone(),
            })
            .collect();
        let responses = branch_b.infer_batch(&requests, truth);
        for (tile, response) in tiles.iter().zip(responses) {
            let local: Vec<ScoredBox> = response
                .map_err(|e| backend_err(Branch::Tiled, Some(tile.id), e))?
                .into_iter()
                .filter(|d| tiled.contains(d.class_id))
                .collect();
            let global = remap_detections(tile.id, &tiles, &local).map_err(|source| PipelineError::Tiling {
                image_id: record.image_id.clone(),
                source,
            })?;
            merged.extend(global.into_iter().map(|scored| Detection {
                scored,
                provenance: Provenance {
                    branch: Branch::Tiled,
                    tile: Some(tile.id),
                },
            }));
        }
    }

    Ok(nms(&merged, config.fusion_nms_iou))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    FailFast,
    Continue,
}

#[derive(Debug, Default)]
pub struct DatasetRun {
    pub detections: BTreeMap<String, Vec<Detection>>,
    /// Images that failed under [`FailurePolicy::Continue`], in id order.
    pub failures: Vec<PipelineError>,
}

impl DatasetRun {
    /// Detections without provenance, keyed by image id.
    pub fn scored(&self) -> BTreeMap<String, Vec<ScoredBox>> {
        self.detections
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|d| d.scored).collect()))
            .collect()
    }
}

/// Runs [`run_image`] on every image in parallel, passing each image's own
/// annotations as truth. Results are keyed by image id; with
/// [`FailurePolicy::FailFast`] the error of the first failing image (in id
/// order) is returned.
pub fn run_dataset(
    index: &DatasetIndex,
    config: &PipelineConfig,
    branch_a: &dyn Backend,
    branch_b: &dyn Backend,
    policy: FailurePolicy,
) -> Result<DatasetRun, PipelineError> {
    config.validate(&index.registry)?;
    let results: Vec<(String, Result<Vec<Detection>, PipelineError>)> = index
        .images()
        .par_iter()
        .map(|r| {
            let out = run_image(r, config, &index.registry, branch_a, branch_b, Some(&r.annotations));
            (r.image_id.clone(), out)
        })
        .collect();

    let mut run = DatasetRun::default();
    for (id, res) in results {
        match res {
            Ok(dets) => {
                run.detections.insert(id, dets);
            }
            Err(e) if policy == FailurePolicy::FailFast => return Err(e),
            Err(e) => run.failures.push(e),
        }
    }
    Ok(run)
}

/// One image's fused detections as a single full-frame region document.
pub fn to_document(record: &ImageRecord, dets: &[Detection], registry: &ClassRegistry) -> DetectionDocument {
    let mut doc = DetectionDocument::new(&record.image_id);
    let wire = dets
        .iter()
        .map(|d| WireDetection {
            branch: Some(d.provenance.branch.to_string()),
            tile: d.provenance.tile.map(|t| [t.row, t.col]),
            ..WireDetection::from_scored(&d.scored, registry)
        })
        .collect();
    doc.regions.insert(region_key(&record.frame()), wire);
    doc
}
