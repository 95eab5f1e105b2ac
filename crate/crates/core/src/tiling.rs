//! Grid slicing of high-resolution frames.
//!
//! A [`GridSpec`] of `rows × cols` cuts a `W × H` frame into cells of
//! `floor(W / cols) × floor(H / rows)` pixels; the last column and last row
//! absorb the remainder. With zero overlap the cells partition the frame.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, ClassSet, ImageRecord};
use crate::geometry::{BBox, ScoredBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilingError {
    #[error("grid must have at least one row and one column, got {rows}x{cols}")]
    EmptyGrid { rows: u32, cols: u32 },
    #[error("{rows}x{cols} grid does not fit a {width}x{height} image")]
    TooFine {
        rows: u32,
        cols: u32,
        width: u32,
        height: u32,
    },
    #[error("unknown tile {0}")]
    UnknownTile(TileId),
    #[error("invalid grid {0:?}, expected ROWSxCOLS")]
    Syntax(String),
    #[error("min_visible_fraction must be in (0, 1], got {0}")]
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    /// Pixels each tile is grown by on every side (clipped to the frame).
    /// Non-zero overlap breaks the partition property.
    #[serde(default)]
    pub overlap: u32,
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32) -> Result<Self, TilingError> {
        Self::with_overlap(rows, cols, 0)
    }

    pub fn with_overlap(rows: u32, cols: u32, overlap: u32) -> Result<Self, TilingError> {
        if rows == 0 || cols == 0 {
            return Err(TilingError::EmptyGrid { rows, cols });
        }
        Ok(Self { rows, cols, overlap })
    }

    pub fn tile_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            overlap: 0,
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridSpec {
    type Err = TilingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| TilingError::Syntax(s.into()))?;
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| TilingError::Syntax(s.into()));
        GridSpec::new(parse(r)?, parse(c)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub row: u32,
    pub col: u32,
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileRegion {
    pub id: TileId,
    /// Global image coordinates.
    pub region: BBox,
}

impl TileRegion {
    pub fn origin(&self) -> (f64, f64) {
        (self.region.x_min(), self.region.y_min())
    }
}

/// Cell boundaries along one axis: `n + 1` cut positions.
fn cuts(extent: u32, n: u32) -> Vec<u32> {
    let cell = extent / n;
    (0..n).map(|i| i * cell).chain(std::iter::once(extent)).collect()
}

/// Tiles in row-major order.
pub fn make_grid(width: u32, height: u32, spec: GridSpec) -> Result<Vec<TileRegion>, TilingError> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(TilingError::EmptyGrid {
            rows: spec.rows,
            cols: spec.cols,
        });
    }
    if width / spec.cols == 0 || height / spec.rows == 0 {
        return Err(TilingError::TooFine {
            rows: spec.rows,
            cols: spec.cols,
            width,
            height,
        });
    }
    let xs = cuts(width, spec.cols);
    let ys = cuts(height, spec.rows);
    let ov = spec.overlap;
    let mut tiles = Vec::with_capacity(spec.tile_count());
    for row in 0..spec.rows as usize {
        for col in 0..spec.cols as usize {
            let x0 = xs[col].saturating_sub(ov);
            let y0 = ys[row].saturating_sub(ov);
            let x1 = (xs[col + 1] + ov).min(width);
            let y1 = (ys[row + 1] + ov).min(height);
            tiles.push(TileRegion {
                id: TileId {
                    row: row as u32,
                    col: col as u32,
                },
                region: BBox::new(x0.into(), y0.into(), x1.into(), y1.into())
                    .expect("grid cuts are ordered"),
            });
        }
    }
    Ok(tiles)
}

/// Rule for keeping annotations that cross tile borders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileProjectionPolicy {
    /// Minimum `clipped area / original area` for an annotation to be kept
    /// in a tile.
    pub min_visible_fraction: f64,
}

impl TileProjectionPolicy {
    pub fn new(min_visible_fraction: f64) -> Result<Self, TilingError> {
        if !(min_visible_fraction > 0.0 && min_visible_fraction <= 1.0) {
            return Err(TilingError::Fraction(min_visible_fraction));
        }
        Ok(Self {
            min_visible_fraction,
        })
    }
}

impl Default for TileProjectionPolicy {
    fn default() -> Self {
        Self {
            min_visible_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileAnnotations {
    pub tile: TileRegion,
    /// Tile-local coordinates.
    pub annotations: Vec<Annotation>,
}

/// Clips each annotation of a selected class into every tile where enough of
/// it stays visible, in tile-local coordinates. Degenerate annotations have
/// no visible area and are never projected.
pub fn project_annotations(
    record: &ImageRecord,
    tiles: &[TileRegion],
    policy: TileProjectionPolicy,
    classes: &ClassSet,
) -> Vec<TileAnnotations> {
    tiles
        .iter()
        .map(|tile| {
            let (ox, oy) = tile.origin();
            let annotations = record
                .annotations
                .iter()
                .filter(|a| classes.contains(a.class_id) && !a.bbox.is_degenerate())
                .filter_map(|a| {
                    let clipped = a.bbox.clip(&tile.region)?;
                    (clipped.area() / a.bbox.area() >= policy.min_visible_fraction).then(|| Annotation {
                        class_id: a.class_id,
                        bbox: clipped.translate(-ox, -oy),
                    })
                })
                .collect();
            TileAnnotations {
                tile: *tile,
                annotations,
            }
        })
        .collect()
}

/// Union of the tiles, i.e. the image frame the grid was built for.
pub fn grid_frame(tiles: &[TileRegion]) -> Option<BBox> {
    let first = tiles.first()?.region;
    let frame = tiles.iter().fold(first.to_array(), |acc, t| {
        let r = t.region;
        [
            acc[0].min(r.x_min()),
            acc[1].min(r.y_min()),
            acc[2].max(r.x_max()),
            acc[3].max(r.y_max()),
        ]
    });
    BBox::try_from(frame).ok()
}

/// Moves tile-local detections into global coordinates, clipping them to the
/// frame. Boxes with no area inside the frame are dropped.
pub fn remap_detections(
    tile_id: TileId,
    tiles: &[TileRegion],
    dets: &[ScoredBox],
) -> Result<Vec<ScoredBox>, TilingError> {
    let tile = tiles
        .iter()
        .find(|t| t.id == tile_id)
        .ok_or(TilingError::UnknownTile(tile_id))?;
    let frame = grid_frame(tiles).expect("tile list is non-empty");
    let (ox, oy) = tile.origin();
    Ok(dets
        .iter()
        .filter_map(|d| {
            let moved = d.bbox.translate(ox, oy);
            let bbox = if moved.is_degenerate() {
                return None;
            } else if frame.contains(&moved) {
                moved
            } else {
                moved.clip(&frame)?
            };
            Some(ScoredBox { bbox, ..*d })
        })
        .collect())
}
