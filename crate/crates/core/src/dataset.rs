//! Pascal-VOC-style annotation ingestion and dataset statistics.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, ClassId, GeometryError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed XML: {0}")]
    Xml(#[from] roxmltree::Error),
    #[error("{element} (line {line}): {message}")]
    Structure {
        element: String,
        line: u32,
        message: String,
    },
    #[error("object #{index} ({label}): {source}")]
    Annotation {
        index: usize,
        label: String,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("duplicate image id {id:?} ({first} and {second})")]
    DuplicateId {
        id: String,
        first: String,
        second: String,
    },
    #[error("invalid class registry: {0}")]
    Registry(String),
    #[error("dataset has no images")]
    Empty,
}

fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Ordered set of class labels; a label's position is its [`ClassId`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    labels: Vec<String>,
}

impl ClassRegistry {
    /// Labels are compared case-insensitively after trimming, and must be
    /// unique under that comparison.
    pub fn new<I, S>(labels: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(|s| s.into().trim().to_string()).collect();
        if labels.is_empty() {
            return Err(DatasetError::Registry("no labels".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(DatasetError::Registry("empty label".into()));
            }
            if !seen.insert(normalize_label(l)) {
                return Err(DatasetError::Registry(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// The five power-line asset classes: tower, insulator, spacer, plate, damper.
    pub fn plad() -> Self {
        Self {
            labels: ["tower", "insulator", "spacer", "plate", "damper"]
                .map(String::from)
                .to_vec(),
        }
    }

    /// Reads one label per line; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn lookup(&self, label: &str) -> Option<ClassId> {
        let needle = normalize_label(label);
        self.labels
            .iter()
            .position(|l| normalize_label(l) == needle)
            .map(ClassId)
    }

    pub fn label(&self, id: ClassId) -> Option<&str> {
        self.labels.get(id.0).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.labels.len()).map(ClassId)
    }

    pub fn all(&self) -> ClassSet {
        self.ids().collect()
    }

    /// Parses a comma-separated label list into a [`ClassSet`].
    pub fn parse_set(&self, list: &str) -> Result<ClassSet, DatasetError> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|l| {
                self.lookup(l)
                    .ok_or_else(|| DatasetError::Registry(format!("unknown label {l:?}")))
            })
            .collect()
    }
}

/// A subset of the registry's classes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassSet(BTreeSet<ClassId>);

impl ClassSet {
    pub fn contains(&self, id: ClassId) -> bool {
        self.0.contains(&id)
    }
    pub fn iter(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.0.iter().copied()
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn is_disjoint(&self, other: &ClassSet) -> bool {
        self.0.is_disjoint(&other.0)
    }
    pub fn union(&self, other: &ClassSet) -> ClassSet {
        ClassSet(self.0.union(&other.0).copied().collect())
    }
    pub fn difference(&self, other: &ClassSet) -> ClassSet {
        ClassSet(self.0.difference(&other.0).copied().collect())
    }
    pub fn labels<'r>(&self, registry: &'r ClassRegistry) -> Vec<&'r str> {
        self.iter().filter_map(|c| registry.label(c)).collect()
    }
}

impl FromIterator<ClassId> for ClassSet {
    fn from_iter<T: IntoIterator<Item = ClassId>>(iter: T) -> Self {
        ClassSet(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: ClassId,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    pub source_path: String,
}

impl ImageRecord {
    pub fn frame(&self) -> BBox {
        BBox::frame(self.width, self.height)
    }
}

/// Non-fatal findings while parsing one annotation document.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseWarning {
    /// The object was skipped because its label is not in the registry.
    UnknownLabel { index: usize, label: String },
    /// The box overshot the image and was clamped.
    Clamped {
        index: usize,
        original: BBox,
        clamped: BBox,
    },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::UnknownLabel { index, label } => {
                write!(f, "object #{index}: unknown label {label:?}, skipped")
            }
            ParseWarning::Clamped {
                index,
                original,
                clamped,
            } => write!(f, "object #{index}: box {original} clamped to {clamped}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnnotation {
    pub record: ImageRecord,
    pub warnings: Vec<ParseWarning>,
}

fn line_of(doc: &roxmltree::Document, node: roxmltree::Node) -> u32 {
    doc.text_pos_at(node.range().start).row
}

fn structure_err(doc: &roxmltree::Document, node: roxmltree::Node, msg: impl Into<String>) -> DatasetError {
    DatasetError::Structure {
        element: node.tag_name().name().to_string(),
        line: line_of(doc, node),
        message: msg.into(),
    }
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn child_text<'a>(
    doc: &roxmltree::Document,
    node: roxmltree::Node<'a, '_>,
    name: &str,
) -> Result<&'a str, DatasetError> {
    let c = child(node, name)
        .ok_or_else(|| structure_err(doc, node, format!("missing <{name}>")))?;
    Ok(c.text().unwrap_or("").trim())
}

fn child_number<T: std::str::FromStr>(
    doc: &roxmltree::Document,
    node: roxmltree::Node,
    name: &str,
) -> Result<T, DatasetError> {
    let text = child_text(doc, node, name)?;
    text.parse().map_err(|_| {
        let c = child(node, name).unwrap_or(node);
        structure_err(doc, c, format!("expected a number, got {text:?}"))
    })
}

/// Parses one VOC-style annotation document.
///
/// The image id is the stem of the `<filename>` element. Objects with labels
/// missing from `registry` are skipped with a warning; boxes overshooting the
/// image are clamped with a warning.
pub fn parse_annotation(content: &str, registry: &ClassRegistry) -> Result<ParsedAnnotation, DatasetError> {
    let doc = roxmltree::Document::parse(content)?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(structure_err(&doc, root, "root element must be <annotation>"));
    }
    let filename = child_text(&doc, root, "filename")?;
    let image_id = Path::new(filename)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if image_id.is_empty() {
        return Err(structure_err(&doc, root, "empty <filename>"));
    }
    let source_path = child(root, "path")
        .and_then(|p| p.text())
        .map(|t| t.trim().to_string())
        .unwrap_or_else(|| filename.to_string());

    let size = child(root, "size").ok_or_else(|| structure_err(&doc, root, "missing <size>"))?;
    let width: u32 = child_number(&doc, size, "width")?;
    let height: u32 = child_number(&doc, size, "height")?;
    if width == 0 || height == 0 {
        return Err(structure_err(&doc, size, "image dimensions must be positive"));
    }
    let frame = BBox::frame(width, height);

    let mut annotations = Vec::new();
    let mut warnings = Vec::new();
    for (index, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let label = child_text(&doc, obj, "name")?.to_string();
        let bnd = child(obj, "bndbox").ok_or_else(|| structure_err(&doc, obj, "missing <bndbox>"))?;
        let coords: [f64; 4] = [
            child_number(&doc, bnd, "xmin")?,
            child_number(&doc, bnd, "ymin")?,
            child_number(&doc, bnd, "xmax")?,
            child_number(&doc, bnd, "ymax")?,
        ];
        let bbox = BBox::try_from(coords).map_err(|source| DatasetError::Annotation {
            index,
            label: label.clone(),
            source,
        })?;
        let Some(class_id) = registry.lookup(&label) else {
            warnings.push(ParseWarning::UnknownLabel { index, label });
            continue;
        };
        let clamped = bbox.clamp_to(&frame);
        if clamped != bbox {
            warnings.push(ParseWarning::Clamped {
                index,
                original: bbox,
                clamped,
            });
        }
        annotations.push(Annotation {
            class_id,
            bbox: clamped,
        });
    }

    Ok(ParsedAnnotation {
        record: ImageRecord {
            image_id,
            width,
            height,
            annotations,
            source_path,
        },
        warnings,
    })
}

fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Writes `record` as a VOC-style document that [`parse_annotation`] reads
/// back to an identical record. The `<filename>` element carries the image id
/// with a `.jpg` extension.
pub fn to_voc_xml(record: &ImageRecord, registry: &ClassRegistry) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    let _ = writeln!(s, "\t<filename>{}.jpg</filename>", escape_xml(&record.image_id));
    let _ = writeln!(s, "\t<path>{}</path>", escape_xml(&record.source_path));
    let _ = writeln!(
        s,
        "\t<size>\n\t\t<width>{}</width>\n\t\t<height>{}</height>\n\t\t<depth>3</depth>\n\t</size>",
        record.width, record.height
    );
    for a in &record.annotations {
        let label = registry.label(a.class_id).unwrap_or("unknown");
        let _ = writeln!(
            s,
            "\t<object>\n\t\t<name>{}</name>\n\t\t<bndbox>\n\t\t\t<xmin>{}</xmin>\n\t\t\t<ymin>{}</ymin>\n\t\t\t<xmax>{}</xmax>\n\t\t\t<ymax>{}</ymax>\n\t\t</bndbox>\n\t</object>",
            escape_xml(label),
            a.bbox.x_min(),
            a.bbox.y_min(),
            a.bbox.x_max(),
            a.bbox.y_max()
        );
    }
    s.push_str("</annotation>\n");
    s
}

/// Where annotation files live under a dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    /// Sub-directory holding the XML files, e.g. `Annotations`; `None` means
    /// the root itself.
    pub annotation_dir: Option<String>,
    pub extension: String,
    pub recursive: bool,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            annotation_dir: None,
            extension: "xml".into(),
            recursive: false,
        }
    }
}

/// Validated image records sorted by image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub registry: ClassRegistry,
    images: Vec<ImageRecord>,
}

impl DatasetIndex {
    pub fn new(registry: ClassRegistry, mut images: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for w in images.windows(2) {
            if w[0].image_id == w[1].image_id {
                return Err(DatasetError::DuplicateId {
                    id: w[0].image_id.clone(),
                    first: w[0].source_path.clone(),
                    second: w[1].source_path.clone(),
                });
            }
        }
        Ok(Self { registry, images })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images
            .binary_search_by(|r| r.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|r| r.image_id.as_str())
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|r| r.annotations.len()).sum()
    }

    /// Index restricted to `ids` (unknown ids are ignored).
    pub fn subset<'a, I: IntoIterator<Item = &'a str>>(&self, ids: I) -> DatasetIndex {
        let wanted: BTreeSet<&str> = ids.into_iter().collect();
        DatasetIndex {
            registry: self.registry.clone(),
            images: self
                .images
                .iter()
                .filter(|r| wanted.contains(r.image_id.as_str()))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub index: DatasetIndex,
    /// Per-file warnings, keyed by file path, in image-id order.
    pub warnings: Vec<(String, ParseWarning)>,
}

fn collect_files(dir: &Path, ext: &str, recursive: bool, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    };
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            if recursive {
                collect_files(&path, ext, recursive, out)?;
            }
        } else if path
            .extension()
            .is_some_and(|e| e.to_string_lossy().eq_ignore_ascii_case(ext))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Loads every annotation file under `root` in parallel.
///
/// Image ids are annotation file stems, so two files with the same stem are
/// an error. Output order is lexicographic by id regardless of directory
/// enumeration order.
pub fn load_dataset(root: &Path, registry: &ClassRegistry, layout: &LayoutConfig) -> Result<LoadedDataset, DatasetError> {
    let dir = match &layout.annotation_dir {
        Some(sub) => root.join(sub),
        None => root.to_path_buf(),
    };
    let mut files = Vec::new();
    collect_files(&dir, &layout.extension, layout.recursive, &mut files)?;
    files.sort();

    let parsed: Vec<(PathBuf, ParsedAnnotation)> = files
        .par_iter()
        .map(|path| {
            let content = fs::read_to_string(path).map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
            let mut p = parse_annotation(&content, registry).map_err(|e| DatasetError::File {
                path: path.clone(),
                source: Box::new(e),
            })?;
            if let Some(stem) = path.file_stem() {
                p.record.image_id = stem.to_string_lossy().into_owned();
            }
            p.record.source_path = path.to_string_lossy().into_owned();
            Ok((path.clone(), p))
        })
        .collect::<Result<_, DatasetError>>()?;

    let mut seen: HashMap<String, PathBuf> = HashMap::new();
    let mut images = Vec::with_capacity(parsed.len());
    let mut warnings = Vec::new();
    for (path, p) in parsed {
        if let Some(first) = seen.insert(p.record.image_id.clone(), path.clone()) {
            return Err(DatasetError::DuplicateId {
                id: p.record.image_id,
                first: first.display().to_string(),
                second: path.display().to_string(),
            });
        }
        let key = path.display().to_string();
        warnings.extend(p.warnings.into_iter().map(|w| (key.clone(), w)));
        images.push(p.record);
    }
    Ok(LoadedDataset {
        index: DatasetIndex::new(registry.clone(), images)?,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: String,
    pub instances: usize,
    pub instances_per_image: f64,
    pub mean_area: f64,
    /// Population standard deviation (divides by the instance count).
    pub std_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub classes: Vec<ClassStats>,
    pub total_instances: usize,
    pub images: usize,
    pub instances_per_image: f64,
}

pub fn compute_stats(index: &DatasetIndex) -> Result<DatasetStats, DatasetError> {
    if index.is_empty() {
        return Err(DatasetError::Empty);
    }
    let n_images = index.len() as f64;
    let mut areas: Vec<Vec<f64>> = vec![Vec::new(); index.registry.len()];
    for a in index.images().iter().flat_map(|r| &r.annotations) {
        areas[a.class_id.0].push(a.bbox.area());
    }
    let classes = index
        .registry
        .labels()
        .iter()
        .zip(&areas)
        .map(|(label, v)| {
            let n = v.len();
            let (mean, std) = if n == 0 {
                (0.0, 0.0)
            } else {
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            };
            ClassStats {
                label: label.clone(),
                instances: n,
                instances_per_image: n as f64 / n_images,
                mean_area: mean,
                std_area: std,
            }
        })
        .collect::<Vec<_>>();
    let total = classes.iter().map(|c| c.instances).sum();
    Ok(DatasetStats {
        classes,
        total_instances: total,
        images: index.len(),
        instances_per_image: total as f64 / n_images,
    })
}

fn sci(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    format!("{:.2}e{}", v / 10f64.powi(exp), exp)
}

impl DatasetStats {
    /// Plain-text table with instance count, density, mean and standard
    /// deviation of box area per class.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>19} {:>14} {:>14}",
            "Label", "Instances", "Instances per image", "Average Area", "Std Deviation"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<12} {:>9} {:>19.1} {:>14} {:>14}",
                c.label,
                c.instances,
                c.instances_per_image,
                sci(c.mean_area),
                sci(c.std_area)
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>19.1}   ({} images)",
            "total", self.total_instances, self.instances_per_image, self.images
        );
        s
    }
}
