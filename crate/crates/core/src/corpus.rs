//! Ground-truth data model for region-level PET/CT reports.
//!
//! Each annotated RoI is exchanged as a single line of eleven bracketed
//! fields separated by `" - "`:
//!
//! ```text
//! [Anatomic Region] - [Lesion Type] - [Size] - [SUVmax] - [Density] - [Morphology]
//!   - [FDG Uptake] - [Top-3 Diseases] - [Top-3 Examinations] - [Physical Region ID] - [Note]
//! ```
//!
//! [`parse_annotation`] and [`serialize_annotation`] convert between that line
//! format and [`GroundTruthRoI`]. The canonical form collapses runs of
//! whitespace inside a field to one space, so `serialize(parse(s))` is a
//! normalized copy of `s`.
//!
//! The module also does slice arithmetic for the three-way anatomical split
//! of a whole-body volume ([`compute_region_ranges`]) and places a 3D box in
//! one of those regions ([`assign_roi_to_region`]).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of bracketed fields in one annotation line.
pub const ANNOTATION_FIELDS: usize = 11;

/// Maximum items in the top-3 diagnosis and examination lists.
pub const MAX_LIST_ITEMS: usize = 3;

const SEPARATOR: &str = " - ";

/// Anatomical segment of a whole-body scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PhysicalRegion {
    HeadNeck = 1,
    Chest = 2,
    AbdomenPelvis = 3,
}

impl PhysicalRegion {
    pub const ALL: [PhysicalRegion; 3] = [
        PhysicalRegion::HeadNeck,
        PhysicalRegion::Chest,
        PhysicalRegion::AbdomenPelvis,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            PhysicalRegion::HeadNeck => "head-neck",
            PhysicalRegion::Chest => "chest",
            PhysicalRegion::AbdomenPelvis => "abdomen-pelvis",
        }
    }
}

impl TryFrom<u8> for PhysicalRegion {
    type Error = String;

    fn try_from(code: u8) -> Result<Self, Self::Error> {
        match code {
            1 => Ok(PhysicalRegion::HeadNeck),
            2 => Ok(PhysicalRegion::Chest),
            3 => Ok(PhysicalRegion::AbdomenPelvis),
            other => Err(format!("physical region must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<PhysicalRegion> for u8 {
    fn from(region: PhysicalRegion) -> u8 {
        region.code()
    }
}

impl fmt::Display for PhysicalRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.code(), self.name())
    }
}

/// Axis-aligned 3D box in voxel coordinates.
///
/// Serialized as `[x_min, y_min, z_min, x_max, y_max, z_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct BoundingBox3D {
    pub x_min: f64,
    pub y_min: f64,
    pub z_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("bounding box coordinates must be finite and non-negative: {0:?}")]
    InvalidCoordinate([f64; 6]),
    #[error("bounding box is degenerate on the {axis} axis: min {min} is not below max {max}")]
    Degenerate { axis: char, min: f64, max: f64 },
}

impl BoundingBox3D {
    pub fn new(
        x_min: f64,
        y_min: f64,
        z_min: f64,
        x_max: f64,
        y_max: f64,
        z_max: f64,
    ) -> Result<Self, BoxError> {
        Self::from_array([x_min, y_min, z_min, x_max, y_max, z_max])
    }

    pub fn from_array(coords: [f64; 6]) -> Result<Self, BoxError> {
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(BoxError::InvalidCoordinate(coords));
        }
        for (axis, k) in ['x', 'y', 'z'].into_iter().zip(0..3) {
            if coords[k] >= coords[k + 3] {
                return Err(BoxError::Degenerate {
                    axis,
                    min: coords[k],
                    max: coords[k + 3],
                });
            }
        }
        Ok(BoundingBox3D {
            x_min: coords[0],
            y_min: coords[1],
            z_min: coords[2],
            x_max: coords[3],
            y_max: coords[4],
            z_max: coords[5],
        })
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.x_min, self.y_min, self.z_min, self.x_max, self.y_max, self.z_max,
        ]
    }

    /// Extents along x, y and z.
    pub fn extents(&self) -> [f64; 3] {
        [
            self.x_max - self.x_min,
            self.y_max - self.y_min,
            self.z_max - self.z_min,
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
            (self.z_min + self.z_max) / 2.0,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.extents().iter().product()
    }
}

impl TryFrom<[f64; 6]> for BoundingBox3D {
    type Error = BoxError;

    fn try_from(coords: [f64; 6]) -> Result<Self, Self::Error> {
        Self::from_array(coords)
    }
}

impl From<BoundingBox3D> for [f64; 6] {
    fn from(b: BoundingBox3D) -> [f64; 6] {
        b.to_array()
    }
}

/// One annotated ground-truth RoI.
///
/// `suv_max_raw` keeps the annotator's text verbatim; `suv_max` is set only
/// when that text is a plain finite number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoiObject", into = "RoiObject")]
pub struct GroundTruthRoI {
    pub anatomic_region: String,
    pub lesion_type: String,
    pub size: String,
    pub suv_max_raw: String,
    pub suv_max: Option<f64>,
    pub density: String,
    pub morphology: String,
    pub fdg_uptake: String,
    pub top3_diseases: Vec<String>,
    pub top3_examinations: Vec<String>,
    pub physical_region: PhysicalRegion,
    pub note: Option<String>,
    pub bbox: Option<BoundingBox3D>,
}

impl GroundTruthRoI {
    /// The five fields compared against extracted predictions, in the order
    /// region, lesion, density, morphology, uptake.
    pub fn comparable_fields(&self) -> [&str; 5] {
        [
            &self.anatomic_region,
            &self.lesion_type,
            &self.density,
            &self.morphology,
            &self.fdg_uptake,
        ]
    }
}

/// Structured JSON form of a ground-truth RoI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoiObject {
    anatomic_region: String,
    lesion_type: String,
    #[serde(default)]
    size: String,
    #[serde(default)]
    suv_max: Option<SuvValue>,
    #[serde(default)]
    density: String,
    #[serde(default)]
    morphology: String,
    #[serde(default)]
    fdg_uptake: String,
    #[serde(default)]
    top3_diseases: Vec<String>,
    #[serde(default)]
    top3_examinations: Vec<String>,
    physical_region: PhysicalRegion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BoundingBox3D>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SuvValue {
    Number(f64),
    Text(String),
}

impl TryFrom<RoiObject> for GroundTruthRoI {
    type Error = String;

    fn try_from(o: RoiObject) -> Result<Self, Self::Error> {
        for (name, list) in [
            ("top3_diseases", &o.top3_diseases),
            ("top3_examinations", &o.top3_examinations),
        ] {
            if list.len() > MAX_LIST_ITEMS {
                return Err(format!("{name} has {} items, at most 3 allowed", list.len()));
            }
        }
        let suv_max_raw = match o.suv_max {
            None => String::new(),
            Some(SuvValue::Number(v)) => v.to_string(),
            Some(SuvValue::Text(t)) => normalize_ws(&t),
        };
        let suv_max = parse_suv(&suv_max_raw);
        let list = |items: Vec<String>| -> Vec<String> {
            items
                .iter()
                .map(|s| normalize_ws(s))
                .filter(|s| !s.is_empty())
                .collect()
        };
        Ok(GroundTruthRoI {
            anatomic_region: normalize_ws(&o.anatomic_region),
            lesion_type: normalize_ws(&o.lesion_type),
            size: normalize_ws(&o.size),
            suv_max_raw,
            suv_max,
            density: normalize_ws(&o.density),
            morphology: normalize_ws(&o.morphology),
            fdg_uptake: normalize_ws(&o.fdg_uptake),
            top3_diseases: list(o.top3_diseases),
            top3_examinations: list(o.top3_examinations),
            physical_region: o.physical_region,
            note: o.note.map(|n| normalize_ws(&n)).filter(|n| !n.is_empty()),
            bbox: o.bbox,
        })
    }
}

impl From<GroundTruthRoI> for RoiObject {
    fn from(r: GroundTruthRoI) -> Self {
        RoiObject {
            anatomic_region: r.anatomic_region,
            lesion_type: r.lesion_type,
            size: r.size,
            suv_max: Some(SuvValue::Text(r.suv_max_raw)),
            density: r.density,
            morphology: r.morphology,
            fdg_uptake: r.fdg_uptake,
            top3_diseases: r.top3_diseases,
            top3_examinations: r.top3_examinations,
            physical_region: r.physical_region,
            note: r.note,
            bbox: r.bbox,
        }
    }
}

/// Annotation line errors. `field` is 1-based; `offset` is a byte offset
/// into the input line.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("expected 11 bracketed fields, found {found} (byte {offset})")]
    FieldCount { found: usize, offset: usize },
    #[error("unbalanced bracket in field {field} at byte {offset}")]
    UnbalancedBracket { field: usize, offset: usize },
    #[error("unexpected text before field {field} at byte {offset}")]
    UnexpectedText { field: usize, offset: usize },
    #[error("field {field} at byte {offset}: physical region must be 1, 2 or 3, got {value:?}")]
    InvalidRegion {
        field: usize,
        offset: usize,
        value: String,
    },
    #[error("field {field} at byte {offset}: {count} items listed, at most 3 allowed")]
    TooManyItems {
        field: usize,
        offset: usize,
        count: usize,
    },
}

impl AnnotationError {
    pub fn field(&self) -> usize {
        match self {
            AnnotationError::FieldCount { found, .. } => found + 1,
            AnnotationError::UnbalancedBracket { field, .. }
            | AnnotationError::UnexpectedText { field, .. }
            | AnnotationError::InvalidRegion { field, .. }
            | AnnotationError::TooManyItems { field, .. } => *field,
        }
    }

    pub fn offset(&self) -> usize {
        match self {
            AnnotationError::FieldCount { offset, .. }
            | AnnotationError::UnbalancedBracket { offset, .. }
            | AnnotationError::UnexpectedText { offset, .. }
            | AnnotationError::InvalidRegion { offset, .. }
            | AnnotationError::TooManyItems { offset, .. } => *offset,
        }
    }
}

/// Collapse whitespace runs to single spaces and trim.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_suv(raw: &str) -> Option<f64> {
    let plain = !raw.is_empty()
        && raw
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '+' | '-' | 'e' | 'E'));
    if !plain {
        return None;
    }
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Split on commas that are not nested inside `()` or `[]`.
fn split_items(s: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                items.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    items.push(&s[start..]);
    items
        .into_iter()
        .map(normalize_ws)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Scan the line into raw bracketed fields, returning each field's content
/// and the byte offset where that content starts.
fn scan_fields(line: &str) -> Result<Vec<(&str, usize)>, AnnotationError> {
    let bytes = line.as_bytes();
    let skip_ws = |mut pos: usize| {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        pos
    };

    let mut fields = Vec::new();
    let mut pos = skip_ws(0);
    while pos < bytes.len() {
        let field = fields.len() + 1;
        if !fields.is_empty() {
            match bytes[pos] {
                b'-' => pos = skip_ws(pos + 1),
                b']' => return Err(AnnotationError::UnbalancedBracket { field, offset: pos }),
                _ => return Err(AnnotationError::UnexpectedText { field, offset: pos }),
            }
        }
        match bytes.get(pos) {
            Some(b'[') => {}
            Some(b']') => return Err(AnnotationError::UnbalancedBracket { field, offset: pos }),
            _ => return Err(AnnotationError::UnexpectedText { field, offset: pos }),
        }
        let open = pos;
        let mut depth = 0usize;
        let mut close = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            match b {
                b'[' => depth += 1,
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        let close = close.ok_or(AnnotationError::UnbalancedBracket {
            field,
            offset: open,
        })?;
        fields.push((&line[open + 1..close], open + 1));
        pos = skip_ws(close + 1);
    }
    Ok(fields)
}

/// Parse one bracketed annotation line.
pub fn parse_annotation(line: &str) -> Result<GroundTruthRoI, AnnotationError> {
    let fields = scan_fields(line)?;
    if fields.len() != ANNOTATION_FIELDS {
        let offset = fields
            .get(ANNOTATION_FIELDS)
            .map(|&(_, off)| off - 1)
            .unwrap_or(line.len());
        return Err(AnnotationError::FieldCount {
            found: fields.len(),
            offset,
        });
    }

    let text = |k: usize| normalize_ws(fields[k].0);
    let list = |k: usize| -> Result<Vec<String>, AnnotationError> {
        let items = split_items(fields[k].0);
        if items.len() > MAX_LIST_ITEMS {
            return Err(AnnotationError::TooManyItems {
                field: k + 1,
                offset: fields[k].1,
                count: items.len(),
            });
        }
        Ok(items)
    };

    let region_text = text(9);
    let physical_region = region_text
        .parse::<u8>()
        .ok()
        .and_then(|code| PhysicalRegion::try_from(code).ok())
        .ok_or_else(|| AnnotationError::InvalidRegion {
            field: 10,
            offset: fields[9].1,
            value: region_text.clone(),
        })?;

    let suv_max_raw = text(3);
    let note = text(10);
    Ok(GroundTruthRoI {
        anatomic_region: text(0),
        lesion_type: text(1),
        size: text(2),
        suv_max: parse_suv(&suv_max_raw),
        suv_max_raw,
        density: text(4),
        morphology: text(5),
        fdg_uptake: text(6),
        top3_diseases: list(7)?,
        top3_examinations: list(8)?,
        physical_region,
        note: (!note.is_empty()).then_some(note),
        bbox: None,
    })
}

/// Render the canonical bracketed line for a record. The bounding box is not
/// part of the line format.
pub fn serialize_annotation(roi: &GroundTruthRoI) -> String {
    let region = roi.physical_region.code().to_string();
    let diseases = roi.top3_diseases.join(", ");
    let exams = roi.top3_examinations.join(", ");
    let fields: [&str; ANNOTATION_FIELDS] = [
        &roi.anatomic_region,
        &roi.lesion_type,
        &roi.size,
        &roi.suv_max_raw,
        &roi.density,
        &roi.morphology,
        &roi.fdg_uptake,
        &diseases,
        &exams,
        &region,
        roi.note.as_deref().unwrap_or(""),
    ];
    fields
        .iter()
        .map(|f| format!("[{}]", normalize_ws(f)))
        .collect::<Vec<_>>()
        .join(SEPARATOR)
}

/// A region-level report with its annotated RoIs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRecord {
    pub report_id: String,
    pub physical_region: PhysicalRegion,
    pub report_text: String,
    pub rois: Vec<GroundTruthRoI>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportWire {
    report_id: String,
    physical_region: PhysicalRegion,
    #[serde(default)]
    report_text: String,
    #[serde(default)]
    rois: Vec<RoiEntry>,
    #[serde(default)]
    bboxes: Option<Vec<[f64; 6]>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RoiEntry {
    Line(String),
    Object(Box<GroundTruthRoI>),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report {report_id:?}, RoI {roi_index}: {source}")]
    Annotation {
        report_id: String,
        roi_index: usize,
        #[source]
        source: AnnotationError,
    },
    #[error("report {report_id:?}, RoI {roi_index}: {source}")]
    BoundingBox {
        report_id: String,
        roi_index: usize,
        #[source]
        source: BoxError,
    },
    #[error("report {report_id:?}: {bboxes} bounding boxes for {rois} RoIs")]
    BoxCount {
        report_id: String,
        bboxes: usize,
        rois: usize,
    },
    #[error("duplicate report_id {0:?}")]
    DuplicateId(String),
}

/// Parse a ground-truth corpus from its JSON text.
pub fn parse_corpus(json: &str) -> Result<Vec<ReportRecord>, CorpusError> {
    let wire: Vec<ReportWire> = serde_json::from_str(json)?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(wire.len());
    for report in wire {
        if !seen.insert(report.report_id.clone()) {
            return Err(CorpusError::DuplicateId(report.report_id));
        }
        let mut rois = Vec::with_capacity(report.rois.len());
        for (roi_index, entry) in report.rois.into_iter().enumerate() {
            let roi = match entry {
                RoiEntry::Object(roi) => *roi,
                RoiEntry::Line(line) => {
                    parse_annotation(&line).map_err(|source| CorpusError::Annotation {
                        report_id: report.report_id.clone(),
                        roi_index,
                        source,
                    })?
                }
            };
            rois.push(roi);
        }
        if let Some(boxes) = report.bboxes {
            if boxes.len() != rois.len() {
                return Err(CorpusError::BoxCount {
                    report_id: report.report_id,
                    bboxes: boxes.len(),
                    rois: rois.len(),
                });
            }
            for (roi_index, (roi, coords)) in rois.iter_mut().zip(boxes).enumerate() {
                let bbox = BoundingBox3D::from_array(coords).map_err(|source| {
                    CorpusError::BoundingBox {
                        report_id: report.report_id.clone(),
                        roi_index,
                        source,
                    }
                })?;
                roi.bbox = Some(bbox);
            }
        }
        records.push(ReportRecord {
            report_id: report.report_id,
            physical_region: report.physical_region,
            report_text: report.report_text,
            rois,
        });
    }
    Ok(records)
}

pub fn load_corpus(path: &Path) -> Result<Vec<ReportRecord>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

/// Half-open slice interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRange {
    pub start: usize,
    pub end: usize,
}

impl SliceRange {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, slice: usize) -> bool {
        (self.start..self.end).contains(&slice)
    }

    /// Length of the overlap with the continuous interval `[lo, hi]`.
    fn overlap_with(&self, lo: f64, hi: f64) -> f64 {
        (hi.min(self.end as f64) - lo.max(self.start as f64)).max(0.0)
    }
}

impl fmt::Display for SliceRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Parameters of the three-way anatomical split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub overlap_slices: usize,
    pub head_fraction: f64,
    pub chest_end_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            overlap_slices: 15,
            head_fraction: 0.25,
            chest_end_fraction: 0.60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSplit {
    pub total_slices: usize,
    pub head_neck: SliceRange,
    pub chest: SliceRange,
    pub abdomen_pelvis: SliceRange,
    pub overlap_slices: usize,
    pub head_fraction: f64,
    pub chest_end_fraction: f64,
}

impl RegionSplit {
    pub fn range(&self, region: PhysicalRegion) -> SliceRange {
        match region {
            PhysicalRegion::HeadNeck => self.head_neck,
            PhysicalRegion::Chest => self.chest,
            PhysicalRegion::AbdomenPelvis => self.abdomen_pelvis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("too few slices: {total} < {min} (4 x overlap)")]
    TooFewSlices { total: usize, min: usize },
    #[error("fractions must satisfy 0 < head_fraction < chest_end_fraction < 1, got {head} and {chest_end}")]
    FractionsNotOrdered { head: f64, chest_end: f64 },
    #[error("boundaries head_end={head_end}, chest_end={chest_end} leave a region narrower than the {overlap}-slice overlap")]
    Degenerate {
        head_end: usize,
        chest_end: usize,
        overlap: usize,
    },
    #[error("bounding box z-extent [{z_min}, {z_max}] lies outside the volume [0, {total})")]
    OutOfVolume { z_min: f64, z_max: f64, total: usize },
}

// Absorbs representation error such as 0.29 * 100 = 28.999999999999996.
const FLOOR_EPS: f64 = 1e-9;

fn floor_slice(fraction: f64, total: usize) -> usize {
    (fraction * total as f64 + FLOOR_EPS).floor() as usize
}

/// Compute the overlapping head-neck / chest / abdomen-pelvis slice ranges.
///
/// Boundaries are `head_end = floor(head_fraction * T)` and
/// `chest_end = floor(chest_end_fraction * T)`; the chest and abdomen
/// ranges each start `overlap_slices` before the previous range ends.
pub fn compute_region_ranges(
    total_slices: usize,
    config: &SplitConfig,
) -> Result<RegionSplit, SplitError> {
    let overlap = config.overlap_slices;
    let min = 4 * overlap;
    if total_slices == 0 || total_slices < min {
        return Err(SplitError::TooFewSlices {
            total: total_slices,
            min,
        });
    }
    let (head, chest_end) = (config.head_fraction, config.chest_end_fraction);
    if !(head > 0.0 && head < chest_end && chest_end < 1.0) {
        return Err(SplitError::FractionsNotOrdered { head, chest_end });
    }
    let head_end = floor_slice(head, total_slices);
    let chest_end = floor_slice(chest_end, total_slices);
    if head_end < overlap.max(1)
        || chest_end < head_end + overlap
        || chest_end >= total_slices
    {
        return Err(SplitError::Degenerate {
            head_end,
            chest_end,
            overlap,
        });
    }
    Ok(RegionSplit {
        total_slices,
        head_neck: SliceRange {
            start: 0,
            end: head_end,
        },
        chest: SliceRange {
            start: head_end - overlap,
            end: chest_end,
        },
        abdomen_pelvis: SliceRange {
            start: chest_end - overlap,
            end: total_slices,
        },
        overlap_slices: overlap,
        head_fraction: config.head_fraction,
        chest_end_fraction: config.chest_end_fraction,
    })
}

/// Pick the region for a box from its z-extent.
///
/// A region whose range fully contains `[z_min, z_max]` wins; otherwise the
/// region with the largest overlap. Ties go to the lower region code.
pub fn assign_roi_to_region(
    bbox: &BoundingBox3D,
    split: &RegionSplit,
) -> Result<PhysicalRegion, SplitError> {
    let (lo, hi) = (bbox.z_min, bbox.z_max);
    if lo >= split.total_slices as f64 {
        return Err(SplitError::OutOfVolume {
            z_min: lo,
            z_max: hi,
            total: split.total_slices,
        });
    }
    for region in PhysicalRegion::ALL {
        let range = split.range(region);
        if range.start as f64 <= lo && hi <= range.end as f64 {
            return Ok(region);
        }
    }
    let mut best = PhysicalRegion::HeadNeck;
    let mut best_overlap = split.head_neck.overlap_with(lo, hi);
    for region in [PhysicalRegion::Chest, PhysicalRegion::AbdomenPelvis] {
        let overlap = split.range(region).overlap_with(lo, hi);
        if overlap > best_overlap {
            best = region;
            best_overlap = overlap;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CECUM: &str = "[Cecum] - [Focal hypermetabolism] - [Unclear] - [12.3] - [Soft tissue density] - [Focal] - [Very intense hypermetabolism] - [Colon cancer (cecum), Inflammatory bowel disease (Crohn's disease), Appendicitis/Abscess] - [Colonoscopy and biopsy, Abdominal MRI/CT, Blood tests] - [3] - [Very intense focal FDG uptake (SUVmax 12.3) in the cecum. Highly suggestive of colon cancer...]";
    const PLACEHOLDER: &str = "[A] - [B] - [C] - [D] - [E] - [F] - [G] - [H] - [I] - [1] - [J]";

    #[test]
    fn parses_cecum_instance() {
        let roi = parse_annotation(CECUM).unwrap();
        assert_eq!(roi.anatomic_region, "Cecum");
        assert_eq!(roi.lesion_type, "Focal hypermetabolism");
        assert_eq!(roi.size, "Unclear");
        assert_eq!(roi.suv_max, Some(12.3));
        assert_eq!(roi.physical_region, PhysicalRegion::AbdomenPelvis);
        assert_eq!(
            roi.top3_diseases,
            vec![
                "Colon cancer (cecum)",
                "Inflammatory bowel disease (Crohn's disease)",
                "Appendicitis/Abscess"
            ]
        );
        assert_eq!(roi.top3_examinations.len(), 3);
        assert_eq!(serialize_annotation(&roi), CECUM);
    }

    #[test]
    fn placeholder_round_trip() {
        let roi = parse_annotation(PLACEHOLDER).unwrap();
        let fields = [
            &roi.anatomic_region,
            &roi.lesion_type,
            &roi.size,
            &roi.suv_max_raw,
            &roi.density,
            &roi.morphology,
            &roi.fdg_uptake,
        ];
        for (f, want) in fields.iter().zip(["A", "B", "C", "D", "E", "F", "G"]) {
            assert_eq!(f.as_str(), want);
        }
        assert_eq!(roi.suv_max, None);
        assert_eq!(roi.top3_diseases, vec!["H"]);
        assert_eq!(roi.top3_examinations, vec!["I"]);
        assert_eq!(roi.physical_region, PhysicalRegion::HeadNeck);
        assert_eq!(roi.note.as_deref(), Some("J"));
        assert_eq!(serialize_annotation(&roi), PLACEHOLDER);
    }

    #[test]
    fn whitespace_is_normalized() {
        let messy = "[ A   x ]-[B] -  [C] - [D] - [E] - [F] - [G] - [H1 ,  H2] - [I] - [ 2 ] - [J]";
        let roi = parse_annotation(messy).unwrap();
        assert_eq!(roi.anatomic_region, "A x");
        assert_eq!(roi.top3_diseases, vec!["H1", "H2"]);
        assert_eq!(
            serialize_annotation(&roi),
            "[A x] - [B] - [C] - [D] - [E] - [F] - [G] - [H1, H2] - [I] - [2] - [J]"
        );
    }

    #[test]
    fn non_numeric_suv_keeps_raw_text() {
        let roi = parse_annotation(&PLACEHOLDER.replace("[D]", "[3.1-4.5]")).unwrap();
        assert_eq!(roi.suv_max_raw, "3.1-4.5");
        assert_eq!(roi.suv_max, None);
    }

    #[test]
    fn empty_note_is_none() {
        let roi = parse_annotation(&PLACEHOLDER.replace("[J]", "[ ]")).unwrap();
        assert_eq!(roi.note, None);
    }

    #[test]
    fn field_count_error() {
        let err = parse_annotation("[A] - [B]").unwrap_err();
        assert_eq!(err, AnnotationError::FieldCount { found: 2, offset: 9 });
        let twelve = format!("{PLACEHOLDER} - [K]");
        let err = parse_annotation(&twelve).unwrap_err();
        assert_eq!(
            err,
            AnnotationError::FieldCount {
                found: 12,
                offset: PLACEHOLDER.len() + 3
            }
        );
    }

    #[test]
    fn unbalanced_bracket_errors() {
        let err = parse_annotation("[A] - [B").unwrap_err();
        assert_eq!(err, AnnotationError::UnbalancedBracket { field: 2, offset: 6 });
        let err = parse_annotation("[A]] - [B]").unwrap_err();
        assert_eq!(err, AnnotationError::UnbalancedBracket { field: 2, offset: 3 });
    }

    #[test]
    fn invalid_region_error() {
        let line = PLACEHOLDER.replace("[1]", "[4]");
        let err = parse_annotation(&line).unwrap_err();
        let offset = line.find("[4]").unwrap() + 1;
        assert_eq!(
            err,
            AnnotationError::InvalidRegion {
                field: 10,
                offset,
                value: "4".into()
            }
        );
        assert_eq!(err.field(), 10);
    }

    #[test]
    fn too_many_list_items() {
        let line = PLACEHOLDER.replace("[H]", "[a, b, c, d]");
        assert!(matches!(
            parse_annotation(&line),
            Err(AnnotationError::TooManyItems { field: 8, count: 4, .. })
        ));
    }

    #[test]
    fn nested_commas_do_not_split() {
        let line = PLACEHOLDER.replace("[H]", "[x (a, b), y [c, d]]");
        let roi = parse_annotation(&line).unwrap();
        assert_eq!(roi.top3_diseases, vec!["x (a, b)", "y [c, d]"]);
    }

    #[test]
    fn split_for_standard_volume() {
        let split = compute_region_ranges(313, &SplitConfig::default()).unwrap();
        assert_eq!(split.head_neck, SliceRange { start: 0, end: 78 });
        assert_eq!(split.chest, SliceRange { start: 63, end: 187 });
        assert_eq!(split.abdomen_pelvis, SliceRange { start: 172, end: 313 });
    }

    #[test]
    fn split_rejects_bad_input() {
        let err = compute_region_ranges(0, &SplitConfig::default()).unwrap_err();
        assert!(err.to_string().contains("too few slices"));
        assert!(matches!(
            compute_region_ranges(59, &SplitConfig::default()),
            Err(SplitError::TooFewSlices { total: 59, min: 60 })
        ));
        let cfg = SplitConfig {
            head_fraction: 0.7,
            ..SplitConfig::default()
        };
        assert!(matches!(
            compute_region_ranges(313, &cfg),
            Err(SplitError::FractionsNotOrdered { .. })
        ));
        let cfg = SplitConfig {
            head_fraction: 0.01,
            ..SplitConfig::default()
        };
        assert!(matches!(
            compute_region_ranges(313, &cfg),
            Err(SplitError::Degenerate { .. })
        ));
    }

    #[test]
    fn assigns_regions() {
        let split = compute_region_ranges(313, &SplitConfig::default()).unwrap();
        let bx = |lo, hi| BoundingBox3D::new(0.0, 0.0, lo, 10.0, 10.0, hi).unwrap();
        assert_eq!(
            assign_roi_to_region(&bx(10.0, 20.0), &split).unwrap(),
            PhysicalRegion::HeadNeck
        );
        assert_eq!(
            assign_roi_to_region(&bx(70.0, 90.0), &split).unwrap(),
            PhysicalRegion::Chest
        );
        // inside both head and chest: lower index wins
        assert_eq!(
            assign_roi_to_region(&bx(65.0, 70.0), &split).unwrap(),
            PhysicalRegion::HeadNeck
        );
        // spans chest and abdomen without being contained: larger overlap
        assert_eq!(
            assign_roi_to_region(&bx(150.0, 250.0), &split).unwrap(),
            PhysicalRegion::AbdomenPelvis
        );
        assert!(matches!(
            assign_roi_to_region(&bx(400.0, 410.0), &split),
            Err(SplitError::OutOfVolume { .. })
        ));
    }

    #[test]
    fn bbox_validation() {
        assert!(BoundingBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0).is_ok());
        assert!(matches!(
            BoundingBox3D::new(0.0, 0.0, 5.0, 1.0, 1.0, 5.0),
            Err(BoxError::Degenerate { axis: 'z', .. })
        ));
        assert!(BoundingBox3D::new(-1.0, 0.0, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn corpus_accepts_lines_objects_and_boxes() {
        let json = format!(
            r#"[{{"report_id": "r1", "physical_region": 3, "report_text": "x",
                 "rois": [{cecum:?}, {{"anatomic_region": "Liver", "lesion_type": "Mass",
                 "suv_max": 4.5, "physical_region": 3}}],
                 "bboxes": [[0,0,0,2,2,2],[1,1,1,3,3,3]]}}]"#,
            cecum = CECUM
        );
        let corpus = parse_corpus(&json).unwrap();
        assert_eq!(corpus.len(), 1);
        let rois = &corpus[0].rois;
        assert_eq!(rois[0].anatomic_region, "Cecum");
        assert_eq!(rois[1].suv_max, Some(4.5));
        assert_eq!(rois[1].bbox.unwrap().z_max, 3.0);

        let dup = r#"[{"report_id": "a", "physical_region": 1},
                      {"report_id": "a", "physical_region": 2}]"#;
        assert!(matches!(parse_corpus(dup), Err(CorpusError::DuplicateId(_))));

        let bad_count = r#"[{"report_id": "a", "physical_region": 1, "bboxes": [[0,0,0,1,1,1]]}]"#;
        assert!(matches!(
            parse_corpus(bad_count),
            Err(CorpusError::BoxCount { .. })
        ));
    }

    #[test]
    fn corpus_reports_annotation_position() {
        let json = r#"[{"report_id": "a", "physical_region": 1, "rois": ["[A] - [B"]}]"#;
        match parse_corpus(json) {
            Err(CorpusError::Annotation {
                roi_index: 0,
                source: AnnotationError::UnbalancedBracket { field: 2, offset: 6 },
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structured_roi_json_round_trip() {
        let mut roi = parse_annotation(CECUM).unwrap();
        roi.bbox = Some(BoundingBox3D::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0).unwrap());
        let json = serde_json::to_string(&roi).unwrap();
        let back: GroundTruthRoI = serde_json::from_str(&json).unwrap();
        assert_eq!(back, roi);
    }
}
