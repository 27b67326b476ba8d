//! Bounding boxes, attention-grid masks and layout files.
//!
//! A layout file is JSON:
//!
//! ```json
//! { "prompt": [0, 1, 3, 9, 2, 1, 5, 10],
//!   "entries": [ { "token_index": 2, "box": [0.0, 0.0, 0.5, 1.0], "label": "red square" } ] }
//! ```
//!
//! Boxes are `[x0, y0, x1, y1]` in normalized image coordinates with the
//! origin at the top-left. Unknown fields are rejected.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("reading layout {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed layout json")]
    Malformed(#[from] serde_json::Error),
    #[error("invalid box {0:?}: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")]
    InvalidBox([f64; 4]),
    #[error("attending token index {index} appears more than once")]
    DuplicateIndex { index: usize },
    #[error("attending token index {index} out of range for a prompt of {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("layout has no entries")]
    NoEntries,
    #[error("mask grid must be non-empty, got {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, LayoutError> {
        let ok = (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && x0 < x1
            && y0 < y1;
        if ok {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(LayoutError::InvalidBox([x0, y0, x1, y1]))
        }
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Half-open containment: left/top edges inclusive, right/bottom exclusive.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = LayoutError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Row-major binary mask over an H×W attention grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), height * width, "mask length must equal grid size");
        Self { height, width, cells }
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self::from_cells(height, width, vec![value; height * width])
    }

    /// Mask of length `len` on a 1×len grid with the given indices set.
    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut cells = vec![false; len];
        for &i in indices {
            cells[i] = true;
        }
        Self::from_cells(1, len, cells)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, i: usize) -> bool {
        self.cells[i]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            cells: self.cells.iter().map(|c| !c).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.cells.len() == other.cells.len() && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    /// 0/1 values as floats.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

/// Marks every grid cell whose center lies in the box. If no center does,
/// the single cell containing the box center is marked instead.
pub fn rasterize(bbox: &BoundingBox, height: usize, width: usize) -> Result<BinaryMask, LayoutError> {
    if height == 0 || width == 0 {
        return Err(LayoutError::EmptyGrid { height, width });
    }
    let mut cells = vec![false; height * width];
    for r in 0..height {
        let cy = (r as f64 + 0.5) / height as f64;
        for c in 0..width {
            let cx = (c as f64 + 0.5) / width as f64;
            cells[r * width + c] = bbox.contains(cx, cy);
        }
    }
    if !cells.contains(&true) {
        let (cx, cy) = bbox.center();
        let c = ((cx * width as f64) as usize).min(width - 1);
        let r = ((cy * height as f64) as usize).min(height - 1);
        cells[r * width + c] = true;
    }
    Ok(BinaryMask::from_cells(height, width, cells))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutEntry {
    pub token_index: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout")]
pub struct Layout {
    pub prompt: Vec<usize>,
    pub entries: Vec<LayoutEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    token_index: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    prompt: Vec<usize>,
    entries: Vec<RawEntry>,
}

impl Layout {
    pub fn new(prompt: Vec<usize>, entries: Vec<LayoutEntry>) -> Result<Self, LayoutError> {
        let layout = Self { prompt, entries };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.entries.is_empty() {
            return Err(LayoutError::NoEntries);
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.token_index >= self.prompt.len() {
                return Err(LayoutError::IndexOutOfRange {
                    index: e.token_index,
                    len: self.prompt.len(),
                });
            }
            if !seen.insert(e.token_index) {
                return Err(LayoutError::DuplicateIndex { index: e.token_index });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.token_index).collect()
    }

    pub fn masks(&self, height: usize, width: usize) -> Result<Vec<BinaryMask>, LayoutError> {
        self.entries.iter().map(|e| rasterize(&e.bbox, height, width)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        let raw: RawLayout = serde_json::from_str(text)?;
        Self::try_from(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }
}

impl TryFrom<RawLayout> for Layout {
    type Error = LayoutError;

    fn try_from(raw: RawLayout) -> Result<Self, LayoutError> {
        let entries = raw
            .entries
            .into_iter()
            .map(|e| {
                Ok(LayoutEntry {
                    token_index: e.token_index,
                    bbox: BoundingBox::try_from(e.bbox)?,
                    label: e.label,
                })
            })
            .collect::<Result<_, LayoutError>>()?;
        Self::new(raw.prompt, entries)
    }
}

pub fn load_layout(path: impl AsRef<Path>) -> Result<Layout, LayoutError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LayoutError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Layout::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn full_and_half_boxes() {
        assert_eq!(rasterize(&bx(0.0, 0.0, 1.0, 1.0), 4, 4).unwrap().count(), 16);
        let half = rasterize(&bx(0.0, 0.0, 0.5, 1.0), 4, 4).unwrap();
        assert_eq!(half.count(), 8);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(half.get(r * 4 + c), c < 2);
            }
        }
    }

    #[test]
    fn tiny_box_sets_exactly_one_cell() {
        // Cell centers on a 16 grid sit at (k + 0.5) / 16; only k = 6 lands in [0.4, 0.45).
        let m = rasterize(&bx(0.4, 0.4, 0.45, 0.45), 16, 16).unwrap();
        assert_eq!(m.indices(), vec![6 * 16 + 6]);
    }

    #[test]
    fn fallback_marks_cell_holding_box_center() {
        // No cell center lies in [0.41, 0.43); the box center 0.42 falls in cell 6.
        let m = rasterize(&bx(0.41, 0.41, 0.43, 0.43), 16, 16).unwrap();
        assert_eq!(m.indices(), vec![6 * 16 + 6]);
        let m = rasterize(&bx(0.99, 0.99, 1.0, 1.0), 4, 4).unwrap();
        assert_eq!(m.indices(), vec![15]);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(matches!(BoundingBox::new(0.5, 0.0, 0.5, 1.0), Err(LayoutError::InvalidBox(_))));
        assert!(BoundingBox::new(0.6, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.2, 1.0).is_err());
        assert!(BoundingBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn complement_cases() {
        let ones = BinaryMask::full(4, 4, true);
        assert_eq!(ones.complement().count(), 0);
        let half = rasterize(&bx(0.0, 0.0, 0.5, 1.0), 4, 4).unwrap();
        let comp = half.complement();
        assert_eq!(comp.count(), 8);
        assert!(comp.indices().iter().all(|i| i % 4 >= 2));
        assert_eq!(comp.complement(), half);
    }

    const TWO_ENTRY: &str = r#"{
        "prompt": [0, 1, 3, 9, 2, 1, 4, 10],
        "entries": [
            { "token_index": 3, "box": [0, 0, 0.5, 1], "label": "red square" },
            { "token_index": 7, "box": [0.5, 0, 1, 1], "label": "blue circle" }
        ]
    }"#;

    #[test]
    fn parses_two_entries() {
        let l = Layout::from_json(TWO_ENTRY).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l.entries[1].bbox, bx(0.5, 0.0, 1.0, 1.0));
        assert_eq!(l.token_indices(), vec![3, 7]);
    }

    #[test]
    fn validation_errors_are_distinct() {
        let swapped = TWO_ENTRY.replace("[0, 0, 0.5, 1]", "[0.6, 0, 0.5, 1]");
        assert!(matches!(Layout::from_json(&swapped), Err(LayoutError::InvalidBox(_))));
        let outside = TWO_ENTRY.replace("[0, 0, 0.5, 1]", "[0, 0, 0.5, 1.5]");
        assert!(matches!(Layout::from_json(&outside), Err(LayoutError::InvalidBox(_))));
        assert!(matches!(Layout::from_json("{ \"prompt\": [0] "), Err(LayoutError::Malformed(_))));

        let far = TWO_ENTRY.replace("\"token_index\": 7", "\"token_index\": 8");
        assert!(matches!(
            Layout::from_json(&far),
            Err(LayoutError::IndexOutOfRange { index: 8, len: 8 })
        ));

        let dup = TWO_ENTRY.replace("\"token_index\": 7", "\"token_index\": 3");
        assert!(matches!(Layout::from_json(&dup), Err(LayoutError::DuplicateIndex { index: 3 })));

        let unknown = TWO_ENTRY.replace("\"label\": \"blue circle\"", "\"label\": \"b\", \"color\": 1");
        assert!(matches!(Layout::from_json(&unknown), Err(LayoutError::Malformed(_))));

        let empty = r#"{ "prompt": [0], "entries": [] }"#;
        assert!(matches!(Layout::from_json(empty), Err(LayoutError::NoEntries)));
    }

    #[test]
    fn overlapping_boxes_allowed() {
        let text = TWO_ENTRY.replace("[0.5, 0, 1, 1]", "[0.25, 0, 1, 1]");
        assert!(Layout::from_json(&text).is_ok());
    }

    #[test]
    fn load_from_file_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.json");
        std::fs::write(&path, TWO_ENTRY).unwrap();
        assert_eq!(load_layout(&path).unwrap().len(), 2);
        assert!(matches!(load_layout(dir.path().join("nope.json")), Err(LayoutError::Io { .. })));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..0.95f64, 0.0..0.95f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x0, y0, w, h)| {
            bx(x0, y0, (x0 + w).min(1.0).max(x0 + 1e-3), (y0 + h).min(1.0).max(y0 + 1e-3))
        })
    }

    proptest! {
        #[test]
        fn rasterize_is_monotone(outer in arb_box(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.05..1.0f64, fh in 0.05..1.0f64) {
            let w = (outer.x1() - outer.x0()) * fw;
            let h = (outer.y1() - outer.y0()) * fh;
            let x0 = outer.x0() + (outer.x1() - outer.x0() - w) * fx;
            let y0 = outer.y0() + (outer.y1() - outer.y0() - h) * fy;
            let inner = bx(x0, y0, (x0 + w).min(outer.x1()), (y0 + h).min(outer.y1()));
            prop_assume!(outer.contains_box(&inner));
            let mo = rasterize(&outer, 16, 16).unwrap();
            let mi = rasterize(&inner, 16, 16).unwrap();
            // The single-cell fallback of a tiny inner box can land on a cell whose
            // center is outside the outer box; compare only center-rule cells.
            if mi.count() > 1 || mi.indices().iter().all(|&i| mo.get(i)) {
                prop_assert!(mi.is_subset_of(&mo));
            }
        }

        #[test]
        fn mask_and_complement_partition_grid(b in arb_box(), h in 1usize..20, w in 1usize..20) {
            let m = rasterize(&b, h, w).unwrap();
            prop_assert!(m.count() >= 1);
            prop_assert_eq!(m.count() + m.complement().count(), h * w);
        }

        #[test]
        fn layout_round_trips(boxes in proptest::collection::vec(arb_box(), 1..4)) {
            let prompt: Vec<usize> = (0..8).collect();
            let entries = boxes.iter().enumerate().map(|(i, &bbox)| LayoutEntry {
                token_index: i * 2 + 1, bbox, label: format!("object {i}"),
            }).collect();
            let layout = Layout::new(prompt, entries).unwrap();
            prop_assert_eq!(Layout::from_json(&layout.to_json()).unwrap(), layout);
        }
    }
}
