//! Point annotations and their on-disk text format.
//!
//! An annotation file is a JSON array of records, one per cell:
//!
//! ```json
//! [{"x": 12, "y": 40, "class": "immunopositive"},
//!  {"x": 80, "y": 7, "class": "lymphocyte", "score": 1873.5}]
//! ```
//!
//! `score` is present only on detections and carries the density value
//! at the detected center.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three annotated cell types, in density-map channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    Immunopositive,
    Immunonegative,
    Lymphocyte,
}

impl CellClass {
    pub const ALL: [CellClass; 3] = [CellClass::Immunopositive, CellClass::Immunonegative, CellClass::Lymphocyte];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn from_channel(channel: usize) -> Option<Self> {
        Self::ALL.get(channel).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellClass::Immunopositive => "immunopositive",
            CellClass::Immunonegative => "immunonegative",
            CellClass::Lymphocyte => "lymphocyte",
        }
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellClass {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| AnnotationError::UnknownClass(s.to_string()))
    }
}

/// A cell center (column `x`, row `y`, origin top-left) and its type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellAnnotation {
    pub x: u32,
    pub y: u32,
    pub class: CellClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl CellAnnotation {
    pub fn new(x: u32, y: u32, class: CellClass) -> Self {
        Self { x, y, class, score: None }
    }

    pub fn with_score(self, score: f32) -> Self {
        Self {
            score: Some(score),
            ..self
        }
    }

    pub fn distance(&self, other: &CellAnnotation) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        dx.hypot(dy)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown cell class {0:?}")]
    UnknownClass(String),
    #[error("annotation ({x}, {y}) lies outside a {width}x{height} image")]
    OutOfBounds { x: u32, y: u32, width: usize, height: usize },
    #[error("malformed annotation document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn check_bounds(cells: &[CellAnnotation], width: usize, height: usize) -> Result<(), AnnotationError> {
    match cells.iter().find(|c| c.x as usize >= width || c.y as usize >= height) {
        Some(c) => Err(AnnotationError::OutOfBounds {
            x: c.x,
            y: c.y,
            width,
            height,
        }),
        None => Ok(()),
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<CellAnnotation>, AnnotationError> {
    Ok(serde_json::from_str(text)?)
}

/// Serializes one record per line so files diff cleanly.
pub fn format_annotations(cells: &[CellAnnotation]) -> String {
    let mut out = String::from("[");
    for (i, c) in cells.iter().enumerate() {
        out.push_str(if i == 0 { "\n  " } else { ",\n  " });
        out.push_str(&serde_json::to_string(c).expect("annotation serializes"));
    }
    out.push_str(if cells.is_empty() { "]\n" } else { "\n]\n" });
    out
}

pub fn read_annotations(path: &Path) -> Result<Vec<CellAnnotation>, AnnotationError> {
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_annotations(&text)
}

pub fn write_annotations(path: &Path, cells: &[CellAnnotation]) -> Result<(), AnnotationError> {
    fs::write(path, format_annotations(cells)).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Per-class cell counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub immunopositive: u64,
    pub immunonegative: u64,
    pub lymphocyte: u64,
}

impl CellCounts {
    pub fn new(immunopositive: u64, immunonegative: u64, lymphocyte: u64) -> Self {
        Self {
            immunopositive,
            immunonegative,
            lymphocyte,
        }
    }

    pub fn from_cells(cells: &[CellAnnotation]) -> Self {
        let mut counts = Self::default();
        for c in cells {
            *counts.get_mut(c.class) += 1;
        }
        counts
    }

    pub fn get(&self, class: CellClass) -> u64 {
        match class {
            CellClass::Immunopositive => self.immunopositive,
            CellClass::Immunonegative => self.immunonegative,
            CellClass::Lymphocyte => self.lymphocyte,
        }
    }

    pub fn get_mut(&mut self, class: CellClass) -> &mut u64 {
        match class {
            CellClass::Immunopositive => &mut self.immunopositive,
            CellClass::Immunonegative => &mut self.immunonegative,
            CellClass::Lymphocyte => &mut self.lymphocyte,
        }
    }

    pub fn total(&self) -> u64 {
        self.immunopositive + self.immunonegative + self.lymphocyte
    }
}

impl std::ops::Add for CellCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            immunopositive: self.immunopositive + rhs.immunopositive,
            immunonegative: self.immunonegative + rhs.immunonegative,
            lymphocyte: self.lymphocyte + rhs.lymphocyte,
        }
    }
}

impl std::ops::AddAssign for CellCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_strings_are_exact() {
        for c in CellClass::ALL {
            assert_eq!(c.as_str().parse::<CellClass>().unwrap(), c);
            assert_eq!(CellClass::from_channel(c.channel()), Some(c));
        }
        assert!("Immunopositive".parse::<CellClass>().is_err());
        assert_eq!(CellClass::Lymphocyte.channel(), 2);
    }

    #[test]
    fn document_roundtrip() {
        let cells = vec![
            CellAnnotation::new(1, 2, CellClass::Immunopositive),
            CellAnnotation::new(30, 4, CellClass::Lymphocyte).with_score(1800.5),
        ];
        let text = format_annotations(&cells);
        assert!(text.contains("\"class\":\"lymphocyte\""));
        assert!(!text.lines().nth(1).unwrap().contains("score"));
        assert_eq!(parse_annotations(&text).unwrap(), cells);
        assert_eq!(parse_annotations(&format_annotations(&[])).unwrap(), vec![]);
    }

    #[test]
    fn rejects_unknown_class_and_bounds() {
        let err = parse_annotations(r#"[{"x":1,"y":1,"class":"macrophage"}]"#).unwrap_err();
        assert!(matches!(err, AnnotationError::Malformed(_)));
        let cells = [CellAnnotation::new(10, 3, CellClass::Immunonegative)];
        assert!(check_bounds(&cells, 11, 4).is_ok());
        assert!(matches!(check_bounds(&cells, 10, 4), Err(AnnotationError::OutOfBounds { .. })));
    }

    #[test]
    fn counts_by_class() {
        let cells = [
            CellAnnotation::new(0, 0, CellClass::Immunopositive),
            CellAnnotation::new(0, 0, CellClass::Immunopositive),
            CellAnnotation::new(0, 0, CellClass::Lymphocyte),
        ];
        assert_eq!(CellCounts::from_cells(&cells), CellCounts::new(2, 0, 1));
    }
}
