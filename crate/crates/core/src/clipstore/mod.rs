//! Clips, annotations and datasets, plus their on-disk formats.

mod clip;
mod csv;
mod dataset;

pub use clip::{read_clip, write_clip, Clip, CLIP_MAGIC};
pub use csv::{parse_annotation_csv, write_annotation_csv, CsvRecord, CSV_HEADER};
pub use dataset::{
    cap_per_class, class_histogram, extend_source, load_dataset, save_dataset, DatasetIndex,
    DomainTag, Sample,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad clip magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated clip payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("clip dims overflow: {frames}x{height}x{width}x{channels}")]
    DimsOverflow { frames: usize, height: usize, width: usize, channels: usize },
    #[error("invalid clip dims: {frames}x{height}x{width}x{channels}")]
    BadDims { frames: usize, height: usize, width: usize, channels: usize },
    #[error("key index {key_index} is not the middle of {frames} frames")]
    BadKeyIndex { key_index: usize, frames: usize },
    #[error("{message} at line {line}")]
    Csv { line: usize, message: String },
    #[error("record for {0} carries no class label")]
    UnlabeledRecord(String),
    #[error("sample {sample_id}: class id {class_id} outside 0..{num_classes}")]
    ClassOutOfRange { sample_id: String, class_id: usize, num_classes: usize },
    #[error("sample {sample_id}: box {bbox:?} outside {width}x{height} frame")]
    BoxOutOfFrame { sample_id: String, bbox: BBox, width: usize, height: usize },
    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
    #[error("annotations reference unknown sample {0}")]
    UnknownSample(String),
    #[error("dataset directory {0}: {1}")]
    Layout(String, String),
}

/// Which domain an annotation's pixels and label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    SourcePrimary,
    SourceAuxiliary,
    Target,
}

impl Origin {
    pub fn is_source(self) -> bool {
        !matches!(self, Origin::Target)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::SourcePrimary => "source",
            Origin::SourceAuxiliary => "auxiliary",
            Origin::Target => "target",
        }
    }
}

/// A labeled box on a clip's key-frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
    pub instance_id: i64,
    pub origin: Origin,
}
