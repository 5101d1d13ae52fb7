//! Structural conditioning from the source image (Canny edges, color
//! segmentation) and the low-rank adapter algebra used by the segmentation
//! fine-tune.

pub mod canny;
pub mod lora;
pub mod segment;
pub mod toyfit;

pub use canny::{canny_edges, EdgeMap};
pub use lora::{apply_lora, merge_lora, LoraAdapter, LoraError};
pub use segment::{segment_image, SegmentationMap, SegmenterPort};
pub use toyfit::{toy_lora_fit, ToyFitConfig, ToyFitReport};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("bad thresholds: need 0 < low < high, got low={low} high={high}")]
    BadThresholds { low: f32, high: f32 },
    #[error("segmentation backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
}

impl VisionError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadThresholds { .. } => "BadThresholds",
            Self::BackendUnavailable(_) => "BackendUnavailable",
            Self::InvalidMap(_) => "InvalidMap",
        }
    }
}
