//! Manifests, class remapping, sequence windows, augmentation and the
//! synthetic scene generator.

mod augment;
mod classes;
mod io;
mod manifest;
mod sequence;
mod synthetic;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use augment::{apply_augmentation, augment, AugmentParams, AugmentationConfig};
pub use classes::{remap_semantic_labels, ClassMapping, MIDAIR_CLASSES, MIDAIR_CONSTRUCTION, TARGET_CLASSES};
pub use io::{read_labels, read_pfm, read_rgb, write_labels, write_pfm, write_rgb};
pub use manifest::{
    format_record, intrinsics_path, load_manifest, manifest_path, parse_manifest, read_intrinsics,
    write_intrinsics, FrameRecord, Split,
};
pub use sequence::{load_frame, load_sample, make_sequences, Frame, FrameSequenceSample, SequenceWindow};
pub use synthetic::{generate_synthetic_scene, Hit, Scene, SceneConfig, SceneObject, Shape, SyntheticSummary};

pub mod class_ids {
    pub use super::classes::{BOULDERS, LAND, OTHERS, ROAD, SKY, TREES, WATER};
}

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("trajectory {trajectory} lists frame {frame_index} twice")]
    DuplicateFrame { trajectory: String, frame_index: u64 },
    #[error("unknown source class id {0}")]
    UnknownClass(u8),
    #[error("data configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// All windows of one split, decoded into memory.
pub fn load_split(
    root: &Path,
    split: Split,
    window: usize,
    mapping: Option<&ClassMapping>,
) -> Result<Vec<FrameSequenceSample>> {
    let records = load_manifest(root, split)?;
    make_sequences(&records, window)?
        .iter()
        .map(|w| load_sample(&records, w, mapping))
        .collect()
}
