//! Raster types, label-map semantics and the on-disk formats shared by every
//! pipeline stage.

mod channel;
mod flow;
mod label;
mod raster;

pub use channel::{extract_channel, Channel, ChannelSpec};
pub use flow::{read_flows, write_flows, FlowField, CYTF_MAGIC, CYTF_VERSION};
pub(crate) use label::components4;
pub use label::{read_label_map, write_label_map, BBox, LabelMap, MAX_PNG_LABEL};
pub use raster::{read_image, write_image, RasterImage};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("invalid dimensions {width}x{height}x{channels}")]
    Dimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("buffer holds {actual} samples, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("label map holds {count} instances, more than the 16-bit container allows")]
    Capacity { count: usize },
    #[error("instance {id} is not 4-connected")]
    NonContiguous { id: u32 },
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ImagingError {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        ImagingError::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

/// Write `bytes` to `path` through a sibling temp file and a rename, so a
/// crash never leaves a half-written artifact behind.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
