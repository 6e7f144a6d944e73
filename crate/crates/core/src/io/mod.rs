//! File formats: VisDrone-style annotations, binary PPM images, run
//! configuration, weight files and detection lists.

mod annotations;
mod config;
mod detections;
mod ppm;
mod weights;

pub use annotations::{
    annotation_to_gt, gt_to_annotation, load_annotation_dir, load_annotations, parse_annotations, write_annotations,
    Annotation,
};
pub use config::{InputConfig, OptimizerConfig, RunConfig, TrainConfig};
pub use detections::{load_detections, parse_detections, write_detections};
pub use ppm::{decode_ppm, encode_ppm, load_image, save_image};
pub use weights::{decode_weights, encode_weights, load_weights, load_weights_into, save_weights, WEIGHT_MAGIC, WEIGHT_VERSION};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Files in `dir` with the given extension, sorted by name, paired with
/// their stems.
pub fn list_files(dir: &Path, extension: &str) -> Result<Vec<(String, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(extension) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}
