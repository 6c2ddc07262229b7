//! Reading and writing the on-disk formats, and pairing files by stem.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::CliError;

pub fn load_image(path: &Path) -> Result<RgbImage, CliError> {
    if !path.exists() {
        return Err(CliError::io(path, "no such file"));
    }
    let img = image::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn save_image(path: &Path, image: &RgbImage) -> Result<(), CliError> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// `path` with its extension replaced; the sibling file must exist.
pub fn sibling(path: &Path, ext: &str) -> Result<PathBuf, CliError> {
    let p = path.with_extension(ext);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::io(&p, "no such file"))
    }
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
