use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{ClassEntry, ClassPool, Origin};
use crate::error::{Error, Result};

pub const OMNIGLOT_CLASSES: usize = 1623;
pub const OMNIGLOT_INSTANCES: usize = 20;

const ARCHIVES: [&str; 2] = ["images_background", "images_evaluation"];
const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Ingest {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Ingest {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn load_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let resized = if gray.width() as usize == size && gray.height() as usize == size {
        gray
    } else {
        image::imageops::resize(&gray, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(resized.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
}

/// Reads `<root>/<alphabet>/<character>/<images>` (or the same layout
/// under `images_background` and `images_evaluation`, merged into one
/// pool). Images are converted to grayscale, resized bilinearly to
/// `size x size` and scaled to `[0, 1]`. Every character must have
/// exactly `instances` images.
pub fn load_omniglot(root: &Path, size: usize, instances: usize) -> Result<ClassPool> {
    if !root.is_dir() {
        return Err(Error::Ingest {
            path: root.to_path_buf(),
            msg: "dataset root is not a directory".into(),
        });
    }
    let archives: Vec<PathBuf> = ARCHIVES
        .iter()
        .map(|a| root.join(a))
        .filter(|p| p.is_dir())
        .collect();
    let containers = if archives.is_empty() {
        vec![root.to_path_buf()]
    } else {
        archives
    };

    let mut classes = Vec::new();
    for container in &containers {
        for alphabet in sorted_dirs(container)? {
            for character in sorted_dirs(&alphabet)? {
                let files = sorted_images(&character)?;
                if files.len() != instances {
                    return Err(Error::Ingest {
                        path: character.clone(),
                        msg: format!("expected {instances} images, found {}", files.len()),
                    });
                }
                let imgs = files
                    .iter()
                    .map(|f| load_image(f, size))
                    .collect::<Result<Vec<_>>>()?;
                let name = format!(
                    "{}/{}",
                    alphabet.file_name().unwrap_or_default().to_string_lossy(),
                    character.file_name().unwrap_or_default().to_string_lossy()
                );
                classes.push(ClassEntry::new(classes.len(), name, imgs));
            }
        }
    }
    if classes.is_empty() {
        return Err(Error::Ingest {
            path: root.to_path_buf(),
            msg: "no character directories found".into(),
        });
    }
    Ok(ClassPool {
        origin: Origin::Omniglot,
        image_shape: [1, size, size],
        classes,
    })
}
