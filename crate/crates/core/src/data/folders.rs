use std::fs;
use std::path::{Path, PathBuf};

use super::{read_pnm, write_pnm, DataError, ImageBuffer, Result};

pub type NamedImage = (String, ImageBuffer);
/// `(basename, clean, noisy)`.
pub type NamedPair = (String, ImageBuffer, ImageBuffer);

const EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_pnm_file(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_pnm(&bytes).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_pnm_file(path: &Path, img: &ImageBuffer) -> Result<()> {
    fs::write(path, write_pnm(img)).map_err(io_err(path))
}

/// PNM files directly inside `dir`, keyed by file stem, sorted by stem.
fn pnm_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_pnm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_pnm && path.is_file() {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Every PGM/PPM image in `dir`, sorted by basename.
pub fn load_folder(dir: &Path) -> Result<Vec<NamedImage>> {
    let images = pnm_files(dir)?
        .into_iter()
        .map(|(name, path)| Ok((name, read_pnm_file(&path)?)))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(DataError::Invalid(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    Ok(images)
}

/// Pairs `<root>/clean/<name>` with `<root>/noisy/<name>` by basename.
pub fn load_paired(root: &Path) -> Result<Vec<NamedPair>> {
    let clean = pnm_files(&root.join("clean"))?;
    let noisy = pnm_files(&root.join("noisy"))?;
    if clean.is_empty() {
        return Err(DataError::Invalid(format!("no clean images under {}", root.display())));
    }
    let clean_names: Vec<&str> = clean.iter().map(|(n, _)| n.as_str()).collect();
    let noisy_names: Vec<&str> = noisy.iter().map(|(n, _)| n.as_str()).collect();
    if clean_names != noisy_names {
        let missing = clean_names
            .iter()
            .find(|n| !noisy_names.contains(n))
            .or_else(|| noisy_names.iter().find(|n| !clean_names.contains(n)))
            .copied()
            .unwrap_or("(duplicate basename)");
        return Err(DataError::Invalid(format!(
            "clean/noisy folders under {} do not pair up: `{missing}` has no partner",
            root.display()
        )));
    }
    clean
        .into_iter()
        .zip(noisy)
        .map(|((name, cp), (_, np))| {
            let (c, n) = (read_pnm_file(&cp)?, read_pnm_file(&np)?);
            if (c.height(), c.width(), c.channels()) != (n.height(), n.width(), n.channels()) {
                return Err(DataError::Invalid(format!("pair `{name}`: clean and noisy images differ in size")));
            }
            Ok((name, c, n))
        })
        .collect()
}
