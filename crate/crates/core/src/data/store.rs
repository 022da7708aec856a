//! Dataset directories: `images/<id>.pgm`, `masks/<id>.pbm` and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClientSplit, GenConfig, Sample};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: u64,
    pub image: String,
    pub mask: String,
    /// Number of tooth instances at generation time.
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub generator: GenConfig,
    pub entries: Vec<DatasetEntry>,
    #[serde(default)]
    pub test: Vec<u64>,
    #[serde(default)]
    pub assignment: BTreeMap<u64, usize>,
    #[serde(default)]
    pub clients: Vec<ClientSplit>,
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.data());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Packed PBM; foreground pixels are written as 1 (black).
pub fn write_pbm(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dims();
    let mut bytes = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = w.div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if mask.get(y, x) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        bytes.extend_from_slice(&row);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `count` whitespace-separated header numbers after the magic, skipping comments.
fn header(path: &Path, bytes: &[u8], magic: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    if !bytes.starts_with(magic) {
        return Err(Error::format(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = magic.len();
    let mut values = Vec::with_capacity(count);
    while values.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        values.push(
            text.parse()
                .map_err(|_| Error::format(path, "malformed header number"))?,
        );
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing raster data"));
    }
    Ok((values, pos + 1))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (v, start) = header(path, &bytes, b"P5", 3)?;
    let (w, h, max) = (v[0], v[1], v[2]);
    if max != 255 {
        return Err(Error::format(
            path,
            format!("only 8-bit PGM is supported, maxval {max}"),
        ));
    }
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::format(path, "truncated raster"))?;
    GrayImage::from_vec(h, w, raster.to_vec())
}

pub fn read_pbm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (v, start) = header(path, &bytes, b"P4", 2)?;
    let (w, h) = (v[0], v[1]);
    let row_bytes = w.div_ceil(8);
    let raster = bytes
        .get(start..start + row_bytes * h)
        .ok_or_else(|| Error::format(path, "truncated raster"))?;
    Ok(Mask::from_fn(h, w, |y, x| {
        raster[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0
    }))
}

fn file_name(id: u64, ext: &str) -> String {
    format!("{id:06}.{ext}")
}

/// Writes samples and a manifest. Only the union mask of each sample is stored.
pub fn export_dataset(
    dir: &Path,
    samples: &[Sample],
    mut manifest: DatasetManifest,
) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    manifest.entries.clear();
    for s in samples {
        let image = format!("images/{}", file_name(s.id, "pgm"));
        let mask = format!("masks/{}", file_name(s.id, "pbm"));
        write_pgm(&dir.join(&image), &s.image)?;
        write_pbm(&dir.join(&mask), &s.union_mask)?;
        manifest.entries.push(DatasetEntry {
            id: s.id,
            image,
            mask,
            instances: s.instances.len(),
        });
    }
    let path = dir.join("manifest.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset directory. Each sample gets a single instance equal to its union mask.
pub fn import_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let samples = manifest
        .entries
        .iter()
        .map(|e| {
            let image = read_pgm(&dir.join(&e.image))?;
            let mask = read_pbm(&dir.join(&e.mask))?;
            if image.dims() != mask.dims() {
                return Err(Error::format(
                    dir.join(&e.mask),
                    "mask and image sizes differ",
                ));
            }
            Ok(Sample {
                id: e.id,
                image,
                instances: vec![mask.clone()],
                union_mask: mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, manifest))
}
