//! Corpus directories on disk.
//!
//! ```text
//! dir/index.csv          id,condition,depth
//! dir/images/<id>.ppm    (or .png)
//! dir/masks/<id>.pgm     0 / 255
//! dir/depth/<id>.pgm     0..255 → [0, 1]
//! dir/manifest.jsonl     noisy corpora only
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::degrade::ManifestEntry;
use crate::error::{Error, Result};
use crate::sample::{to_u8, Condition, Sample};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.csv";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: String,
    condition: Condition,
    depth: bool,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn plane_to_gray(t: &Tensor<f32>) -> GrayImage {
    let sh = t.shape();
    GrayImage::from_fn(sh.width as u32, sh.height as u32, |x, y| {
        image::Luma([to_u8(t.get(0, 0, y as usize, x as usize))])
    })
}

/// Binary PPM (P6) or PGM (P5), picked by the channel count.
fn write_pnm(path: &Path, bytes: &[u8], w: u32, h: u32, rgb: bool) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let (subtype, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(bytes, w, h, color)
        .map_err(|e| image_err(path, e))?;
    std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))
}

pub fn write_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let sh = t.shape();
    let img = RgbImage::from_fn(sh.width as u32, sh.height as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(t.get(0, c, y as usize, x as usize))))
    });
    write_pnm(path, img.as_raw(), img.width(), img.height(), true)
}

pub fn write_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let img = plane_to_gray(t);
    write_pnm(path, img.as_raw(), img.width(), img.height(), false)
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 1, h, w], |i| {
        img.get_pixel((i % w) as u32, (i / w) as u32)[0] as f32 / 255.0
    }))
}

/// Reads `<stem>.<ext>` for the first extension that exists.
fn find(dir: &Path, id: &str, exts: &[&str]) -> Result<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{id}.{e}")))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::io(
                dir.join(format!("{id}.{}", exts[0])),
                std::io::ErrorKind::NotFound.into(),
            )
        })
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes samples (and the manifest, when given) under `dir`.
pub fn save_dataset(dir: &Path, samples: &[Sample], manifest: Option<&[ManifestEntry]>) -> Result<()> {
    for sub in ["images", "masks", "depth"] {
        mkdir(&dir.join(sub))?;
    }
    let index = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index).map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
    for s in samples {
        write_rgb(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        write_gray(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
        if let Some(d) = &s.depth {
            write_gray(&dir.join("depth").join(format!("{}.pgm", s.id)), d)?;
        }
        w.serialize(IndexRow {
            id: s.id.clone(),
            condition: s.condition,
            depth: s.depth.is_some(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    if let Some(entries) = manifest {
        let text: String = entries.iter().map(|e| e.to_line() + "\n").collect();
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let index = dir.join(INDEX_FILE);
    if !index.exists() {
        return Err(Error::io(&index, std::io::ErrorKind::NotFound.into()));
    }
    let mut r = csv::Reader::from_path(&index).map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: IndexRow = row.map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
        let image = read_rgb(&find(&dir.join("images"), &row.id, &["ppm", "png"])?)?;
        let mut mask = read_gray(&find(&dir.join("masks"), &row.id, &["pgm", "png"])?)?;
        // 0/255 files, tolerate anything that rounds to either end
        for v in mask.data_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
        let depth = if row.depth {
            Some(read_gray(&find(&dir.join("depth"), &row.id, &["pgm", "png"])?)?)
        } else {
            None
        };
        out.push(Sample::new(row.id, image, mask, depth, row.condition)?);
    }
    Ok(out)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ManifestEntry::from_line)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::synth_dataset;

    #[test]
    fn dataset_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = synth_dataset(3, 32, 1).unwrap();
        data[1].depth = None;
        save_dataset(dir.path(), &data, None).unwrap();
        let head = fs::read(dir.path().join("images/00000.ppm")).unwrap();
        assert_eq!(&head[..2], b"P6");
        let head = fs::read(dir.path().join("masks/00000.pgm")).unwrap();
        assert_eq!(&head[..2], b"P5");
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn png_images_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(1, 32, 2).unwrap();
        save_dataset(dir.path(), &data, None).unwrap();
        let ppm = dir.path().join("images/00000.ppm");
        image::open(&ppm)
            .unwrap()
            .save(dir.path().join("images/00000.png"))
            .unwrap();
        fs::remove_file(ppm).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
        let data = synth_dataset(1, 32, 2).unwrap();
        save_dataset(dir.path(), &data, None).unwrap();
        fs::remove_file(dir.path().join("masks/00000.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
