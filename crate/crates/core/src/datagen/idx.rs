//! IDX file ingestion (the MNIST distribution format).
//!
//! Big-endian headers: magic 0x00000803 for u8 image tensors
//! [count, rows, cols], 0x00000801 for u8 label vectors. Pixels are
//! rescaled from 0..=255 into [0, 1].

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::Dataset;
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let (images, h, w) = read_images(image_path)?;
    let labels = read_labels(label_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut ds = Dataset::empty(h, w, num_classes.max(1), None);
    for (img, label) in images.into_iter().zip(labels) {
        ds.push(img, label)?;
    }
    Ok(ds)
}

fn read_images(path: &Path) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(path, "magic"))?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "count"))? as usize;
    let h = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "rows"))? as usize;
    let w = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "cols"))? as usize;
    let mut buf = vec![0u8; h * w];
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| truncated(path, "pixel data"))?;
        images.push(buf.iter().map(|&b| b as f32 / 255.0).collect());
    }
    Ok((images, h, w))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(path, "magic"))?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {LABEL_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated(path, "count"))? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| truncated(path, "label data"))?;
    Ok(buf.into_iter().map(|b| b as usize).collect())
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::Format(format!("{}: truncated while reading {what}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    /// Byte-by-byte fixture: two 2x3 images and their labels.
    fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("imgs.idx3-ubyte");
        let lbl_path = dir.join("lbls.idx1-ubyte");

        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes()); // count
        img.extend_from_slice(&2u32.to_be_bytes()); // rows
        img.extend_from_slice(&3u32.to_be_bytes()); // cols
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255]); // image 0
        img.extend_from_slice(&[255, 204, 153, 102, 51, 0]); // image 1
        File::create(&img_path).unwrap().write_all(&img).unwrap();

        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        File::create(&lbl_path).unwrap().write_all(&lbl).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn fixture_pixels_are_recovered_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_fixture(dir.path());
        let ds = load_idx(&imgs, &lbls).unwrap();
        assert_eq!((ds.len(), ds.height(), ds.width()), (2, 2, 3));
        let expected0: Vec<f32> = [0, 51, 102, 153, 204, 255]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        assert_eq!(ds.image(0), &expected0[..]);
        assert_eq!(ds.label(0), 7);
        assert_eq!(ds.label(1), 3);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_fixture(dir.path());
        let mut bytes = std::fs::read(&imgs).unwrap();
        bytes[3] = 0x01; // image magic now claims to be a label file
        std::fs::write(&imgs, bytes).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_fixture(dir.path());
        let mut bytes = std::fs::read(&lbls).unwrap();
        bytes.push(1); // three labels for two images
        bytes[7] = 3;
        std::fs::write(&lbls, bytes).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_image_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, lbls) = write_fixture(dir.path());
        let bytes = std::fs::read(&imgs).unwrap();
        std::fs::write(&imgs, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::Format(_))));
    }
}
