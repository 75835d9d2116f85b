//! Dataset persistence: a directory holding the raw little-endian f32 image
//! blob (`images.bin`) plus a JSON manifest with counts, shapes, seeds,
//! labels, and the poison mask when the set is a poisoned mixture.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Dataset, MixedDataset, PoisonPlan};
use crate::{Error, Result};

const IMAGES_FILE: &str = "images.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    n: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    seed: Option<u64>,
    labels: Vec<usize>,
    poison_mask: Option<Vec<bool>>,
    origin: Option<Vec<Option<usize>>>,
    plan: Option<PoisonPlan>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    save_impl(ds, None, dir)
}

/// Persist a poisoned mixture; the manifest carries mask, origins and plan.
pub fn save_mixed_dataset(mixed: &MixedDataset, dir: &Path) -> Result<()> {
    save_impl(&mixed.data, Some(mixed), dir)
}

fn save_impl(ds: &Dataset, mixed: Option<&MixedDataset>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(IMAGES_FILE))?);
    for v in ds.raw_images() {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        n: ds.len(),
        h: ds.height(),
        w: ds.width(),
        num_classes: ds.num_classes(),
        seed: ds.seed(),
        labels: ds.labels().to_vec(),
        poison_mask: mixed.map(|m| m.poison_mask.clone()),
        origin: mixed.map(|m| m.origin.clone()),
        plan: mixed.map(|m| m.plan.clone()),
    };
    let f = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    let mut r = BufReader::new(File::open(dir.join(IMAGES_FILE))?);
    let px = manifest.h * manifest.w;
    let mut ds = Dataset::empty(manifest.h, manifest.w, manifest.num_classes, manifest.seed);
    if manifest.labels.len() != manifest.n {
        return Err(Error::Format(format!(
            "{}: manifest lists {} labels for {} samples",
            dir.display(),
            manifest.labels.len(),
            manifest.n
        )));
    }
    for &label in &manifest.labels {
        let mut img = vec![0.0f32; px];
        r.read_f32_into::<LittleEndian>(&mut img)
            .map_err(|_| Error::Format(format!("{}: truncated image blob", dir.display())))?;
        ds.push(img, label)?;
    }
    Ok(ds)
}
