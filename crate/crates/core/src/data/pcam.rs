//! PatchCamelyon HDF5 sextet reader. Images are `x: uint8 N×96×96×3`,
//! labels `y: N×1×1×1` (any shape with N elements is accepted).

use std::path::Path;

use super::{pcam_file_names, DatasetMeta, DatasetStore, ImageSample, Split, PCAM_IMAGE_SIZE};
use crate::error::{bail, Result};

fn ingest<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> crate::Error + '_ {
    move |e| crate::Error::Ingestion(format!("{}: {e}", path.display()))
}

fn read_split(dir: &Path, split: Split, x_name: &str, y_name: &str) -> Result<Vec<ImageSample>> {
    let (x_path, y_path) = (dir.join(x_name), dir.join(y_name));
    let x_file = hdf5::File::open(&x_path).map_err(ingest(&x_path))?;
    let x = x_file.dataset("x").map_err(ingest(&x_path))?;
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != PCAM_IMAGE_SIZE || shape[2] != PCAM_IMAGE_SIZE || shape[3] != 3 {
        bail!(
            Format,
            "{}: expected N×{s}×{s}×3 RGB images, found {:?}",
            x_path.display(),
            shape,
            s = PCAM_IMAGE_SIZE
        );
    }
    let n = shape[0];
    let y_file = hdf5::File::open(&y_path).map_err(ingest(&y_path))?;
    let y = y_file.dataset("y").map_err(ingest(&y_path))?;
    if y.size() != n {
        bail!(
            Format,
            "{}: {} labels for {} images",
            y_path.display(),
            y.size(),
            n
        );
    }
    let labels: Vec<u8> = y.read_raw::<u8>().map_err(ingest(&y_path))?;
    let pixels: Vec<u8> = x.read_raw::<u8>().map_err(ingest(&x_path))?;
    let stride = PCAM_IMAGE_SIZE * PCAM_IMAGE_SIZE * 3;
    pixels
        .chunks_exact(stride)
        .zip(labels)
        .enumerate()
        .map(|(i, (px, l))| {
            ImageSample::new(
                format!("pcam-{}-{i:06}", split.as_str()),
                PCAM_IMAGE_SIZE,
                PCAM_IMAGE_SIZE,
                px.to_vec(),
                Some(l),
            )
        })
        .collect()
}

pub(super) fn load(dir: &Path) -> Result<DatasetStore> {
    let files = pcam_file_names();
    for (_, x, y) in &files {
        for name in [x, y] {
            if !dir.join(name).is_file() {
                bail!(Ingestion, "PCam file `{name}` not found in {}", dir.display());
            }
        }
    }
    let mut splits = Vec::with_capacity(3);
    for (split, x, y) in &files {
        splits.push(read_split(dir, *split, x, y)?);
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    DatasetStore::new(
        DatasetMeta {
            image_size: PCAM_IMAGE_SIZE,
            class_names: vec!["normal".into(), "metastatic".into()],
            source: format!("pcam:{}", dir.display()),
        },
        train,
        valid,
        test,
    )
}
