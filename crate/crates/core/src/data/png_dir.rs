//! Directory-of-PNG dataset adapter: `manifest.csv` (id,split,label) plus one
//! `images/<id>.png` per sample and an optional `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, DatasetStore, ImageSample, Split};
use crate::error::{bail, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const META_FILE: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    split: Split,
    label: Option<u8>,
}

pub fn export_png_dir(store: &DatasetStore, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut writer = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    for split in Split::ALL {
        for s in store.split(split) {
            if s.id.contains(['/', '\\']) || s.id.starts_with('.') {
                bail!(InvalidArgument, "sample id `{}` is not a safe file name", s.id);
            }
            image::save_buffer(
                images.join(format!("{}.png", s.id)),
                &s.pixels,
                s.width as u32,
                s.height as u32,
                image::ExtendedColorType::Rgb8,
            )?;
            writer.serialize(ManifestRow {
                id: s.id.clone(),
                split,
                label: s.label,
            })?;
        }
    }
    writer.flush()?;
    fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&store.meta)?)?;
    Ok(())
}

pub fn import_png_dir(dir: &Path) -> Result<DatasetStore> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        bail!(Ingestion, "missing dataset manifest {}", manifest.display());
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let path = dir.join("images").join(format!("{}.png", row.id));
        let img = image::open(&path)
            .map_err(|e| crate::Error::Ingestion(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let sample = ImageSample::new(row.id, h as usize, w as usize, img.into_raw(), row.label)?;
        match row.split {
            Split::Train => train.push(sample),
            Split::Valid => valid.push(sample),
            Split::Test => test.push(sample),
        }
    }
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.is_file() {
        serde_json::from_slice(&fs::read(meta_path)?)?
    } else {
        let Some(first) = train.iter().chain(&valid).chain(&test).next() else {
            bail!(Ingestion, "manifest {} lists no images", manifest.display());
        };
        DatasetMeta {
            image_size: first.size(),
            class_names: vec!["0".into(), "1".into()],
            source: format!("png:{}", dir.display()),
        }
    };
    DatasetStore::new(meta, train, valid, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn png_round_trip_preserves_pixels_and_labels() {
        let store = generate_synthetic(&SyntheticSpec::new(3, 16, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_png_dir(&store, dir.path()).unwrap();
        let back = import_png_dir(dir.path()).unwrap();
        assert_eq!(back.meta, store.meta);
        for split in Split::ALL {
            assert_eq!(back.split(split), store.split(split));
        }
    }

    #[test]
    fn missing_manifest_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(import_png_dir(dir.path()), Err(crate::Error::Ingestion(_))));
    }
}
