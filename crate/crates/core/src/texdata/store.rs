use std::fs;
use std::path::Path;

use super::descfile::{decode_descriptor_maps, encode_descriptor_maps, DescriptorMaps};
use super::{Dataset, LabeledImage};
use crate::encoding::DescriptorBatch;
use crate::error::{Error, FormatError, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes one descriptor-map file per image (a single level with `N = size²`
/// descriptors of dimension 1) and a `path,label,group` manifest.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, img) in dataset.images.iter().enumerate() {
        let name = format!("sample_{i:06}.mrdl");
        let n = img.pixels.data().len();
        let maps = DescriptorMaps {
            levels: vec![DescriptorBatch::from_rows(n, 1, img.pixels.data().to_vec())?],
            label: img.label as u32,
        };
        fs::write(dir.join(&name), encode_descriptor_maps(&maps))?;
        manifest.push_str(&format!("{name},{},{}\n", img.label, img.group));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Reads a dataset directory. The class count is one past the largest label.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut images = Vec::new();
    let mut size = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| FormatError::Manifest {
            line: lineno + 1,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected path,label,group, got {} fields", fields.len())).into());
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad label {:?}", fields[1])))?;
        let group: u64 = fields[2]
            .parse()
            .map_err(|_| bad(format!("bad group {:?}", fields[2])))?;
        let bytes = fs::read(dir.join(fields[0]))?;
        let maps = decode_descriptor_maps(&bytes)?;
        if maps.levels.len() != 1 || maps.levels[0].d() != 1 {
            return Err(bad(format!("{} is not a single-channel image file", fields[0])).into());
        }
        let n = maps.levels[0].n();
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(bad(format!("{} holds {n} pixels, not a square image", fields[0])).into());
        }
        if *size.get_or_insert(side) != side {
            return Err(bad(format!("{} has side {side}, expected {}", fields[0], size.unwrap())).into());
        }
        if maps.label as usize != label {
            return Err(bad(format!(
                "label {label} disagrees with file label {}",
                maps.label
            ))
            .into());
        }
        let pixels = maps.levels.into_iter().next().expect("one level").into_matrix().into_vec();
        images.push(LabeledImage::new(side, pixels, label, group)?);
    }
    let size = size.ok_or_else(|| Error::invalid(format!("{} lists no samples", dir.display())))?;
    let classes = images.iter().map(|i| i.label).max().unwrap_or(0) + 1;
    Dataset::new(classes.max(2), size, images)
}
