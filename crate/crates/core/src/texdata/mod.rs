//! Labeled image datasets: the synthetic multi-scale texture generator,
//! group-aware splitting, patch → image majority voting, and the on-disk
//! formats (descriptor-map files plus a manifest per dataset directory).

mod descfile;
mod store;
mod synth;

pub use descfile::{
    decode_descriptor_maps, encode_descriptor_maps, load_descriptor_maps, write_descriptor_maps,
    DescriptorMaps, DESC_MAGIC, DESC_VERSION,
};
pub(crate) use descfile::Reader;
pub use store::{load_dataset, save_dataset, MANIFEST_NAME};
pub use synth::{generate, ClassSpec, Layout, Scale, SyntheticSpec};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::Tensor4;

/// One single-channel square patch with its class and image-of-origin id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor4,
    pub label: usize,
    pub group: u64,
}

impl LabeledImage {
    pub fn new(size: usize, pixels: Vec<f64>, label: usize, group: u64) -> Result<Self> {
        let pixels = Tensor4::from_vec([1, 1, size, size], pixels)?;
        Ok(LabeledImage {
            pixels,
            label,
            group,
        })
    }

    pub fn size(&self) -> usize {
        self.pixels.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub image_size: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(classes: usize, image_size: usize, images: Vec<LabeledImage>) -> Result<Self> {
        for (i, img) in images.iter().enumerate() {
            if img.label >= classes {
                return Err(Error::invalid(format!(
                    "image {i} has label {} but only {classes} classes",
                    img.label
                )));
            }
            if img.pixels.dims() != [1, 1, image_size, image_size] {
                return Err(Error::shape(format!(
                    "image {i} has dims {:?}, expected 1x1x{image_size}x{image_size}",
                    img.pixels.dims()
                )));
            }
        }
        Ok(Dataset {
            classes,
            image_size,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    fn subset(&self, keep: impl Fn(&LabeledImage) -> bool) -> Dataset {
        Dataset {
            classes: self.classes,
            image_size: self.image_size,
            images: self.images.iter().filter(|i| keep(i)).cloned().collect(),
        }
    }
}

/// Group-aware split: whole groups go to one side. `fraction` is the share
/// of groups (not patches) assigned to the training side.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut groups: Vec<u64> = dataset
        .images
        .iter()
        .map(|i| i.group)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let n_train = (fraction * groups.len() as f64).round() as usize;
    let train_groups: BTreeSet<u64> = groups[..n_train].iter().copied().collect();
    let train = dataset.subset(|i| train_groups.contains(&i.group));
    let val = dataset.subset(|i| !train_groups.contains(&i.group));
    Ok((train, val))
}

/// Most frequent label; the lowest class index wins ties.
pub fn majority_vote(labels: &[usize]) -> Result<usize> {
    let max = *labels
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("majority vote over an empty label list"))?;
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (label, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = label;
        }
    }
    Ok(best)
}
