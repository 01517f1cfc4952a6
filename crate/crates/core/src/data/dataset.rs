use std::collections::BTreeMap;

use super::captions::{read_captions, CaptionRecord};
use super::features::read_features;
use super::manifest::DatasetManifest;
use super::tokenize::tokenize;
use super::vocab::Vocab;
use crate::autodiff::Tensor;
use crate::encoders::{Caption, RegionFeatures};
use crate::error::{Error, Result};

/// A split as stored on disk, before vocabulary lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSplit {
    pub name: String,
    pub images: Vec<(u64, Tensor)>,
    pub captions: Vec<CaptionRecord>,
    pub captions_per_image: usize,
}

impl RawSplit {
    /// Normalized content tokens per caption, in file order.
    pub fn tokenized(&self) -> Vec<Vec<String>> {
        self.captions.iter().map(|c| tokenize(&c.tokens)).collect()
    }
}

/// Reads and cross-checks the files named by a manifest.
pub fn load_raw(manifest: &DatasetManifest) -> Result<RawSplit> {
    let images = read_features(&manifest.features)?;
    let captions = read_captions(&manifest.captions)?;
    if images.len() != manifest.images {
        return Err(Error::Data(format!(
            "split `{}`: manifest lists {} images, feature file has {}",
            manifest.split,
            manifest.images,
            images.len()
        )));
    }
    let raw = RawSplit {
        name: manifest.split.clone(),
        images,
        captions,
        captions_per_image: manifest.captions_per_image,
    };
    let counts = caption_counts(&raw)?;
    if let Some((id, n)) = counts.iter().find(|(_, &n)| n != manifest.captions_per_image) {
        return Err(Error::Data(format!(
            "split `{}`: image {id} has {n} captions, manifest says {}",
            manifest.split, manifest.captions_per_image
        )));
    }
    Ok(raw)
}

fn caption_counts(raw: &RawSplit) -> Result<BTreeMap<u64, usize>> {
    let mut counts: BTreeMap<u64, usize> = raw.images.iter().map(|(id, _)| (*id, 0)).collect();
    if counts.len() != raw.images.len() {
        return Err(Error::Data(format!("split `{}`: duplicate image ids in feature file", raw.name)));
    }
    for c in &raw.captions {
        match counts.get_mut(&c.image_id) {
            Some(n) => *n += 1,
            None => {
                return Err(Error::Data(format!(
                    "split `{}`: caption {} references image {} which has no features",
                    raw.name, c.caption_id, c.image_id
                )))
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub image_id: u64,
    pub regions: RegionFeatures,
    /// Indices into [`Dataset::captions`].
    pub captions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CaptionEntry {
    pub caption_id: u64,
    /// Index into [`Dataset::images`].
    pub image: usize,
    pub tokens: Vec<String>,
    pub caption: Caption,
}

/// One (image, caption) training example, by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstancePair {
    pub image: usize,
    pub caption: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionEntry>,
}

impl Dataset {
    pub fn from_raw(raw: &RawSplit, vocab: &Vocab) -> Result<Self> {
        caption_counts(raw)?;
        let index: BTreeMap<u64, usize> = raw.images.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        let mut images = raw
            .images
            .iter()
            .map(|(id, t)| {
                Ok(ImageRecord { image_id: *id, regions: RegionFeatures::new(t.clone())?, captions: Vec::new() })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut captions = Vec::with_capacity(raw.captions.len());
        for rec in &raw.captions {
            let image = index[&rec.image_id];
            let tokens = tokenize(&rec.tokens);
            let caption = Caption::new(vocab.encode(&tokens)).map_err(|_| {
                Error::Data(format!("caption {} has no content tokens after normalization", rec.caption_id))
            })?;
            images[image].captions.push(captions.len());
            captions.push(CaptionEntry { caption_id: rec.caption_id, image, tokens, caption });
        }
        if let Some(img) = images.iter().find(|i| i.captions.is_empty()) {
            return Err(Error::Data(format!("image {} has no captions", img.image_id)));
        }
        Ok(Self { name: raw.name.clone(), images, captions })
    }

    pub fn pairs(&self) -> Vec<InstancePair> {
        self.captions.iter().enumerate().map(|(c, e)| InstancePair { image: e.image, caption: c }).collect()
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_captions(&self) -> usize {
        self.captions.len()
    }

    pub fn image_index(&self, image_id: u64) -> Option<usize> {
        self.images.iter().position(|i| i.image_id == image_id)
    }

    /// Subset keeping the given images (and all their captions), in the given order.
    pub fn select_images(&self, order: &[usize]) -> Self {
        let mut images = Vec::with_capacity(order.len());
        let mut captions = Vec::new();
        for (new_idx, &old) in order.iter().enumerate() {
            let src = &self.images[old];
            let mut caption_idx = Vec::with_capacity(src.captions.len());
            for &c in &src.captions {
                caption_idx.push(captions.len());
                captions.push(CaptionEntry { image: new_idx, ..self.captions[c].clone() });
            }
            images.push(ImageRecord { captions: caption_idx, ..src.clone() });
        }
        Self { name: self.name.clone(), images, captions }
    }
}

/// Training-side loader: builds the vocabulary from this split's captions.
pub fn load_training(manifest: &DatasetManifest) -> Result<(Dataset, Vocab, Vec<Vec<String>>)> {
    let raw = load_raw(manifest)?;
    let tokenized = raw.tokenized();
    let vocab = Vocab::build(tokenized.iter().map(Vec::as_slice));
    Ok((Dataset::from_raw(&raw, &vocab)?, vocab, tokenized))
}

pub fn load_dataset(manifest: &DatasetManifest, vocab: &Vocab) -> Result<Dataset> {
    Dataset::from_raw(&load_raw(manifest)?, vocab)
}
