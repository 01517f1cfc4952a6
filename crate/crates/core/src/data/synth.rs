//! Synthetic paired data with a shared latent per pair.
//!
//! Every pair draws `z ~ U(0,1)^L`. Region `m` of the image is
//! `(z − ½)·P_m + noise·ε` for fixed random projections `P_m`, and caption
//! token `t` names the bucket of `z_t + noise·ε` among `vocab / L` equal
//! buckets, so token `t` is `w{t·Q + bucket}`. Both modalities see the same
//! latent through different channels; `noise` controls how clean the match is.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::captions::{write_captions, CaptionRecord};
use super::dataset::RawSplit;
use super::features::write_features;
use super::manifest::DatasetManifest;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub regions: usize,
    pub feature_dim: usize,
    pub caption_len: usize,
    pub vocab: usize,
    pub noise: f64,
    pub captions_per_image: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 96,
            regions: 6,
            feature_dim: 64,
            caption_len: 8,
            vocab: 64,
            noise: 0.05,
            captions_per_image: 1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: RawSplit,
    pub val: RawSplit,
    pub test: RawSplit,
}

impl SynthConfig {
    pub fn buckets(&self) -> usize {
        self.vocab / self.caption_len.max(1)
    }

    /// `(train, val, test)` image counts: val and test get `n/6` each (at least one).
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let held = (self.n_pairs / 6).max(1);
        (self.n_pairs - 2 * held, held, held)
    }

    fn validate(&self) -> Result<()> {
        if self.n_pairs < 4 {
            return Err(Error::Input(format!("need at least 4 pairs, got {}", self.n_pairs)));
        }
        if self.regions == 0 || self.feature_dim == 0 || self.caption_len == 0 || self.captions_per_image == 0 {
            return Err(Error::Input("regions, feature_dim, caption_len and captions_per_image must be positive".into()));
        }
        if self.buckets() < 2 {
            return Err(Error::Input(format!(
                "vocab {} gives fewer than 2 buckets per caption position ({} positions)",
                self.vocab, self.caption_len
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Input(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (l, f, q) = (cfg.caption_len, cfg.feature_dim, cfg.buckets());
    let projections: Vec<Vec<f64>> =
        (0..cfg.regions).map(|_| (0..l * f).map(|_| gaussian(&mut rng)).collect()).collect();

    let mut images = Vec::with_capacity(cfg.n_pairs);
    let mut captions = Vec::with_capacity(cfg.n_pairs * cfg.captions_per_image);
    for image_id in 0..cfg.n_pairs as u64 {
        let z: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();

        let mut feats = Vec::with_capacity(cfg.regions * f);
        for proj in &projections {
            for col in 0..f {
                let mut v: f64 = (0..l).map(|t| (z[t] - 0.5) * proj[t * f + col]).sum();
                v += cfg.noise * gaussian(&mut rng);
                // stored as f32 on disk; keep memory identical to a reload
                feats.push(v as f32 as f64);
            }
        }
        images.push((image_id, Tensor::matrix(cfg.regions, f, feats)?));

        for c in 0..cfg.captions_per_image {
            let tokens = (0..l)
                .map(|t| {
                    let noisy = (z[t] + cfg.noise * gaussian(&mut rng)).clamp(0.0, 1.0 - 1e-12);
                    let bucket = ((noisy * q as f64) as usize).min(q - 1);
                    format!("w{}", t * q + bucket)
                })
                .collect();
            captions.push(CaptionRecord {
                image_id,
                caption_id: image_id * cfg.captions_per_image as u64 + c as u64,
                tokens,
            });
        }
    }

    let (n_train, n_val, _) = cfg.split_sizes();
    let cpi = cfg.captions_per_image;
    let split = |name: &str, range: std::ops::Range<usize>| RawSplit {
        name: name.to_string(),
        images: images[range.clone()].to_vec(),
        captions: captions[range.start * cpi..range.end * cpi].to_vec(),
        captions_per_image: cpi,
    };
    Ok(SyntheticData {
        train: split("train", 0..n_train),
        val: split("val", n_train..n_train + n_val),
        test: split("test", n_train + n_val..cfg.n_pairs),
    })
}

/// Writes `<split>.manifest`, `<split>_captions.jsonl` and `<split>_features.rgft`.
pub fn write_split(dir: &Path, split: &RawSplit) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        split: split.name.clone(),
        captions: dir.join(format!("{}_captions.jsonl", split.name)),
        features: dir.join(format!("{}_features.rgft", split.name)),
        images: split.images.len(),
        captions_per_image: split.captions_per_image,
    };
    write_captions(&manifest.captions, &split.captions)?;
    write_features(&manifest.features, &split.images)?;
    manifest.save(&dir.join(format!("{}.manifest", split.name)))?;
    Ok(manifest)
}

pub fn write_synthetic(dir: &Path, data: &SyntheticData) -> Result<[DatasetManifest; 3]> {
    Ok([write_split(dir, &data.train)?, write_split(dir, &data.val)?, write_split(dir, &data.test)?])
}
