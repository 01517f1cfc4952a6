use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Describes one split on disk. Relative paths resolve against the
/// manifest's own directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub captions: PathBuf,
    pub features: PathBuf,
    pub images: usize,
    pub captions_per_image: usize,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let (mut split, mut captions, mut features, mut images, mut cpi) = (None, None, None, None, None);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected `key = value`", n + 1)))?;
            let v = v.trim();
            let count = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("manifest: bad count `{v}`")));
            match k.trim() {
                "split" => split = Some(v.to_string()),
                "captions" => captions = Some(base.join(v)),
                "features" => features = Some(base.join(v)),
                "images" => images = Some(count(v)?),
                "captions_per_image" => cpi = Some(count(v)?),
                other => return Err(Error::Config(format!("manifest: unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("manifest is missing `{k}`"));
        Ok(Self {
            split: split.ok_or_else(|| missing("split"))?,
            captions: captions.ok_or_else(|| missing("captions"))?,
            features: features.ok_or_else(|| missing("features"))?,
            images: images.ok_or_else(|| missing("images"))?,
            captions_per_image: cpi.ok_or_else(|| missing("captions_per_image"))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes the manifest with paths relative to `path`'s directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let text = format!(
            "split = {}\ncaptions = {}\nfeatures = {}\nimages = {}\ncaptions_per_image = {}\n",
            self.split,
            rel(&self.captions),
            rel(&self.features),
            self.images,
            self.captions_per_image
        );
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
