//! Configuration, dataset files and the synthetic pair generator.

pub mod captions;
pub mod config;
pub mod dataset;
pub mod features;
pub mod manifest;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use captions::CaptionRecord;
pub use config::{RetrievalEmbedding, TrainConfig};
pub use dataset::{load_dataset, load_raw, load_training, Dataset, InstancePair, RawSplit};
pub use manifest::DatasetManifest;
pub use synth::{generate_synthetic, write_split, write_synthetic, SynthConfig, SyntheticData};
pub use vocab::Vocab;
