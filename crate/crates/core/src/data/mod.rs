//! Synthetic glyph segmentation dataset and federated partitioning.

pub mod generate;
pub mod glyphs;
pub mod io;
pub mod partition;

pub use generate::{generate_dataset, generate_sample, DataConfig, Dataset, Sample, SplitTag};
pub use glyphs::{GlyphKind, DEFAULT_ALPHABET};
pub use io::{dataset_hash, load_dataset, save_dataset};
pub use partition::{partition, FederatedSplit, Scheme};
