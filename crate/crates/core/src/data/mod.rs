//! Slide bags, the KBAG binary format, dataset manifests, and the
//! planted-feature synthetic generator.

mod bag;
mod manifest;
mod synthetic;

pub use bag::{decode_bag, encode_bag, grid_coords, load_bag, save_bag, SlideBag};
pub use manifest::{
    split_train_test, write_dataset, DatasetDims, DatasetManifest, ManifestEntry, Split,
    DEFAULT_TEST_FRACTION,
};
pub use synthetic::{choose_planted_features, generate_synthetic, slide_id, PlantedConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic {0:?}, expected \"KBAG\"")]
    BadMagic([u8; 4]),
    #[error("unsupported KBAG version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: header needs {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid label {0}")]
    InvalidLabel(i32),
    #[error("invalid bag {slide_id}: {msg}")]
    InvalidBag { slide_id: String, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot split: {0}")]
    Split(String),
}
