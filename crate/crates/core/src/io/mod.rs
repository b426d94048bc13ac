//! On-disk formats: tensor records, datasets and checkpoints.

mod checkpoint;
mod dataset;
pub mod records;

pub use checkpoint::{load_model, read_checkpoint, write_checkpoint, Checkpoint};
pub use dataset::{read_manifest, Dataset, Manifest, Split, MANIFEST_FILE, SPLITS};

/// Version written into every manifest and checkpoint. Readers reject newer ones.
pub const FORMAT_VERSION: u32 = 1;
