//! Dataset preparation: preprocessing, splitting, manifests and a synthetic
//! paired-radiograph generator.

mod dataset;
mod preprocess;
mod synthetic;

pub use dataset::{
    prepare_dataset, read_blacklist, split_counts, split_dataset, DataSource, LoadedPair, Manifest, ManifestEntry,
    PrepareConfig, PrepareOutcome, Split, MANIFEST_FILE,
};
pub use preprocess::{clahe, jsrt_to_negative, normalize_min_max, preprocess, resize, ContrastCurve, PreprocessConfig};
pub use synthetic::{generate_synthetic_pairs, SyntheticConfig, SyntheticPair};
