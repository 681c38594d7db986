//! Volume files, split manifests and the synthetic dataset generator.

pub mod format;
pub mod manifest;
pub mod synth;

pub use format::{read_image, read_labels, read_volume, write_image, write_labels, VolumeFile};
pub use manifest::{split_dataset, Dataset, ManifestEntry, SplitManifest, SplitTag};
pub use synth::{generate_synthetic, synth_volume, SynthSpec, MANIFEST_NAME};
