//! Synthetic dataset generation, on-disk indexing, and nested training
//! subsets.

pub mod index;
pub mod subsets;
pub mod synth;

pub use index::{DatasetIndex, LoadedDataset, SampleMeta};
pub use subsets::{make_subsets, SubsetManifest};
pub use synth::{gen_split, Split, SyntheticSceneSpec};
