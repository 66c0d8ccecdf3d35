//! Synthetic training data: procedural roots rendered at 2x, soil
//! backgrounds at 1x, and their composition into aligned samples.

mod compose;
mod dataset;
mod raster;
mod root;
mod soil;

pub use compose::{compose_sample, make_dontcare, Augmentation, Sample, Symmetry};
pub use dataset::{generate_dataset, generate_sample, load_sample, DatasetConfig, Manifest, SampleEntry, SampleFiles, Split, MANIFEST_FILE};
pub use raster::rasterize;
pub use root::{generate_root, Attachment, Branch, Point, RootGenParams, RootSystem, GRAVITY};
pub use soil::{make_soil, Octave, SoilSpec, SyntheticSoil};
