//! Synthetic multimodal phantoms: anatomy and per-modality style are drawn
//! from separate random streams, so their independence holds by construction.

pub mod anatomy;
pub mod dataset;
pub mod render;

pub use anatomy::{sample_anatomy, AnatomyLatent, TumourGeometry};
pub use dataset::{
    dataset_checksum, generate_dataset, load_case, read_manifest, Dataset, Manifest, MultimodalSample, PhantomConfig,
};
pub use render::{render_modality, render_with_style, StyleRecord};
