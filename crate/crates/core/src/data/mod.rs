//! Dataset bundles, preprocessing, patch extraction and synthetic scenes.

mod bundle;
mod patches;
mod preprocess;
mod synth;

pub use bundle::{bundle_files, load_bundle, save_bundle, DatasetBundle, LabelMap, Meta, Split};
pub use patches::{crop_into, extract_patches, patches_at, reflect, PatchBatch, PatchStream};
pub use preprocess::{
    normalize, pca_apply, pca_fit, pca_inverse, resample_nn, Normalizer, PcaModel, Preprocessor,
};
pub use synth::{synth_generate, Difficulty, SynthSpec};
