//! The classifier: frequency interaction encoder, prototype compensation,
//! refinement head and composite loss.

pub mod blocks;
mod config;
mod net;

pub use blocks::{
    consistency_loss, encoder_forward, enhance_high, fim_forward, freq_separate, picm_forward,
    refine_head, refine_low, total_loss, LossTerms,
};
pub use config::{Inputs, ModelConfig, Variant, DEFAULT_LAMBDA, HSI_STEM_MAPS};
pub use net::{Bound, ForwardPass, PicnetModel};
