//! Decoding: beam search, prefix-constrained alternatives, gap infilling
//! and int8 inference.

mod beam;
mod infer;
pub mod kernels;
mod quant;

pub use beam::{
    beam_search, beam_search_with_prefix, greedy_decode, infill_gaps, prefix_constrained_decode, Alternative,
    BeamConfig, BeamHypothesis, OutputFilter,
};
pub use infer::{DecoderCache, EncoderOutput, InferenceModel};
pub use quant::{quantize_int8, QTensor, QuantizedParams};

use crate::Result;

/// Log-probabilities of an int8 model; same contract as
/// [`crate::model::forward`].
pub fn forward_quantized(q: &QuantizedParams, source_ids: &[u32], target_prefix_ids: &[u32]) -> Result<Vec<Vec<f32>>> {
    InferenceModel::from_quantized(q)?.forward(source_ids, target_prefix_ids)
}
