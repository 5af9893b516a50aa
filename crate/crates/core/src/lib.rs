//! Multi-modal causal attention (MMCA) and the data machinery around it:
//! modality-aware masks, the dual-softmax attention kernel with analytic
//! gradients, the interleaved instruction template with answer-only loss,
//! multi-image conversation blending, and a frozen-decoder toy model.

pub mod attn;
pub mod blend;
pub mod cli;
pub mod gradcheck;
pub mod mask;
pub mod modseq;
pub mod template;
pub mod tensor;
pub mod toy_model;
