//! Conditional-probability debiasing of image quality scores read from a
//! multimodal model's "good"/"poor" token logits.

pub mod distortions;
pub mod image;
pub mod oracle;
pub mod debias;
pub mod eval;
pub mod simulation;
