//! MRI quality control toolkit: NIfTI-1 volumes, no-reference quality
//! metrics, seeded k-space artifact simulation, instruction-tuning QA
//! corpus generation, low-rank adapter arithmetic and evaluation.

pub mod artifact;
pub mod evaluation;
pub mod llm;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod qa;
pub mod segmentation;
pub mod volume;
