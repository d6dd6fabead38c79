pub mod dqr;
pub mod encoder;
pub mod kb;
pub mod llm;
pub mod pipeline;
pub mod rewriter;
pub mod synthetic;
pub mod text;
