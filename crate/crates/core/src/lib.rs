//! Desk-scale study of efficient in-context learning (prompt templates,
//! k-shot selection), parameter-efficient fine-tuning (layer freezing, LoRA),
//! and their combination, on a small decoder-only transformer trained from
//! scratch with exact analytic gradients.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod peft;
pub mod prompt;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
