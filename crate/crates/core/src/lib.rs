//! Question-centric document retrieval: passages are indexed by the
//! questions they can answer, and queries are matched against those
//! questions before a language model re-ranks the candidate passages.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod par;
pub mod preq;
pub mod qcluster;
pub mod synth;
pub mod workflow;

pub use error::{Error, Result};
