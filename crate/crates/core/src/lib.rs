//! Segment-level visual place recognition.
//!
//! Images are described by many overlapping SuperSegment descriptors
//! instead of one global vector. Each segment mask is grown with its
//! Delaunay neighbors, features under the grown mask are aggregated with
//! hard-assignment VLAD, and every descriptor is searched in an exact flat
//! index. Segment hits are voted into an image ranking by summed
//! similarity.

pub mod aggregate;
pub mod dimred;
pub mod error;
pub mod evalbench;
pub mod filtering;
pub mod io;
pub mod matrix;
pub mod pipeline;
pub mod retrieval;
pub mod seggraph;
pub mod vocab;

pub use error::{Error, Result};
