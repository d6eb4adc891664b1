//! The book chapters, compiled as doc-tests.
//!
//! mdBook cannot run its code fences against crate dependencies, so each
//! chapter is included here as module documentation and `cargo test --doc`
//! exercises every runnable snippet. Keep `book/src/SUMMARY.md` and this
//! list in sync.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tape-and-gradients.md")]
pub mod tape_and_gradients {}

#[doc = include_str!("../../../book/src/toy-model.md")]
pub mod toy_model {}

#[doc = include_str!("../../../book/src/steering-the-stream.md")]
pub mod steering_the_stream {}

#[doc = include_str!("../../../book/src/training-directions.md")]
pub mod training_directions {}

#[doc = include_str!("../../../book/src/concept-cones.md")]
pub mod concept_cones {}

#[doc = include_str!("../../../book/src/independence.md")]
pub mod independence {}

#[doc = include_str!("../../../book/src/suffix-attacks.md")]
pub mod suffix_attacks {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
