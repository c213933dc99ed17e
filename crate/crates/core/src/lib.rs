//! Closed-form tensor voting in `d` dimensions.
//!
//! * [`tensor`]: tensor types, decay, closed-form vote, inverse vote, accumulation.
//! * [`oracle`]: brute-force discrete votes and classic voting fields.
//! * [`spatial`]: point sets and an exact radius-query k-d tree.
//! * [`mrftv`]: iterative refinement of structure-aware tensors on a Markov random field.
//! * [`emtv`]: EM estimation of a hyperplane through the origin with tensor-voting constraints.
//! * [`robustfit`]: total least squares, RANSAC and fundamental-matrix estimation.
//! * [`datagen`]: seeded synthetic data and robustness sweeps.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod emtv;
pub mod error;
pub mod mrftv;
pub mod oracle;
pub mod robustfit;
pub mod spatial;
pub mod tensor;

pub use error::{Result, TvError};
pub use spatial::{NeighborIndex, PointSet};
pub use tensor::{Decompose, Point, Saliency, Scale, SymTensor, VoteMode, VoteTensor};
