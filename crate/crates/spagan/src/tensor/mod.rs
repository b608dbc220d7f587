//! Dense-matrix engine with reverse-mode automatic differentiation and the
//! segment operations needed for attention over variable-size groups.

pub mod adam;
pub mod csr;
pub mod dense;
pub mod gradcheck;
pub mod segment;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use csr::CsrMatrix;
pub use dense::DenseMatrix;
pub use segment::SegmentIndex;
pub use tape::{Tape, TensorId};
