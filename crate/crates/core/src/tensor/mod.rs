//! Dense tensors, constant stencils and the reverse-mode tape.

mod gemm;
mod gradcheck;
mod stencil;
mod tape;

pub use gradcheck::{gradcheck, GRADCHECK_STEP};
pub use stencil::{StencilBoundary, StencilKernel};
pub use tape::{ConvBoundary, Gradients, Tape, Var};
