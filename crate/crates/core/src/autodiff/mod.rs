//! Dense tensors with reverse-mode differentiation that can itself be
//! differentiated.
//!
//! Computation is recorded on a [`Tape`]; [`Tape::gradients`] with
//! `create_graph = true` records the backward sweep too, which is how
//! second-order meta-gradients through unrolled inner loops are formed.

mod conv;
mod element;
mod fd;
mod grad;
mod loss;
mod ops;
mod param;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use element::Element;
pub use fd::{finite_difference_oracle, max_relative_error};
pub use loss::{accuracy, argmax_rows, cross_entropy};
pub use param::ParamSet;
pub use tape::{Op, Tape, Var};
pub use tensor::{numel, Tensor};
