//! 2D sparse tensors and sparse convolution.
//!
//! A tensor stores features only at its active sites. Site sets are shared
//! through [`Arc<ActiveSet>`] so that the many layers operating on one
//! resolution reuse a single coordinate index. Convolutions run over a
//! [`Rulebook`] that lists, for every output site and kernel offset, the
//! input site feeding it.

mod conv;
mod ops;
mod rulebook;
mod tensor;

pub use conv::{conv_int8, conv_real, sparse_conv, sparse_conv_stride2, submanifold_conv, ConvKernel, QuantConv};
pub use ops::{
    relu, sparse_add_projected, sparse_add_projected_q, sparse_max_pool, sparse_max_pool_with,
};
pub use rulebook::{Rulebook, NO_INPUT};
pub use tensor::{ActiveSet, Coord, QuantTensor, RealTensor, SparseTensor2D};

/// Outputs processed per parallel work item.
pub(crate) const PAR_CHUNK: usize = 64;
