//! Dense tensor substrate: shaped `f32` arrays and the few kernels the
//! pipeline needs. All kernels are generic over [`Scalar`] so gradient
//! oracles can replay them in `f64`.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    cosine_similarity, gelu, gelu_grad, layernorm, layernorm_cached, matmul, matmul_metered,
    matmul_nt, matmul_tn, relu, softmax_in_place, softmax_rows, topk_indices, LayerNormCache,
    LAYERNORM_EPS,
};
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};
