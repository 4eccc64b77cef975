//! Numeric substrate: tensors, affine layers, normalisation and the two
//! reference attention kernels.

mod attention;
mod nn;
mod tensor;

pub use attention::{
    linear_attention_baseline, multi_head_linear_attention, multi_head_softmax_attention,
    softmax_attention, AttentionOutput, LINEAR_ATTENTION_FLOOR,
};
pub use nn::{elu_plus_one, layer_norm, sigmoid, silu, LinearLayer, LAYER_NORM_EPS};
pub use tensor::{matmul, matmul_bt, Tensor};

pub(crate) use attention::{
    check_qkv, linear_attention_backward, linear_attention_kernel, softmax_attention_backward,
    softmax_attention_kernel,
};
pub(crate) use nn::{elu_plus_one_grad, layer_norm_kernel, silu_grad, LayerNormCache};
pub(crate) use tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, shape_str};
