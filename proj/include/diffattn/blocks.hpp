#pragma once

#include "diffattn/attention.hpp"
#include "diffattn/tensor.hpp"

namespace diffattn {

enum class FfnKind { SwiGLU, PlainMLP };

// SwiGLU default width: round(8/3 * d_model) rounded up to a multiple of 8.
inline std::size_t swiglu_ff_width(std::size_t d_model) {
    std::size_t w = static_cast<std::size_t>(std::lround(8.0 * d_model / 3.0));
    return (w + 7) / 8 * 8;
}

struct FeedForwardParams {
    FfnKind kind = FfnKind::SwiGLU;
    Tensor w_g;  // [d_model x d_ff], unused by PlainMLP
    Tensor w_1;  // [d_model x d_ff]
    Tensor w_2;  // [d_ff x d_model]
};

// SwiGLU(X) = (swish(X W^G) . X W1) W2
inline Tensor swiglu(const Tensor& x, const FeedForwardParams& p) {
    if (p.kind != FfnKind::SwiGLU)
        throw ContractError("swiglu: feed-forward kind is not SwiGLU");
    return matmul(mul(swish(matmul(x, p.w_g)), matmul(x, p.w_1)), p.w_2);
}

// Up-projection, GELU, down-projection. Stand-in for the PaliGemma MLP.
inline Tensor plain_mlp(const Tensor& x, const FeedForwardParams& p) {
    if (p.kind != FfnKind::PlainMLP)
        throw ContractError("plain_mlp: feed-forward kind is not PlainMLP");
    return matmul(gelu(matmul(x, p.w_1)), p.w_2);
}

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
    return p.kind == FfnKind::SwiGLU ? swiglu(x, p) : plain_mlp(x, p);
}

struct LayerParams {
    AttentionParams attn;
    LambdaParams lambda;
    FeedForwardParams ffn;
    Tensor norm1_gain;  // [d_model]
    Tensor norm2_gain;  // [d_model]
};

// Pre-norm residual layer:
//   y = multi_head(rms_norm(x)) + x
//   out = ffn(rms_norm(y)) + y
inline Tensor layer_forward(const Tensor& x, const LayerParams& p, const AttentionMask& mask,
                            std::optional<float> lambda_override = std::nullopt) {
    Tensor y = add(multi_head(rms_norm(x, p.norm1_gain), p.attn, p.lambda, mask, lambda_override), x);
    return add(feed_forward(rms_norm(y, p.norm2_gain), p.ffn), y);
}

}  // namespace diffattn
