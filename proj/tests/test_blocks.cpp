#include <gtest/gtest.h>

#include <cmath>

#include "diffattn/blocks.hpp"
#include "diffattn/gradcheck.hpp"
#include "test_util.hpp"

using namespace diffattn;

namespace {

FeedForwardParams make_ffn(std::size_t d_model, FfnKind kind, Rng& rng) {
    FeedForwardParams p;
    p.kind = kind;
    const std::size_t d_ff = kind == FfnKind::SwiGLU ? swiglu_ff_width(d_model) : 4 * d_model;
    if (kind == FfnKind::SwiGLU) p.w_g = Tensor::randn({d_model, d_ff}, rng, 0.0f, 0.3f);
    p.w_1 = Tensor::randn({d_model, d_ff}, rng, 0.0f, 0.3f);
    p.w_2 = Tensor::randn({d_ff, d_model}, rng, 0.0f, 0.3f);
    return p;
}

LayerParams make_layer(std::size_t d_model, std::size_t n_heads, AttentionVariant variant,
                       FfnKind kind, std::size_t layer_index, Rng& rng) {
    LayerParams p;
    p.attn.w_q = Tensor::randn({d_model, d_model}, rng, 0.0f, 0.3f);
    p.attn.w_k = Tensor::randn({d_model, d_model}, rng, 0.0f, 0.3f);
    p.attn.w_v = Tensor::randn({d_model, d_model}, rng, 0.0f, 0.3f);
    p.attn.w_o = Tensor::randn({d_model, d_model}, rng, 0.0f, 0.3f);
    p.attn.n_heads = n_heads;
    p.attn.d_head = d_model / n_heads;
    p.attn.variant = variant;
    for (std::size_t h = 0; h < n_heads; ++h)
        p.attn.head_norm_gains.push_back(Tensor::full({p.attn.d_head}, 1.0f));
    p.lambda = make_lambda_params(p.attn.d_head, layer_index, rng);
    p.ffn = make_ffn(d_model, kind, rng);
    p.norm1_gain = Tensor::full({d_model}, 1.0f);
    p.norm2_gain = Tensor::full({d_model}, 1.0f);
    return p;
}

}  // namespace

TEST(SwigluWidth, RoundsEightThirdsUpToMultipleOfEight) {
    // 8/3*64 = 170.67 -> 171 -> 176; 8/3*6 = 16 exactly; 8/3*3 = 8 exactly.
    EXPECT_EQ(swiglu_ff_width(64), 176u);
    EXPECT_EQ(swiglu_ff_width(6), 16u);
    EXPECT_EQ(swiglu_ff_width(3), 8u);
    for (std::size_t d = 1; d <= 128; ++d) {
        EXPECT_EQ(swiglu_ff_width(d) % 8, 0u);
        EXPECT_GE(8.0 * swiglu_ff_width(d), 8.0 * d / 3.0);
    }
}

TEST(Swiglu, ZeroInputGivesZero) {
    Rng rng(1);
    auto p = make_ffn(4, FfnKind::SwiGLU, rng);
    Tensor out = swiglu(Tensor::zeros({2, 4}), p);
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Swiglu, ZeroGateZerosEverything) {
    Rng rng(2);
    auto p = make_ffn(4, FfnKind::SwiGLU, rng);
    p.w_g = Tensor::zeros(p.w_g.shape());  // swish(0) = 0 kills the product
    Tensor x = Tensor::randn({3, 4}, rng);
    Tensor out = swiglu(x, p);
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Swiglu, MatchesScalarLoopOracle) {
    Rng rng(3);
    const std::size_t n = 3, d_model = 6;
    auto p = make_ffn(d_model, FfnKind::SwiGLU, rng);
    const std::size_t d_ff = p.w_1.dim(1);
    Tensor x = Tensor::randn({n, d_model}, rng);
    Tensor out = swiglu(x, p);
    auto g = oracle::matmul_naive(x.data(), p.w_g.data(), n, d_model, d_ff);
    auto u = oracle::matmul_naive(x.data(), p.w_1.data(), n, d_model, d_ff);
    std::vector<float> h(n * d_ff);
    for (std::size_t i = 0; i < h.size(); ++i)
        h[i] = g[i] / (1.0f + std::exp(-g[i])) * u[i];
    auto expected = oracle::matmul_naive(h, p.w_2.data(), n, d_ff, d_model);
    EXPECT_LT(oracle::max_rel_diff(out.data(), expected), 1e-5f);
}

TEST(PlainMlp, MatchesScalarLoopOracle) {
    Rng rng(4);
    const std::size_t n = 2, d_model = 5;
    auto p = make_ffn(d_model, FfnKind::PlainMLP, rng);
    const std::size_t d_ff = p.w_1.dim(1);
    EXPECT_EQ(d_ff, 4 * d_model);
    Tensor x = Tensor::randn({n, d_model}, rng);
    Tensor out = plain_mlp(x, p);
    auto u = oracle::matmul_naive(x.data(), p.w_1.data(), n, d_model, d_ff);
    std::vector<float> h(n * d_ff);
    for (std::size_t i = 0; i < h.size(); ++i) {
        const float c = std::sqrt(2.0f / static_cast<float>(M_PI));
        h[i] = 0.5f * u[i] * (1.0f + std::tanh(c * (u[i] + 0.044715f * u[i] * u[i] * u[i])));
    }
    auto expected = oracle::matmul_naive(h, p.w_2.data(), n, d_ff, d_model);
    EXPECT_LT(oracle::max_rel_diff(out.data(), expected), 1e-5f);
}

TEST(FeedForward, KindMismatchRejected) {
    Rng rng(5);
    auto p = make_ffn(4, FfnKind::SwiGLU, rng);
    EXPECT_THROW(plain_mlp(Tensor::zeros({1, 4}), p), ContractError);
    p.kind = FfnKind::PlainMLP;
    EXPECT_THROW(swiglu(Tensor::zeros({1, 4}), p), ContractError);
}

TEST(Layer, ZeroedBranchesPassResidualThrough) {
    Rng rng(6);
    const std::size_t d_model = 8, n = 3;
    auto p = make_layer(d_model, 2, AttentionVariant::Vanilla, FfnKind::SwiGLU, 1, rng);
    p.attn.w_o = Tensor::zeros({d_model, d_model});
    p.ffn.w_2 = Tensor::zeros(p.ffn.w_2.shape());
    Tensor x = Tensor::randn({n, d_model}, rng);
    Tensor out = layer_forward(x, p, AttentionMask::causal(n));
    EXPECT_LT(oracle::max_abs_diff(out.data(), x.data()), 1e-7f);
}

TEST(Layer, DecomposesIntoTwoResidualBranches) {
    Rng rng(7);
    const std::size_t d_model = 8, n = 4;
    auto p = make_layer(d_model, 2, AttentionVariant::DiffFinetune, FfnKind::SwiGLU, 2, rng);
    Tensor x = Tensor::randn({n, d_model}, rng);
    auto mask = AttentionMask::causal(n);
    Tensor out = layer_forward(x, p, mask);
    Tensor y = add(multi_head(rms_norm(x, p.norm1_gain), p.attn, p.lambda, mask), x);
    Tensor expected = add(feed_forward(rms_norm(y, p.norm2_gain), p.ffn), y);
    EXPECT_LT(oracle::max_abs_diff(out.data(), expected.data()), 1e-7f);
}

TEST(Layer, CausalMaskMakesPrefixRowsFutureInvariant) {
    Rng rng(8);
    const std::size_t d_model = 8, n = 5;
    auto p = make_layer(d_model, 2, AttentionVariant::DiffOriginal, FfnKind::SwiGLU, 1, rng);
    Tensor x = Tensor::randn({n, d_model}, rng);
    auto mask = AttentionMask::causal(n);
    Tensor out = layer_forward(x, p, mask);
    // Perturb the last token; earlier rows must not move at all.
    Tensor x2 = x;
    for (std::size_t j = 0; j < d_model; ++j) x2.at(n - 1, j) += 1.0f;
    Tensor out2 = layer_forward(x2, p, mask);
    for (std::size_t i = 0; i + 1 < n; ++i)
        for (std::size_t j = 0; j < d_model; ++j)
            EXPECT_EQ(out.at(i, j), out2.at(i, j)) << "row " << i;
}

TEST(Layer, StackingTwoLayersMatchesComposition) {
    Rng rng(9);
    const std::size_t d_model = 8, n = 3;
    auto p1 = make_layer(d_model, 2, AttentionVariant::DiffFinetune, FfnKind::SwiGLU, 1, rng);
    auto p2 = make_layer(d_model, 2, AttentionVariant::DiffFinetune, FfnKind::SwiGLU, 2, rng);
    Tensor x = Tensor::randn({n, d_model}, rng);
    auto mask = AttentionMask::causal(n);
    Tensor composed = layer_forward(layer_forward(x, p1, mask), p2, mask);
    Tensor step = layer_forward(x, p1, mask);
    Tensor expected = layer_forward(step, p2, mask);
    EXPECT_EQ(composed.data(), expected.data());
    EXPECT_EQ(composed.shape(), x.shape());
}

TEST(Layer, FullLayerGradCheck) {
    Rng rng(10);
    const std::size_t d_model = 4, n = 3;
    auto p = make_layer(d_model, 1, AttentionVariant::DiffOriginal, FfnKind::SwiGLU, 1, rng);
    Tensor x = Tensor::randn({n, d_model}, rng);
    Tensor probe = Tensor::randn({n, d_model}, rng);
    auto mask = AttentionMask::causal(n);
    std::vector<Tensor> params = {p.attn.w_q, p.attn.w_v,         p.ffn.w_g,
                                  p.ffn.w_2,  p.attn.head_norm_gains[0], p.norm1_gain};
    auto base = [&] { return sum(mul(probe, layer_forward(x, p, mask))); };
    auto anchors = oracle::make_aligned_anchors(base, params, rng, 0.5f, 1.0f);
    auto f = [&] { return oracle::with_anchors(base(), params, anchors); };
    // h=3e-3 balances truncation through the deep composition against float32
    // rounding noise; the anchors keep every coordinate clear of the floor.
    EXPECT_LT(grad_check(f, params, 3e-3f), 1e-3f);
}
