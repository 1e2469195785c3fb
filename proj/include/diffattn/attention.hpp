#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "diffattn/lora.hpp"
#include "diffattn/tensor.hpp"

namespace diffattn {

enum class AttentionVariant { Vanilla, DiffOriginal, DiffFinetune };

// Boolean attention mask, true = attend allowed.
class AttentionMask {
public:
    AttentionMask(std::size_t n, bool allow_all) : n_(n), allowed_(n * n, allow_all) {}

    static AttentionMask full(std::size_t n) { return AttentionMask(n, true); }

    // Lower-triangular inclusive of the diagonal.
    static AttentionMask causal(std::size_t n) {
        AttentionMask m(n, false);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) m.allowed_[i * n + j] = true;
        return m;
    }

    // Prefix-LM: the first `prefix_len` positions attend bidirectionally and
    // are visible everywhere; the remainder is causal.
    static AttentionMask prefix_lm(std::size_t n, std::size_t prefix_len) {
        AttentionMask m(n, false);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                m.allowed_[i * n + j] = (j < prefix_len) || (j <= i && i >= prefix_len);
        return m;
    }

    std::size_t size() const { return n_; }
    bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * n_ + j]; }
    void set(std::size_t i, std::size_t j, bool v) { allowed_[i * n_ + j] = v; }

    // Additive logit mask: 0 where allowed, a large negative value where not.
    // -1e9 underflows to an exactly-zero attention weight after the stable
    // softmax, while keeping every stored value finite.
    Tensor additive(std::size_t rows) const {
        Tensor t(Shape{rows, n_});
        for (std::size_t i = 0; i < rows && i < n_; ++i)
            for (std::size_t j = 0; j < n_; ++j)
                t.data()[i * n_ + j] = allowed_[i * n_ + j] ? 0.0f : -1e9f;
        return t;
    }

private:
    std::size_t n_;
    std::vector<bool> allowed_;
};

// One layer's lambda parameterization: four learnable vectors plus the
// depth-dependent init constant. lambda is shared across heads in a layer.
struct LambdaParams {
    Tensor lambda_q1, lambda_k1, lambda_q2, lambda_k2;
    float lambda_init = 0.0f;
    std::size_t layer_index = 1;
};

// lambda_init(l) = 0.8 - 0.6*exp(-0.3*(l-1)), l >= 1; in [0.2, 0.8).
// Evaluated in double so deep layers stay strictly below 0.8.
inline double lambda_init_schedule(std::size_t layer_index) {
    if (layer_index < 1)
        throw ContractError("lambda_init_schedule: layer index must be >= 1");
    return 0.8 - 0.6 * std::exp(-0.3 * static_cast<double>(layer_index - 1));
}

// Exact-zero init would kill the gradient through both exp factors, so the
// vectors start as small noise; lambda stays near lambda_init but trainable.
inline LambdaParams make_lambda_params(std::size_t dim, std::size_t layer_index, Rng& rng,
                                       float init_stddev = 0.05f) {
    LambdaParams p;
    p.lambda_q1 = Tensor::randn({dim}, rng, 0.0f, init_stddev).set_requires_grad(true);
    p.lambda_k1 = Tensor::randn({dim}, rng, 0.0f, init_stddev).set_requires_grad(true);
    p.lambda_q2 = Tensor::randn({dim}, rng, 0.0f, init_stddev).set_requires_grad(true);
    p.lambda_k2 = Tensor::randn({dim}, rng, 0.0f, init_stddev).set_requires_grad(true);
    p.lambda_init = static_cast<float>(lambda_init_schedule(layer_index));
    p.layer_index = layer_index;
    return p;
}

// lambda = exp(lq1.lk1) - exp(lq2.lk2) + lambda_init, as a scalar tensor so
// gradients reach all four vectors.
inline Tensor compute_lambda(const LambdaParams& p) {
    if (p.lambda_q1.numel() != p.lambda_k1.numel() ||
        p.lambda_q1.numel() != p.lambda_q2.numel() ||
        p.lambda_q1.numel() != p.lambda_k2.numel())
        throw ContractError("compute_lambda: lambda vector dims disagree");
    Tensor t1 = exp_elem(dot(p.lambda_q1, p.lambda_k1));
    Tensor t2 = exp_elem(dot(p.lambda_q2, p.lambda_k2));
    return add_const(sub(t1, t2), p.lambda_init);
}

// Full-layer attention parameters. w_q/w_k/w_v pack all heads along columns
// (head i owns columns [i*d_head, (i+1)*d_head)); adapters, when attached,
// shadow the corresponding frozen base weight.
struct AttentionParams {
    Tensor w_q, w_k, w_v;  // [d_model x d_model]
    Tensor w_o;            // [d_model x d_model]
    std::size_t n_heads = 1;
    std::size_t d_head = 1;
    AttentionVariant variant = AttentionVariant::Vanilla;
    std::vector<Tensor> head_norm_gains;  // per head, [d_head], for the post-head RMSNorm
    std::optional<LoraAdapter> lora_q, lora_k, lora_v, lora_o;
};

namespace detail_attn {

inline Tensor project(const Tensor& x, const Tensor& w, const std::optional<LoraAdapter>& ad) {
    return ad ? lora::apply(w, *ad, x) : matmul(x, w);
}

// softmax((q k^T)*scale + mask), optionally exposing the weight matrix.
inline Tensor masked_softmax_scores(const Tensor& q, const Tensor& k, float scale_factor,
                                    const AttentionMask& mask,
                                    std::vector<float>* weights_out) {
    const std::size_t n = q.dim(0);
    if (mask.size() != k.dim(0))
        throw ContractError("attention: mask size " + std::to_string(mask.size()) +
                            " does not match key count " + std::to_string(k.dim(0)));
    Tensor logits = scale(matmul(q, transpose(k)), scale_factor);
    Tensor weights = softmax_rows(add(logits, mask.additive(n)));
    if (weights_out) *weights_out = weights.data();
    return weights;
}

}  // namespace detail_attn

// Single-head scaled-dot-product attention. w_q/w_k/w_v are per-head slices
// [d_model x d_head]; output is [N x d_head].
inline Tensor vanilla_attention(const Tensor& x, const Tensor& w_q, const Tensor& w_k,
                                const Tensor& w_v, const AttentionMask& mask,
                                std::vector<float>* weights_out = nullptr) {
    Tensor q = matmul(x, w_q);
    Tensor k = matmul(x, w_k);
    Tensor v = matmul(x, w_v);
    const float scale_factor = 1.0f / std::sqrt(static_cast<float>(w_q.dim(1)));
    Tensor weights = detail_attn::masked_softmax_scores(q, k, scale_factor, mask, weights_out);
    return matmul(weights, v);
}

// Original differential attention for one head, two-softmax form:
// w_q/w_k are [d_model x d_head] whose first d_head/2 columns form set 1 and
// the rest set 2; both softmax maps share the mask. Output is [N x d_head].
inline Tensor diff_attention_original(const Tensor& x, const Tensor& w_q, const Tensor& w_k,
                                      const Tensor& w_v, const LambdaParams& lam,
                                      const AttentionMask& mask,
                                      std::optional<float> lambda_override = std::nullopt,
                                      std::vector<float>* weights_out = nullptr) {
    const std::size_t width = w_q.dim(1);
    if (width % 2 != 0)
        throw ContractError("diff_attention_original: head width must be even, got " +
                            std::to_string(width));
    const std::size_t d = width / 2;
    Tensor q = matmul(x, w_q);
    Tensor k = matmul(x, w_k);
    Tensor v = matmul(x, w_v);
    Tensor q1 = slice_cols(q, 0, d), q2 = slice_cols(q, d, width);
    Tensor k1 = slice_cols(k, 0, d), k2 = slice_cols(k, d, width);
    const float scale_factor = 1.0f / std::sqrt(static_cast<float>(d));
    Tensor s1 = detail_attn::masked_softmax_scores(q1, k1, scale_factor, mask, weights_out);
    Tensor s2 = detail_attn::masked_softmax_scores(q2, k2, scale_factor, mask, nullptr);
    Tensor lambda = lambda_override ? Tensor::scalar(*lambda_override) : compute_lambda(lam);
    return matmul(sub(s1, scale_by(s2, lambda)), v);
}

// Fine-tuning variant: one Q/K set duplicated, so the two softmax terms are
// literally the same computation and the output is (1-lambda) * vanilla.
inline Tensor diff_attention_finetune(const Tensor& x, const Tensor& w_q, const Tensor& w_k,
                                      const Tensor& w_v, const LambdaParams& lam,
                                      const AttentionMask& mask,
                                      std::optional<float> lambda_override = std::nullopt,
                                      std::vector<float>* weights_out = nullptr) {
    Tensor q = matmul(x, w_q);
    Tensor k = matmul(x, w_k);
    Tensor v = matmul(x, w_v);
    const float scale_factor = 1.0f / std::sqrt(static_cast<float>(w_q.dim(1)));
    Tensor weights = detail_attn::masked_softmax_scores(q, k, scale_factor, mask, weights_out);
    Tensor lambda = lambda_override ? Tensor::scalar(*lambda_override) : compute_lambda(lam);
    Tensor diff = sub(weights, scale_by(weights, lambda));
    return matmul(diff, v);
}

// Multi-head combination: per-head attention with the layer-shared lambda,
// each head output RMS-normalized and scaled by (1 - lambda_init), heads
// concatenated along channels and projected by w_o.
inline Tensor multi_head(const Tensor& x, const AttentionParams& p, const LambdaParams& lam,
                         const AttentionMask& mask,
                         std::optional<float> lambda_override = std::nullopt) {
    const std::size_t d_model = x.dim(1);
    if (p.n_heads * p.d_head != d_model)
        throw ContractError("multi_head: n_heads*d_head = " +
                            std::to_string(p.n_heads * p.d_head) + " must equal d_model " +
                            std::to_string(d_model));
    if (p.head_norm_gains.size() != p.n_heads)
        throw ContractError("multi_head: expected one norm gain per head");

    Tensor q_full = detail_attn::project(x, p.w_q, p.lora_q);
    Tensor k_full = detail_attn::project(x, p.w_k, p.lora_k);
    Tensor v_full = detail_attn::project(x, p.w_v, p.lora_v);

    Tensor lambda = lambda_override ? Tensor::scalar(*lambda_override) : compute_lambda(lam);
    const float scale_full = 1.0f / std::sqrt(static_cast<float>(p.d_head));

    std::vector<Tensor> heads;
    heads.reserve(p.n_heads);
    for (std::size_t h = 0; h < p.n_heads; ++h) {
        const std::size_t c0 = h * p.d_head, c1 = c0 + p.d_head;
        Tensor q = slice_cols(q_full, c0, c1);
        Tensor k = slice_cols(k_full, c0, c1);
        Tensor v = slice_cols(v_full, c0, c1);

        Tensor head;
        switch (p.variant) {
            case AttentionVariant::Vanilla: {
                Tensor w = detail_attn::masked_softmax_scores(q, k, scale_full, mask, nullptr);
                head = matmul(w, v);
                break;
            }
            case AttentionVariant::DiffOriginal: {
                if (p.d_head % 2 != 0)
                    throw ContractError("multi_head: DiffOriginal requires even d_head");
                const std::size_t d = p.d_head / 2;
                const float scale_half = 1.0f / std::sqrt(static_cast<float>(d));
                Tensor s1 = detail_attn::masked_softmax_scores(
                    slice_cols(q, 0, d), slice_cols(k, 0, d), scale_half, mask, nullptr);
                Tensor s2 = detail_attn::masked_softmax_scores(
                    slice_cols(q, d, p.d_head), slice_cols(k, d, p.d_head), scale_half,
                    mask, nullptr);
                head = matmul(sub(s1, scale_by(s2, lambda)), v);
                break;
            }
            case AttentionVariant::DiffFinetune: {
                Tensor w = detail_attn::masked_softmax_scores(q, k, scale_full, mask, nullptr);
                head = matmul(sub(w, scale_by(w, lambda)), v);
                break;
            }
        }
        // Tiny eps so the head norm is scale-invariant to float precision;
        // with eps=1e-6 a lambda change leaks ~1e-4 through the norm.
        Tensor normed = rms_norm(head, p.head_norm_gains[h], 1e-12f);
        heads.push_back(scale(normed, 1.0f - lam.lambda_init));
    }
    Tensor concat = concat_cols(heads);
    return detail_attn::project(concat, p.w_o, p.lora_o);
}

}  // namespace diffattn
