#pragma once

#include <string>

#include "diffattn/tensor.hpp"

namespace diffattn {

// Low-rank adapter attached to a frozen base weight: the effective weight is
// base + (alpha/r) * a * b. b starts at zero so an adapted model is exactly
// the frozen model at init.
struct LoraAdapter {
    Tensor a;        // [d_in x r]
    Tensor b;        // [r x d_out]
    std::size_t rank = 0;
    float alpha = 0.0f;
    std::string target;  // name of the base weight this adapter shadows

    static LoraAdapter init(std::size_t d_in, std::size_t d_out, std::size_t rank, float alpha,
                            std::string target, Rng& rng) {
        if (rank == 0 || rank > std::min(d_in, d_out) / 2)
            throw ContractError("lora: rank " + std::to_string(rank) + " must be in [1, min(" +
                                std::to_string(d_in) + "," + std::to_string(d_out) + ")/2]");
        LoraAdapter ad;
        ad.a = Tensor::randn({d_in, rank}, rng, 0.0f, 1.0f / static_cast<float>(rank));
        ad.a.set_requires_grad(true);
        ad.b = Tensor::zeros({rank, d_out});
        ad.b.set_requires_grad(true);
        ad.rank = rank;
        ad.alpha = alpha;
        ad.target = std::move(target);
        return ad;
    }

    float scaling() const { return alpha / static_cast<float>(rank); }
};

namespace lora {

// x*base + (alpha/r)*(x*a)*b. Gradients flow to a and b only; the caller
// keeps base frozen (requires_grad false).
inline Tensor apply(const Tensor& base, const LoraAdapter& ad, const Tensor& x) {
    if (ad.a.dim(0) != base.dim(0) || ad.b.dim(1) != base.dim(1))
        throw ShapeError("lora apply: adapter " + shape_str(ad.a.shape()) + "*" +
                         shape_str(ad.b.shape()) + " does not match base " +
                         shape_str(base.shape()));
    Tensor main = matmul(x, base);
    Tensor delta = matmul(matmul(x, ad.a), ad.b);
    return add(main, scale(delta, ad.scaling()));
}

// base + (alpha/r)*a*b as a plain (non-tracked) tensor.
inline Tensor merge(const Tensor& base, const LoraAdapter& ad) {
    const std::size_t d_in = base.dim(0), d_out = base.dim(1), r = ad.rank;
    Tensor out(Shape{d_in, d_out});
    const float s = ad.scaling();
    for (std::size_t i = 0; i < d_in; ++i)
        for (std::size_t k = 0; k < r; ++k) {
            const float av = ad.a.data()[i * r + k] * s;
            for (std::size_t j = 0; j < d_out; ++j)
                out.data()[i * d_out + j] += av * ad.b.data()[k * d_out + j];
        }
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] += base.data()[i];
    return out;
}

}  // namespace lora
}  // namespace diffattn
