#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "diffattn/rng.hpp"

namespace diffattn {

// Thrown when tensor shapes do not satisfy an operation's contract.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a non-shape precondition is violated.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;          // same length as data when requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;   // accumulates into parents' grad

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

}  // namespace detail

// Dense row-major float32 tensor with reverse-mode autodiff. Value type over
// a shared graph node; ops record a backward closure on the result node.
// Immutable once created except through backward() and the optimizer.
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    explicit Tensor(Shape shape) : node_(std::make_shared<detail::Node>()) {
        node_->shape = std::move(shape);
        node_->data.assign(shape_numel(node_->shape), 0.0f);
    }

    Tensor(Shape shape, std::vector<float> data) : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), v);
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, float mean = 0.0f, float stddev = 1.0f) {
        Tensor t(std::move(shape));
        for (auto& x : t.node_->data) x = rng.normal(mean, stddev);
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    std::vector<float>& data() { return node_->data; }
    const std::vector<float>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        if (b) node_->ensure_grad();
        return *this;
    }

    std::vector<float>& grad() { return node_->grad; }
    const std::vector<float>& grad() const { return node_->grad; }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0f); }

    float& at(std::size_t i, std::size_t j) {
        return node_->data[i * node_->shape[1] + j];
    }
    float at(std::size_t i, std::size_t j) const {
        return node_->data[i * node_->shape[1] + j];
    }
    float item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Reverse-mode backward from a scalar. Replays the recorded tape (reverse
    // topological order over the graph reachable from this node); every node
    // is visited exactly once.
    void backward() {
        if (numel() != 1) throw ContractError("backward() requires a scalar loss");
        std::vector<detail::Node*> tape;
        std::unordered_set<detail::Node*> seen;
        std::function<void(detail::Node*)> visit = [&](detail::Node* n) {
            if (!seen.insert(n).second) return;
            for (auto& p : n->parents) visit(p.get());
            tape.push_back(n);
        };
        visit(node_.get());
        for (auto* n : tape)
            if (n->requires_grad || n->backward) n->ensure_grad();
        node_->ensure_grad();
        node_->grad[0] = 1.0f;
        for (auto it = tape.rbegin(); it != tape.rend(); ++it)
            if ((*it)->backward) (*it)->backward();
    }

    // Internal: graph construction helpers used by the free ops below.
    std::shared_ptr<detail::Node> node() const { return node_; }

    static Tensor from_node(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), 0.0f);
    bool grad_needed = false;
    for (auto& p : parents) grad_needed = grad_needed || p->requires_grad || p->backward;
    n->requires_grad = grad_needed;
    if (grad_needed) n->parents = std::move(parents);
    return Tensor::from_node(n);
}

inline bool wants_grad(const std::shared_ptr<Node>& n) {
    return n->requires_grad || n->backward;
}

inline void set_backward(Tensor& out, std::function<void()> fn) {
    if (out.node()->requires_grad) out.node()->backward = std::move(fn);
}

}  // namespace detail

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// Elementwise and matrix ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = detail::make_result(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::set_backward(out, [an, bn, on] {
        if (detail::wants_grad(an)) {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        }
        if (detail::wants_grad(bn)) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = detail::make_result(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::set_backward(out, [an, bn, on] {
        if (detail::wants_grad(an)) {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        }
        if (detail::wants_grad(bn)) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = detail::make_result(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::set_backward(out, [an, bn, on] {
        if (detail::wants_grad(an)) {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * bn->data[i];
        }
        if (detail::wants_grad(bn)) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                bn->grad[i] += on->grad[i] * an->data[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, float c) {
    Tensor out = detail::make_result(a.shape(), {a.node()});
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * c;
    auto an = a.node(), on = out.node();
    detail::set_backward(out, [an, on, c] {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
    return out;
}

inline Tensor add_const(const Tensor& a, float c) {
    Tensor out = detail::make_result(a.shape(), {a.node()});
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + c;
    auto an = a.node(), on = out.node();
    detail::set_backward(out, [an, on] {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
    return out;
}

// out[i] = a[i] * s (s a 1-element tensor); differentiable in both.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1)
        throw ShapeError("scale_by: scale must be a scalar tensor, got " + shape_str(s.shape()));
    Tensor out = detail::make_result(a.shape(), {a.node(), s.node()});
    const float sv = s.data()[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * sv;
    auto an = a.node(), sn = s.node(), on = out.node();
    detail::set_backward(out, [an, sn, on] {
        if (detail::wants_grad(an)) {
            an->ensure_grad();
            const float sv = sn->data[0];
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * sv;
        }
        if (detail::wants_grad(sn)) {
            sn->ensure_grad();
            float acc = 0.0f;
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                acc += on->grad[i] * an->data[i];
            sn->grad[0] += acc;
        }
    });
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = detail::make_result({m, n}, {a.node(), b.node()});
    const float* A = a.data().data();
    const float* B = b.data().data();
    float* C = out.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const float av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
        }
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::set_backward(out, [an, bn, on, m, k, n] {
        const float* G = on->grad.data();
        if (detail::wants_grad(an)) {  // dA = dC * B^T
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    float acc = 0.0f;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += G[i * n + j] * bn->data[p * n + j];
                    an->grad[i * k + p] += acc;
                }
        }
        if (detail::wants_grad(bn)) {  // dB = A^T * dC
            bn->ensure_grad();
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) {
                    float acc = 0.0f;
                    for (std::size_t i = 0; i < m; ++i)
                        acc += an->data[i * k + p] * G[i * n + j];
                    bn->grad[p * n + j] += acc;
                }
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2)
        throw ShapeError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_result({n, m}, {a.node()});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    auto an = a.node(), on = out.node();
    detail::set_backward(out, [an, on, m, n] {
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                an->grad[i * n + j] += on->grad[j * m + i];
    });
    return out;
}

// Row-stable softmax: per-row max subtraction so +-1000 logits stay finite.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.shape().size() != 2)
        throw ShapeError("softmax_rows: expected 2-d tensor, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = detail::make_result(x.shape(), {x.node()});
    for (std::size_t i = 0; i < m; ++i) {
        const float* row = x.data().data() + i * n;
        float* orow = out.data().data() + i * n;
        float mx = *std::max_element(row, row + n);
        float sum = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    auto xn = x.node(), on = out.node();
    detail::set_backward(out, [xn, on, m, n] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            const float* s = on->data.data() + i * n;
            const float* g = on->grad.data() + i * n;
            float dot = 0.0f;
            for (std::size_t j = 0; j < n; ++j) dot += s[j] * g[j];
            for (std::size_t j = 0; j < n; ++j)
                xn->grad[i * n + j] += s[j] * (g[j] - dot);
        }
    });
    return out;
}

// y_ij = x_ij / sqrt(mean_j(x_ij^2) + eps) * gain_j
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-6f) {
    if (x.shape().size() != 2)
        throw ShapeError("rms_norm: expected 2-d tensor, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gain.numel() != n)
        throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match width " +
                         std::to_string(n));
    Tensor out = detail::make_result(x.shape(), {x.node(), gain.node()});
    std::vector<float> inv_rms(m);
    for (std::size_t i = 0; i < m; ++i) {
        const float* row = x.data().data() + i * n;
        float ms = 0.0f;
        for (std::size_t j = 0; j < n; ++j) ms += row[j] * row[j];
        ms /= static_cast<float>(n);
        inv_rms[i] = 1.0f / std::sqrt(ms + eps);
        for (std::size_t j = 0; j < n; ++j)
            out.data()[i * n + j] = row[j] * inv_rms[i] * gain.data()[j];
    }
    auto xn = x.node(), gn = gain.node(), on = out.node();
    detail::set_backward(out, [xn, gn, on, inv_rms, m, n] {
        for (std::size_t i = 0; i < m; ++i) {
            const float* row = xn->data.data() + i * n;
            const float* g = on->grad.data() + i * n;
            const float r = inv_rms[i];
            if (detail::wants_grad(xn)) {
                xn->ensure_grad();
                // d/dx of x*r(x)*gain with r = (mean(x^2)+eps)^-1/2
                float dot = 0.0f;
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * gn->data[j] * row[j];
                const float coeff = dot * r * r * r / static_cast<float>(n);
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[i * n + j] += g[j] * gn->data[j] * r - coeff * row[j];
            }
            if (detail::wants_grad(gn)) {
                gn->ensure_grad();
                for (std::size_t j = 0; j < n; ++j) gn->grad[j] += g[j] * row[j] * r;
            }
        }
    });
    return out;
}

inline Tensor swish(const Tensor& x) {
    Tensor out = detail::make_result(x.shape(), {x.node()});
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const float v = x.data()[i];
        out.data()[i] = v / (1.0f + std::exp(-v));
    }
    auto xn = x.node(), on = out.node();
    detail::set_backward(out, [xn, on] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            const float v = xn->data[i];
            const float s = 1.0f / (1.0f + std::exp(-v));
            xn->grad[i] += on->grad[i] * (s + v * s * (1.0f - s));
        }
    });
    return out;
}

// tanh-approximation GELU, used by the plain-MLP feed-forward.
inline Tensor gelu(const Tensor& x) {
    constexpr float kSqrt2OverPi = 0.7978845608f;
    Tensor out = detail::make_result(x.shape(), {x.node()});
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const float v = x.data()[i];
        const float t = std::tanh(kSqrt2OverPi * (v + 0.044715f * v * v * v));
        out.data()[i] = 0.5f * v * (1.0f + t);
    }
    auto xn = x.node(), on = out.node();
    detail::set_backward(out, [xn, on, kSqrt2OverPi] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            const float v = xn->data[i];
            const float u = kSqrt2OverPi * (v + 0.044715f * v * v * v);
            const float t = std::tanh(u);
            const float du = kSqrt2OverPi * (1.0f + 3.0f * 0.044715f * v * v);
            xn->grad[i] += on->grad[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du);
        }
    });
    return out;
}

inline Tensor exp_elem(const Tensor& x) {
    Tensor out = detail::make_result(x.shape(), {x.node()});
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::exp(x.data()[i]);
    auto xn = x.node(), on = out.node();
    detail::set_backward(out, [xn, on] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
            xn->grad[i] += on->grad[i] * on->data[i];
    });
    return out;
}

// Dot product of two equal-length vectors -> scalar tensor.
inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel())
        throw ContractError("dot: length mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    Tensor out = detail::make_result({1}, {a.node(), b.node()});
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
    out.data()[0] = acc;
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::set_backward(out, [an, bn, on] {
        const float g = on->grad[0];
        if (detail::wants_grad(an)) {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += g * bn->data[i];
        }
        if (detail::wants_grad(bn)) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] += g * an->data[i];
        }
    });
    return out;
}

inline Tensor sum(const Tensor& x) {
    Tensor out = detail::make_result({1}, {x.node()});
    out.data()[0] = std::accumulate(x.data().begin(), x.data().end(), 0.0f);
    auto xn = x.node(), on = out.node();
    detail::set_backward(out, [xn, on] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += on->grad[0];
    });
    return out;
}

// Columns [c0, c1) of a 2-d tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.shape().size() != 2 || c1 > x.dim(1) || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
    Tensor out = detail::make_result({m, w}, {x.node()});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
            out.data()[i * w + j] = x.data()[i * n + c0 + j];
    auto xn = x.node(), on = out.node();
    detail::set_backward(out, [xn, on, m, n, w, c0] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
                xn->grad[i * n + c0 + j] += on->grad[i * w + j];
    });
    return out;
}

// Channel-axis concatenation of equal-height 2-d tensors.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const std::size_t m = parts[0].dim(0);
    std::size_t total = 0;
    std::vector<std::shared_ptr<detail::Node>> parents;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(0) != m)
            throw ShapeError("concat_cols: row mismatch at " + shape_str(p.shape()));
        total += p.dim(1);
        parents.push_back(p.node());
    }
    Tensor out = detail::make_result({m, total}, parents);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out.data()[i * total + off + j] = p.data()[i * w + j];
        off += w;
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    auto on = out.node();
    detail::set_backward(out, [nodes, widths, on, m, total] {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            const std::size_t w = widths[k];
            if (detail::wants_grad(nodes[k])) {
                nodes[k]->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        nodes[k]->grad[i * w + j] += on->grad[i * total + off + j];
            }
            off += w;
        }
    });
    return out;
}

// Vertical concatenation of equal-width 2-d tensors.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    const std::size_t n = parts[0].dim(1);
    std::size_t total = 0;
    std::vector<std::shared_ptr<detail::Node>> parents;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(1) != n)
            throw ShapeError("concat_rows: column mismatch at " + shape_str(p.shape()));
        total += p.dim(0);
        parents.push_back(p.node());
    }
    Tensor out = detail::make_result({total, n}, parents);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off * n);
        off += p.dim(0);
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::vector<std::size_t> heights;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        heights.push_back(p.dim(0));
    }
    auto on = out.node();
    detail::set_backward(out, [nodes, heights, on, n] {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            if (detail::wants_grad(nodes[k])) {
                nodes[k]->ensure_grad();
                for (std::size_t i = 0; i < heights[k] * n; ++i)
                    nodes[k]->grad[i] += on->grad[off * n + i];
            }
            off += heights[k];
        }
    });
    return out;
}

// Gather rows of an embedding table; grad scatters back into the table.
inline Tensor rows_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
    if (table.shape().size() != 2)
        throw ShapeError("rows_lookup: expected 2-d table, got " + shape_str(table.shape()));
    const std::size_t rows = table.dim(0), d = table.dim(1);
    for (auto id : ids)
        if (id >= rows)
            throw ContractError("rows_lookup: id " + std::to_string(id) + " out of range " +
                                std::to_string(rows));
    Tensor out = detail::make_result({ids.size(), d}, {table.node()});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().data() + ids[i] * d, d, out.data().data() + i * d);
    auto tn = table.node(), on = out.node();
    detail::set_backward(out, [tn, on, ids, d] {
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                tn->grad[ids[i] * d + j] += on->grad[i * d + j];
    });
    return out;
}

// Mean softmax-cross-entropy over the rows selected by `active`; inactive
// rows contribute nothing (loss masking).
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& targets,
                                 const std::vector<bool>& active) {
    if (logits.shape().size() != 2)
        throw ShapeError("cross_entropy_rows: expected 2-d logits, got " + shape_str(logits.shape()));
    const std::size_t m = logits.dim(0), n = logits.dim(1);
    if (targets.size() != m || active.size() != m)
        throw ContractError("cross_entropy_rows: targets/mask length must equal row count");
    std::size_t n_active = 0;
    for (bool b : active) n_active += b;
    if (n_active == 0) throw ContractError("cross_entropy_rows: no active rows");

    Tensor out = detail::make_result({1}, {logits.node()});
    std::vector<float> probs(m * n);
    float loss = 0.0f;
    for (std::size_t i = 0; i < m; ++i) {
        if (!active[i]) continue;
        const float* row = logits.data().data() + i * n;
        float mx = *std::max_element(row, row + n);
        float sum = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
            probs[i * n + j] = std::exp(row[j] - mx);
            sum += probs[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= sum;
        loss -= std::log(std::max(probs[i * n + targets[i]], 1e-30f));
    }
    out.data()[0] = loss / static_cast<float>(n_active);
    auto ln = logits.node(), on = out.node();
    detail::set_backward(out, [ln, on, probs, targets, active, m, n, n_active] {
        ln->ensure_grad();
        const float g = on->grad[0] / static_cast<float>(n_active);
        for (std::size_t i = 0; i < m; ++i) {
            if (!active[i]) continue;
            for (std::size_t j = 0; j < n; ++j) {
                float p = probs[i * n + j];
                ln->grad[i * n + j] += g * (p - (j == targets[i] ? 1.0f : 0.0f));
            }
        }
    });
    return out;
}

}  // namespace diffattn
