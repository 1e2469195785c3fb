#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "diffattn/attention.hpp"
#include "diffattn/blocks.hpp"
#include "diffattn/image.hpp"
#include "diffattn/tokenizer.hpp"

namespace diffattn {

class ContextOverflowError : public std::runtime_error {
public:
    explicit ContextOverflowError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t d_head = 16;
    std::size_t n_layers_enc = 2;
    std::size_t n_layers_dec = 2;
    std::size_t vocab_size = 512;
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t max_seq_len = 64;
    AttentionVariant enc_variant = AttentionVariant::Vanilla;
    AttentionVariant dec_variant = AttentionVariant::DiffFinetune;
    FfnKind ffn_kind = FfnKind::SwiGLU;

    std::size_t n_image_tokens() const {
        const std::size_t g = image_size / patch_size;
        return g * g;
    }
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }
    std::size_t n_heads() const { return d_model / d_head; }

    void validate() const {
        if (image_size % patch_size != 0)
            throw ContractError("config: image_size must be divisible by patch_size");
        if (d_model % d_head != 0)
            throw ContractError("config: d_model must be divisible by d_head");
        if (n_image_tokens() >= max_seq_len)
            throw ContractError("config: image tokens must leave room for text in max_seq_len");
    }
};

inline const char* variant_name(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::Vanilla: return "vanilla";
        case AttentionVariant::DiffOriginal: return "diff_original";
        case AttentionVariant::DiffFinetune: return "diff_finetune";
    }
    return "?";
}

inline AttentionVariant variant_from_name(const std::string& s) {
    if (s == "vanilla") return AttentionVariant::Vanilla;
    if (s == "diff_original") return AttentionVariant::DiffOriginal;
    if (s == "diff_finetune") return AttentionVariant::DiffFinetune;
    throw ContractError("unknown attention variant \"" + s + "\"");
}

// Toy PaliGemma-shaped pipeline: patch encoder -> linear projector -> token
// concatenation -> decoder with prefix-LM masking and greedy decoding.
class VlmModel {
public:
    VlmModel(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t d = cfg_.d_model;
        patch_embed_ = init_weight(cfg_.patch_dim(), d, rng);
        img_pos_ = Tensor::randn({cfg_.n_image_tokens(), d}, rng, 0.0f, 0.02f);
        projector_ = init_weight(d, d, rng);
        tok_embed_ = Tensor::randn({cfg_.vocab_size, d}, rng, 0.0f, 0.1f);
        txt_pos_ = Tensor::randn({cfg_.max_seq_len, d}, rng, 0.0f, 0.02f);
        final_norm_ = Tensor::full({d}, 1.0f);
        unembed_ = init_weight(d, cfg_.vocab_size, rng);
        for (std::size_t l = 0; l < cfg_.n_layers_enc; ++l)
            enc_layers_.push_back(make_layer(cfg_.enc_variant, l + 1, rng));
        for (std::size_t l = 0; l < cfg_.n_layers_dec; ++l)
            dec_layers_.push_back(make_layer(cfg_.dec_variant, l + 1, rng));
        set_all_requires_grad(true);
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<LayerParams>& encoder_layers() { return enc_layers_; }
    std::vector<LayerParams>& decoder_layers() { return dec_layers_; }

    // --- forward -----------------------------------------------------------

    // Patchify into [n_patches x patch_dim]; raw pixels carry no gradient.
    Tensor patchify(const Image& im) const {
        if (im.width != cfg_.image_size || im.height != cfg_.image_size)
            throw ContractError("encode_image: expected " + std::to_string(cfg_.image_size) +
                                "x" + std::to_string(cfg_.image_size) + " input, got " +
                                std::to_string(im.width) + "x" + std::to_string(im.height));
        const std::size_t g = cfg_.image_size / cfg_.patch_size, ps = cfg_.patch_size;
        Tensor out(Shape{g * g, cfg_.patch_dim()});
        for (std::size_t py = 0; py < g; ++py)
            for (std::size_t px = 0; px < g; ++px) {
                float* dst = out.data().data() + (py * g + px) * cfg_.patch_dim();
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t y = 0; y < ps; ++y)
                        for (std::size_t x = 0; x < ps; ++x)
                            *dst++ = im.at(c, py * ps + y, px * ps + x);
            }
        return out;
    }

    // Per-patch linear embeddings before positional encoding (probe surface).
    Tensor patch_embeddings(const Image& im) const {
        return matmul(patchify(im), patch_embed_);
    }

    // Full image path: patchify -> embed -> bidirectional encoder -> project.
    Tensor encode_image(const Image& im) const {
        Tensor x = add(patch_embeddings(im), img_pos_);
        AttentionMask mask = AttentionMask::full(cfg_.n_image_tokens());
        for (const auto& layer : enc_layers_) x = layer_forward(x, layer, mask);
        return matmul(x, projector_);
    }

    // Decoder over [image tokens || text tokens]; returns [T x vocab] logits.
    Tensor forward(const Image& im, const std::vector<std::size_t>& text_ids) const {
        const std::size_t n_img = cfg_.n_image_tokens();
        const std::size_t total = n_img + text_ids.size();
        if (total > cfg_.max_seq_len)
            throw ContextOverflowError("sequence of " + std::to_string(total) +
                                       " tokens exceeds max_seq_len " +
                                       std::to_string(cfg_.max_seq_len));
        Tensor img_tokens = encode_image(im);
        std::vector<std::size_t> pos_ids(text_ids.size());
        for (std::size_t i = 0; i < text_ids.size(); ++i) pos_ids[i] = i;
        Tensor txt = add(rows_lookup(tok_embed_, text_ids), rows_lookup(txt_pos_, pos_ids));
        Tensor x = concat_rows({img_tokens, txt});
        AttentionMask mask = AttentionMask::prefix_lm(total, n_img);
        for (const auto& layer : dec_layers_) x = layer_forward(x, layer, mask);
        return matmul(rms_norm(x, final_norm_), unembed_);
    }

    // Mean cross-entropy of next-token prediction, restricted to positions
    // whose *target* index is flagged in `answer_mask` (text coordinates).
    Tensor loss(const Image& im, const std::vector<std::size_t>& text_ids,
                const std::vector<bool>& answer_mask) const {
        if (answer_mask.size() != text_ids.size())
            throw ContractError("loss: answer mask length must match token count");
        const std::size_t n_img = cfg_.n_image_tokens();
        Tensor logits = forward(im, text_ids);
        const std::size_t total = logits.dim(0);
        std::vector<std::size_t> targets(total, 0);
        std::vector<bool> active(total, false);
        // logits at position p predict text token at text index p - n_img + 1
        for (std::size_t t = 1; t < text_ids.size(); ++t) {
            if (!answer_mask[t]) continue;
            targets[n_img + t - 1] = text_ids[t];
            active[n_img + t - 1] = true;
        }
        return cross_entropy_rows(logits, targets, active);
    }

    // Greedy decoding; argmax ties break toward the lowest token id.
    std::vector<std::size_t> generate_greedy(const Image& im,
                                             const std::vector<std::size_t>& prompt,
                                             std::size_t max_new) const {
        if (max_new < 1) throw ContractError("generate_greedy: max_new must be >= 1");
        std::vector<std::size_t> ids = prompt;
        std::vector<std::size_t> out;
        for (std::size_t step = 0; step < max_new; ++step) {
            if (cfg_.n_image_tokens() + ids.size() + 1 > cfg_.max_seq_len)
                throw ContextOverflowError("generation exceeded max_seq_len " +
                                           std::to_string(cfg_.max_seq_len));
            Tensor logits = forward(im, ids);
            const std::size_t last = logits.dim(0) - 1;
            const float* row = logits.data().data() + last * cfg_.vocab_size;
            const std::size_t next =
                std::max_element(row, row + cfg_.vocab_size) - row;
            if (next == ToyTokenizer::kEos) break;
            out.push_back(next);
            ids.push_back(next);
        }
        return out;
    }

    // --- parameters --------------------------------------------------------

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("enc.patch_embed", patch_embed_);
        out.emplace_back("enc.pos", img_pos_);
        collect_layers(out, "enc", enc_layers_);
        out.emplace_back("proj.w", projector_);
        out.emplace_back("dec.tok_embed", tok_embed_);
        out.emplace_back("dec.pos", txt_pos_);
        collect_layers(out, "dec", dec_layers_);
        out.emplace_back("dec.final_norm", final_norm_);
        out.emplace_back("dec.unembed", unembed_);
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> trainable_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        for (auto& [name, t] : named_params())
            if (t.requires_grad()) out.emplace_back(name, t);
        return out;
    }

    void set_all_requires_grad(bool b) {
        for (auto& [name, t] : named_params()) t.set_requires_grad(b);
    }

    // LoRA policy: freeze every base weight, adapt the requested attention
    // projections, leave lambda vectors and per-head norm gains trainable.
    // Valid roles: w_q, w_k, w_v, w_o. With adapt_layer_norms the layer norm
    // gains of adapted layers and the final norm also train — the frozen
    // unembed otherwise caps how confident the model can get.
    std::size_t attach_lora(const std::set<std::string>& targets, std::size_t rank, float alpha,
                            bool adapt_encoder, Rng& rng, bool adapt_layer_norms = false) {
        for (const auto& role : targets)
            if (role != "w_q" && role != "w_k" && role != "w_v" && role != "w_o")
                throw ContractError("attach_lora: unknown weight role \"" + role + "\"");
        set_all_requires_grad(false);
        std::size_t count = 0;
        auto adapt = [&](const std::string& prefix, std::vector<LayerParams>& layers,
                         AttentionVariant variant) {
            for (std::size_t l = 0; l < layers.size(); ++l) {
                auto& a = layers[l].attn;
                const std::string base = prefix + ".layer" + std::to_string(l);
                auto attach = [&](const char* role, Tensor& w, std::optional<LoraAdapter>& slot) {
                    if (!targets.count(role)) return;
                    slot = LoraAdapter::init(w.dim(0), w.dim(1), rank, alpha,
                                             base + ".attn." + role, rng);
                    ++count;
                };
                attach("w_q", a.w_q, a.lora_q);
                attach("w_k", a.w_k, a.lora_k);
                attach("w_v", a.w_v, a.lora_v);
                attach("w_o", a.w_o, a.lora_o);
                for (auto& g : a.head_norm_gains) g.set_requires_grad(true);
                if (adapt_layer_norms) {
                    layers[l].norm1_gain.set_requires_grad(true);
                    layers[l].norm2_gain.set_requires_grad(true);
                }
                if (variant != AttentionVariant::Vanilla) {
                    layers[l].lambda.lambda_q1.set_requires_grad(true);
                    layers[l].lambda.lambda_k1.set_requires_grad(true);
                    layers[l].lambda.lambda_q2.set_requires_grad(true);
                    layers[l].lambda.lambda_k2.set_requires_grad(true);
                }
            }
        };
        adapt("dec", dec_layers_, cfg_.dec_variant);
        if (adapt_encoder) adapt("enc", enc_layers_, cfg_.enc_variant);
        if (adapt_layer_norms) final_norm_.set_requires_grad(true);
        return count;
    }

    std::size_t trainable_param_count() {
        std::size_t n = 0;
        for (auto& [name, t] : trainable_params()) n += t.numel();
        return n;
    }

private:
    static Tensor init_weight(std::size_t d_in, std::size_t d_out, Rng& rng) {
        return Tensor::randn({d_in, d_out}, rng, 0.0f, 1.0f / std::sqrt(static_cast<float>(d_in)));
    }

    LayerParams make_layer(AttentionVariant variant, std::size_t layer_index, Rng& rng) {
        const std::size_t d = cfg_.d_model;
        LayerParams p;
        p.attn.w_q = init_weight(d, d, rng);
        p.attn.w_k = init_weight(d, d, rng);
        p.attn.w_v = init_weight(d, d, rng);
        p.attn.w_o = init_weight(d, d, rng);
        p.attn.n_heads = cfg_.n_heads();
        p.attn.d_head = cfg_.d_head;
        p.attn.variant = variant;
        for (std::size_t h = 0; h < cfg_.n_heads(); ++h)
            p.attn.head_norm_gains.push_back(Tensor::full({cfg_.d_head}, 1.0f));
        const std::size_t lam_dim =
            variant == AttentionVariant::DiffOriginal ? cfg_.d_head / 2 : cfg_.d_head;
        p.lambda = make_lambda_params(std::max<std::size_t>(lam_dim, 1), layer_index, rng);
        p.ffn.kind = cfg_.ffn_kind;
        const std::size_t d_ff =
            cfg_.ffn_kind == FfnKind::SwiGLU ? swiglu_ff_width(d) : 4 * d;
        if (cfg_.ffn_kind == FfnKind::SwiGLU) p.ffn.w_g = init_weight(d, d_ff, rng);
        p.ffn.w_1 = init_weight(d, d_ff, rng);
        p.ffn.w_2 = init_weight(d_ff, d, rng);
        p.norm1_gain = Tensor::full({d}, 1.0f);
        p.norm2_gain = Tensor::full({d}, 1.0f);
        return p;
    }

    void collect_layers(std::vector<std::pair<std::string, Tensor>>& out,
                        const std::string& prefix, std::vector<LayerParams>& layers) {
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string base = prefix + ".layer" + std::to_string(l);
            auto& p = layers[l];
            out.emplace_back(base + ".attn.w_q", p.attn.w_q);
            out.emplace_back(base + ".attn.w_k", p.attn.w_k);
            out.emplace_back(base + ".attn.w_v", p.attn.w_v);
            out.emplace_back(base + ".attn.w_o", p.attn.w_o);
            auto lora_entry = [&](const char* role, std::optional<LoraAdapter>& slot) {
                if (!slot) return;
                out.emplace_back(base + ".attn." + role + ".lora.a", slot->a);
                out.emplace_back(base + ".attn." + role + ".lora.b", slot->b);
            };
            lora_entry("w_q", p.attn.lora_q);
            lora_entry("w_k", p.attn.lora_k);
            lora_entry("w_v", p.attn.lora_v);
            lora_entry("w_o", p.attn.lora_o);
            for (std::size_t h = 0; h < p.attn.head_norm_gains.size(); ++h)
                out.emplace_back(base + ".attn.head" + std::to_string(h) + ".norm_gain",
                                 p.attn.head_norm_gains[h]);
            out.emplace_back(base + ".lambda.q1", p.lambda.lambda_q1);
            out.emplace_back(base + ".lambda.k1", p.lambda.lambda_k1);
            out.emplace_back(base + ".lambda.q2", p.lambda.lambda_q2);
            out.emplace_back(base + ".lambda.k2", p.lambda.lambda_k2);
            if (p.ffn.kind == FfnKind::SwiGLU) out.emplace_back(base + ".ffn.w_g", p.ffn.w_g);
            out.emplace_back(base + ".ffn.w_1", p.ffn.w_1);
            out.emplace_back(base + ".ffn.w_2", p.ffn.w_2);
            out.emplace_back(base + ".norm1", p.norm1_gain);
            out.emplace_back(base + ".norm2", p.norm2_gain);
        }
    }

    ModelConfig cfg_;
    Tensor patch_embed_, img_pos_, projector_;
    Tensor tok_embed_, txt_pos_, final_norm_, unembed_;
    std::vector<LayerParams> enc_layers_;
    std::vector<LayerParams> dec_layers_;
};

}  // namespace diffattn
