#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffattn/checkpoint.hpp"
#include "diffattn/config.hpp"
#include "diffattn/vlm.hpp"

namespace diffattn {

// Raised on NaN/Inf gradients or loss; maps to the CLI's numeric exit code.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class LrRule { Explicit, ConstantTimesBatch };

struct TrainConfig {
    std::size_t batch_size = 4;
    double lr = 4e-4;
    LrRule lr_rule = LrRule::ConstantTimesBatch;
    double lr_constant = 1e-4;  // lr = constant * batch_size under ConstantTimesBatch
    std::size_t lora_rank = 32;
    double lora_alpha = 64.0;   // rank * 2 under the default policy
    double weight_decay = 1e-9;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // 0 = no cap
    std::uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip_norm = 1.0;
    bool adapt_encoder = false;
    bool train_layer_norms = false;
    std::set<std::string> lora_targets = {"w_q", "w_k", "w_v", "w_o"};

    double effective_lr() const {
        return lr_rule == LrRule::ConstantTimesBatch
                   ? lr_constant * static_cast<double>(batch_size)
                   : lr;
    }
};

// Per-tensor Adam moments.
struct AdamState {
    std::vector<float> m, v;
    std::size_t step = 0;
};

// One Adam update with bias correction. Decoupled weight decay is applied as
// a multiplicative shrink before the moment update.
inline void adam_step(const std::string& name, Tensor& param, AdamState& state, double lr,
                      double beta1, double beta2, double eps, double weight_decay) {
    const auto& g = param.grad();
    if (g.size() != param.numel())
        throw ContractError("adam_step: " + name + " has no gradient buffer");
    for (float gv : g)
        if (!std::isfinite(gv))
            throw NumericError("adam_step: non-finite gradient in tensor " + name);
    if (state.m.size() != param.numel()) {
        state.m.assign(param.numel(), 0.0f);
        state.v.assign(param.numel(), 0.0f);
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    auto& data = param.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (weight_decay != 0.0) data[i] *= static_cast<float>(1.0 - lr * weight_decay);
        state.m[i] = static_cast<float>(beta1 * state.m[i] + (1.0 - beta1) * g[i]);
        state.v[i] = static_cast<float>(beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i]);
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
}

// One (image, question, answers) record; answers is exactly 10 strings for
// VQA data but training only needs a single target string.
struct TrainSample {
    Image image;
    std::string question;
    std::string answer;
};

struct MetricRecord {
    std::size_t step;
    double loss;
    double lr;
    double lambda_mean;
};

struct TrainResult {
    std::vector<MetricRecord> log;
    std::size_t skipped = 0;
};

inline double mean_lambda(VlmModel& model) {
    double acc = 0.0;
    std::size_t n = 0;
    for (auto& layer : model.decoder_layers()) {
        acc += compute_lambda(layer.lambda).item();
        ++n;
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

// Token sequence for one sample: BOS question SEP answer EOS, with the loss
// mask covering the answer tokens and EOS only.
inline std::pair<std::vector<std::size_t>, std::vector<bool>> build_training_tokens(
    const ToyTokenizer& tok, const std::string& question, const std::string& answer) {
    std::vector<std::size_t> ids{ToyTokenizer::kBos};
    for (auto id : tok.encode(question)) ids.push_back(id);
    ids.push_back(ToyTokenizer::kSep);
    const std::size_t answer_start = ids.size();
    for (auto id : tok.encode(answer)) ids.push_back(id);
    ids.push_back(ToyTokenizer::kEos);
    std::vector<bool> mask(ids.size(), false);
    for (std::size_t i = answer_start; i < ids.size(); ++i) mask[i] = true;
    return {ids, mask};
}

class Trainer {
public:
    Trainer(VlmModel& model, const ToyTokenizer& tok, TrainConfig cfg)
        : model_(model), tok_(tok), cfg_(std::move(cfg)) {}

    // Iterates shuffled mini-batches; returns the metric log. Context
    // overflows are skipped and counted, never fatal.
    TrainResult train(const std::vector<TrainSample>& dataset,
                      std::ostream* metrics_out = nullptr,
                      const std::filesystem::path& ckpt_dir = {}) {
        if (dataset.empty()) throw ContractError("train: dataset is empty");
        auto trainables = model_.trainable_params();
        if (trainables.empty()) throw ContractError("train: model has no trainable tensors");

        Rng shuffle_rng(cfg_.seed);
        const double lr = cfg_.effective_lr();
        TrainResult result;
        std::size_t step = 0;
        bool done = false;
        for (std::size_t epoch = 0; epoch < cfg_.epochs && !done; ++epoch) {
            std::vector<std::size_t> order(dataset.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

            for (std::size_t start = 0; start < order.size() && !done;
                 start += cfg_.batch_size) {
                const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
                for (auto& [name, t] : trainables) t.zero_grad();
                double batch_loss = 0.0;
                std::size_t used = 0;
                for (std::size_t i = start; i < end; ++i) {
                    const auto& s = dataset[order[i]];
                    auto [ids, mask] = build_training_tokens(tok_, s.question, s.answer);
                    try {
                        Tensor l = model_.loss(s.image, ids, mask);
                        if (!std::isfinite(l.item()))
                            throw NumericError("train: non-finite loss at step " +
                                               std::to_string(step + 1));
                        batch_loss += l.item();
                        l.backward();
                        ++used;
                    } catch (const ContextOverflowError&) {
                        ++result.skipped;
                    }
                }
                if (used == 0) continue;
                // Gradients were accumulated over `used` samples; average them.
                const float inv = 1.0f / static_cast<float>(used);
                for (auto& [name, t] : trainables)
                    for (auto& g : t.grad()) g *= inv;
                clip_gradients(trainables, cfg_.clip_norm);
                ++step;
                if (lr != 0.0)
                    for (auto& [name, t] : trainables)
                        adam_step(name, t, states_[name], lr, cfg_.beta1, cfg_.beta2, cfg_.eps,
                                  cfg_.weight_decay);
                MetricRecord rec{step, batch_loss / static_cast<double>(used), lr,
                                 mean_lambda(model_)};
                result.log.push_back(rec);
                if (metrics_out)
                    *metrics_out << nlohmann::json{{"step", rec.step},
                                                   {"loss", rec.loss},
                                                   {"lr", rec.lr},
                                                   {"lambda_mean", rec.lambda_mean}}
                                        .dump()
                                 << "\n";
                if (cfg_.max_steps && step >= cfg_.max_steps) done = true;
            }
            if (!ckpt_dir.empty())
                save_model(ckpt_dir / ("epoch" + std::to_string(epoch) + ".ckpt"), step);
        }
        return result;
    }

    void save_model(const std::filesystem::path& path, std::size_t step) {
        Checkpoint c = snapshot_model(model_, tok_);
        c.metadata["step"] = step;
        c.metadata["train"] = {{"lora_rank", cfg_.lora_rank},
                               {"lora_alpha", cfg_.lora_alpha},
                               {"adapt_encoder", cfg_.adapt_encoder},
                               {"train_layer_norms", cfg_.train_layer_norms},
                               {"lora_targets", cfg_.lora_targets},
                               {"seed", cfg_.seed}};
        ckpt::save(path, c);
    }

    static Checkpoint snapshot_model(VlmModel& model, const ToyTokenizer& tok) {
        Checkpoint c;
        for (auto& [name, t] : model.named_params()) c.tensors.emplace(name, t);
        const auto& cfg = model.config();
        c.metadata["config"] = {{"d_model", cfg.d_model},
                                {"d_head", cfg.d_head},
                                {"n_layers_enc", cfg.n_layers_enc},
                                {"n_layers_dec", cfg.n_layers_dec},
                                {"vocab_size", cfg.vocab_size},
                                {"image_size", cfg.image_size},
                                {"patch_size", cfg.patch_size},
                                {"max_seq_len", cfg.max_seq_len},
                                {"enc_variant", variant_name(cfg.enc_variant)},
                                {"dec_variant", variant_name(cfg.dec_variant)},
                                {"ffn_kind", cfg.ffn_kind == FfnKind::SwiGLU ? "swiglu" : "mlp"}};
        c.metadata["vocab"] = tok.words();
        return c;
    }

private:
    static void clip_gradients(std::vector<std::pair<std::string, Tensor>>& params,
                               double max_norm) {
        if (max_norm <= 0.0) return;
        double sq = 0.0;
        for (auto& [name, t] : params)
            for (float g : t.grad()) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (norm <= max_norm) return;
        const float s = static_cast<float>(max_norm / norm);
        for (auto& [name, t] : params)
            for (auto& g : t.grad()) g *= s;
    }

    VlmModel& model_;
    const ToyTokenizer& tok_;
    TrainConfig cfg_;
    std::map<std::string, AdamState> states_;
};

// Rebuilds a model (and its tokenizer) from a checkpoint written by
// Trainer::save_model / snapshot_model.
inline std::pair<VlmModel, ToyTokenizer> load_model(const std::filesystem::path& path) {
    Checkpoint c = ckpt::load(path);
    if (!c.metadata.contains("config"))
        throw CheckpointError("checkpoint " + path.string() + " has no model config");
    const auto& j = c.metadata["config"];
    ModelConfig cfg;
    cfg.d_model = j.at("d_model");
    cfg.d_head = j.at("d_head");
    cfg.n_layers_enc = j.at("n_layers_enc");
    cfg.n_layers_dec = j.at("n_layers_dec");
    cfg.vocab_size = j.at("vocab_size");
    cfg.image_size = j.at("image_size");
    cfg.patch_size = j.at("patch_size");
    cfg.max_seq_len = j.at("max_seq_len");
    cfg.enc_variant = variant_from_name(j.at("enc_variant"));
    cfg.dec_variant = variant_from_name(j.at("dec_variant"));
    cfg.ffn_kind = j.at("ffn_kind") == "swiglu" ? FfnKind::SwiGLU : FfnKind::PlainMLP;

    Rng rng(0);
    VlmModel model(cfg, rng);
    if (c.metadata.contains("train")) {
        const auto& t = c.metadata["train"];
        std::set<std::string> targets;
        for (const auto& s : t.at("lora_targets")) targets.insert(s.get<std::string>());
        if (!targets.empty())
            model.attach_lora(targets, t.at("lora_rank").get<std::size_t>(),
                              t.at("lora_alpha").get<float>(),
                              t.at("adapt_encoder").get<bool>(), rng,
                              t.value("train_layer_norms", false));
    }
    for (auto& [name, t] : model.named_params()) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end())
            throw CheckpointError("checkpoint missing tensor " + name);
        if (it->second.shape() != t.shape())
            throw CheckpointError("checkpoint shape mismatch for " + name);
        t.data() = it->second.data();
    }

    std::vector<std::string> vocab;
    if (c.metadata.contains("vocab"))
        vocab = c.metadata["vocab"].get<std::vector<std::string>>();
    std::set<std::string> words(vocab.begin(), vocab.end());
    ToyTokenizer tok(words);
    return {std::move(model), std::move(tok)};
}

}  // namespace diffattn
