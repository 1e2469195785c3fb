// diffattn: single entry point for training, evaluation, gradient checking,
// and checkpoint inspection over the flat key=value config format.
//
// Exit codes: 0 ok, 2 bad input/config, 3 numeric failure, 4 corrupt artifact.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffattn/blocks.hpp"
#include "diffattn/gradcheck.hpp"
#include "diffattn/needle.hpp"
#include "diffattn/training.hpp"
#include "diffattn/vqa.hpp"

namespace fs = std::filesystem;
using namespace diffattn;

namespace {

constexpr int kOk = 0;
constexpr int kBadInput = 2;
constexpr int kNumeric = 3;
constexpr int kCorrupt = 4;

// ---------------------------------------------------------------------------
// Run manifests

std::uint64_t fnv1a_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open input file " + path.string());
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void atomic_write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw ConfigError("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, path);
}

void write_manifest(const fs::path& path, const std::string& command, const Config& cfg,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
    nlohmann::json in_hashes = nlohmann::json::object();
    for (const auto& p : inputs) {
        char hex[24];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(fnv1a_file(p)));
        in_hashes[p.string()] = hex;
    }
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& p : outputs) outs.push_back(p.string());
    nlohmann::json m{{"command", command},
                     {"created", utc_now()},
                     {"config_snapshot", cfg.snapshot()},
                     {"inputs", in_hashes},
                     {"outputs", outs}};
    atomic_write_text(path, m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Config -> typed settings

const std::vector<std::string> kKnownKeys = {
    "model.d_model",     "model.d_head",       "model.n_layers_enc", "model.n_layers_dec",
    "model.image_size",  "model.patch_size",   "model.max_seq_len",  "model.enc_variant",
    "model.dec_variant", "model.ffn_kind",     "train.batch_size",   "train.lr",
    "train.lr_rule",     "train.lr_constant",  "train.lora_rank",    "train.lora_alpha",
    "train.weight_decay","train.epochs",       "train.max_steps",    "train.seed",
    "train.clip_norm",   "train.adapt_encoder","train.train_layer_norms",
    "train.lora_targets","data.train",
};

ModelConfig model_config_from(const Config& cfg) {
    ModelConfig m;
    m.d_model = static_cast<std::size_t>(cfg.get_int("model.d_model", 16));
    m.d_head = static_cast<std::size_t>(cfg.get_int("model.d_head", 8));
    m.n_layers_enc = static_cast<std::size_t>(cfg.get_int("model.n_layers_enc", 1));
    m.n_layers_dec = static_cast<std::size_t>(cfg.get_int("model.n_layers_dec", 2));
    m.image_size = static_cast<std::size_t>(cfg.get_int("model.image_size", 16));
    m.patch_size = static_cast<std::size_t>(cfg.get_int("model.patch_size", 8));
    m.max_seq_len = static_cast<std::size_t>(cfg.get_int("model.max_seq_len", 16));
    m.enc_variant = variant_from_name(cfg.get_string("model.enc_variant", "vanilla"));
    m.dec_variant = variant_from_name(cfg.get_string("model.dec_variant", "diff_finetune"));
    const std::string ffn = cfg.get_string("model.ffn_kind", "swiglu");
    if (ffn != "swiglu" && ffn != "mlp")
        throw ConfigError("config key model.ffn_kind: expected swiglu or mlp, got \"" + ffn + "\"");
    m.ffn_kind = ffn == "swiglu" ? FfnKind::SwiGLU : FfnKind::PlainMLP;
    return m;
}

TrainConfig train_config_from(const Config& cfg) {
    TrainConfig t;
    t.batch_size = static_cast<std::size_t>(cfg.get_int("train.batch_size", 4));
    t.lr = cfg.get_double("train.lr", 4e-4);
    const std::string rule = cfg.get_string("train.lr_rule", "constant_times_batch");
    if (rule == "explicit")
        t.lr_rule = LrRule::Explicit;
    else if (rule == "constant_times_batch")
        t.lr_rule = LrRule::ConstantTimesBatch;
    else
        throw ConfigError("config key train.lr_rule: expected explicit or constant_times_batch, "
                          "got \"" + rule + "\"");
    t.lr_constant = cfg.get_double("train.lr_constant", 1e-4);
    t.lora_rank = static_cast<std::size_t>(cfg.get_int("train.lora_rank", 2));
    t.lora_alpha = cfg.get_double("train.lora_alpha", 2.0 * static_cast<double>(t.lora_rank));
    t.weight_decay = cfg.get_double("train.weight_decay", 1e-9);
    t.epochs = static_cast<std::size_t>(cfg.get_int("train.epochs", 1));
    t.max_steps = static_cast<std::size_t>(cfg.get_int("train.max_steps", 0));
    t.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));
    t.clip_norm = cfg.get_double("train.clip_norm", 1.0);
    t.adapt_encoder = cfg.get_bool("train.adapt_encoder", false);
    t.train_layer_norms = cfg.get_bool("train.train_layer_norms", false);
    if (cfg.has("train.lora_targets")) {
        t.lora_targets.clear();
        std::istringstream in(cfg.require_string("train.lora_targets"));
        std::string part;
        while (std::getline(in, part, ',')) {
            const auto b = part.find_first_not_of(' ');
            const auto e = part.find_last_not_of(' ');
            if (b != std::string::npos) t.lora_targets.insert(part.substr(b, e - b + 1));
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// train

std::vector<TrainSample> load_train_samples(const fs::path& path, std::size_t image_size) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open training dataset " + path.string());
    std::vector<TrainSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ConfigError("training dataset line " + std::to_string(lineno) + ": bad JSON");
        TrainSample s;
        s.image = img::resize(img::load(j.at("image").get<std::string>()), image_size, image_size);
        s.question = j.at("question").get<std::string>();
        s.answer = j.at("answer").get<std::string>();
        out.push_back(std::move(s));
    }
    return out;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              std::optional<std::uint64_t> seed, const fs::path& out_dir) {
    Config cfg = Config::parse_file(config_path);
    for (const auto& kv : overrides) cfg.apply_override(kv);
    if (seed) cfg.set("train.seed", std::to_string(*seed));
    cfg.validate_keys(kKnownKeys);

    const fs::path data_path = cfg.require_string("data.train");
    ModelConfig mcfg = model_config_from(cfg);
    const TrainConfig tcfg = train_config_from(cfg);
    auto samples = load_train_samples(data_path, mcfg.image_size);

    std::vector<std::string> corpus;
    for (const auto& s : samples) {
        corpus.push_back(s.question);
        corpus.push_back(s.answer);
    }
    ToyTokenizer tok(corpus);
    mcfg.vocab_size = tok.vocab_size();

    Rng rng(tcfg.seed);
    VlmModel model(mcfg, rng);
    model.attach_lora(tcfg.lora_targets, tcfg.lora_rank, static_cast<float>(tcfg.lora_alpha),
                      tcfg.adapt_encoder, rng, tcfg.train_layer_norms);

    fs::create_directories(out_dir);
    Trainer trainer(model, tok, tcfg);
    std::ostringstream metrics;
    const TrainResult result = trainer.train(samples, &metrics);
    atomic_write_text(out_dir / "metrics.jsonl", metrics.str());
    const std::size_t final_step = result.log.empty() ? 0 : result.log.back().step;
    trainer.save_model(out_dir / "model.ckpt", final_step);
    write_manifest(out_dir / "manifest.json", "train", cfg, {config_path, data_path},
                   {out_dir / "model.ckpt", out_dir / "metrics.jsonl"});

    std::cout << "steps " << final_step << "  skipped " << result.skipped << "  final_loss "
              << (result.log.empty() ? 0.0 : result.log.back().loss) << "\n";
    std::cout << "checkpoint " << (out_dir / "model.ckpt").string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// eval-vqa

int cmd_eval_vqa(const std::string& model_path, const std::string& data_path, std::size_t limit,
                 const fs::path& out_path) {
    auto [model, tok] = load_model(model_path);
    auto records = vqa::load_dataset(data_path);
    const std::size_t image_size = model.config().image_size;

    auto responder = [&](const VqaRecord& r) {
        Image im = img::resize(img::load(r.image_path), image_size, image_size);
        std::vector<std::size_t> prompt{ToyTokenizer::kBos};
        for (auto id : tok.encode(r.question)) prompt.push_back(id);
        prompt.push_back(ToyTokenizer::kSep);
        return tok.decode(model.generate_greedy(im, prompt, 6));
    };

    const vqa::VqaResult result = vqa::run_vqa_eval(responder, records, limit);
    std::ostringstream lines;
    for (const auto& rec : result.records) lines << rec.dump() << "\n";
    atomic_write_text(out_path, lines.str());

    Config cfg;
    cfg.set("model", model_path);
    cfg.set("data", data_path);
    cfg.set("limit", std::to_string(limit));
    write_manifest(fs::path(out_path.string() + ".manifest.json"), "eval-vqa", cfg,
                   {model_path, data_path}, {out_path});

    std::printf("%.2f\n", result.aggregate);
    return kOk;
}

// ---------------------------------------------------------------------------
// eval-needle

int cmd_eval_needle(const std::string& model_path, const std::string& manifest_path,
                    std::size_t grid, std::size_t samples, std::uint64_t seed,
                    const fs::path& out_dir, const std::string& responder_kind) {
    auto pool = needle::load_manifest(manifest_path);
    NeedleConfig ncfg;
    ncfg.grid_n = grid;
    ncfg.sample_limit = samples;
    ncfg.seed = seed;

    needle::Responder responder;
    std::optional<std::pair<VlmModel, ToyTokenizer>> loaded;
    if (responder_kind == "oracle") {
        responder = needle::oracle_responder();
    } else if (responder_kind == "inverted") {
        responder = needle::inverted_responder();
    } else if (responder_kind == "random") {
        responder = needle::random_responder(seed + 1);  // distinct stream from placement
    } else if (responder_kind == "model") {
        if (model_path.empty())
            throw ConfigError("eval-needle: --responder model requires --model");
        loaded = load_model(model_path);
        ncfg.model_input_size = loaded->first.config().image_size;
        responder = [&](const NeedleSample& s, Axis, const std::string& prompt) {
            auto& [model, tok] = *loaded;
            std::vector<std::size_t> ids{ToyTokenizer::kBos};
            for (auto id : tok.encode(prompt)) ids.push_back(id);
            ids.push_back(ToyTokenizer::kSep);
            return tok.decode(model.generate_greedy(s.stitched, ids, 4));
        };
    } else {
        throw ConfigError("eval-needle: unknown responder \"" + responder_kind + "\"");
    }

    const needle::NeedleRunResult result = needle::run_needle_eval(responder, pool, ncfg);
    needle::write_reports(out_dir, result);

    Config cfg;
    cfg.set("manifest", manifest_path);
    cfg.set("responder", responder_kind);
    cfg.set("grid", std::to_string(grid));
    cfg.set("samples", std::to_string(samples));
    cfg.set("seed", std::to_string(seed));
    if (!model_path.empty()) cfg.set("model", model_path);
    std::vector<fs::path> inputs{manifest_path};
    if (!model_path.empty()) inputs.push_back(model_path);
    write_manifest(out_dir / "manifest.json", "eval-needle", cfg, inputs,
                   {out_dir / "cells.csv", out_dir / "summary.json"});

    std::printf("index_accuracy %.4f  trials %zu  skipped %zu\n", result.report.index_accuracy(),
                result.report.total_trials(), result.skipped);
    return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

// Sign-aligned linear anchor terms keep every coordinate's gradient well above
// the float32 finite-difference noise floor without masking nonlinear-path
// errors (those still show up additively).
std::vector<Tensor> aligned_anchors(const std::function<Tensor()>& base,
                                    std::vector<Tensor>& params, Rng& rng) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tensor loss = base();
    loss.backward();
    std::vector<Tensor> anchors;
    for (auto& p : params) {
        Tensor a{p.shape()};
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const float mag = rng.uniform(0.5f, 1.0f);
            a.data()[i] = p.grad()[i] >= 0.0f ? mag : -mag;
        }
        anchors.push_back(std::move(a));
        p.zero_grad();
    }
    return anchors;
}

int cmd_gradcheck(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = 8, d_head = 4, n = 4;

    LayerParams p;
    auto w = [&](std::size_t a, std::size_t b) {
        return Tensor::randn({a, b}, rng, 0.0f, 1.0f / std::sqrt(static_cast<float>(a)));
    };
    p.attn.w_q = w(d, d);
    p.attn.w_k = w(d, d);
    p.attn.w_v = w(d, d);
    p.attn.w_o = w(d, d);
    p.attn.n_heads = d / d_head;
    p.attn.d_head = d_head;
    p.attn.variant = AttentionVariant::DiffOriginal;  // lambda grads survive the head norm
    for (std::size_t h = 0; h < p.attn.n_heads; ++h)
        p.attn.head_norm_gains.push_back(Tensor::full({d_head}, 1.0f));
    p.lambda = make_lambda_params(d_head / 2, 2, rng);
    p.ffn.kind = FfnKind::SwiGLU;
    const std::size_t d_ff = swiglu_ff_width(d);
    p.ffn.w_g = w(d, d_ff);
    p.ffn.w_1 = w(d, d_ff);
    p.ffn.w_2 = w(d_ff, d);
    p.norm1_gain = Tensor::full({d}, 1.0f);
    p.norm2_gain = Tensor::full({d}, 1.0f);
    for (auto [role, slot] : {std::pair{"w_q", &p.attn.lora_q}, {"w_v", &p.attn.lora_v}}) {
        *slot = LoraAdapter::init(d, d, 2, 4.0f, role, rng);
        // B is zero at init, which would zero A's gradient; perturb it so both
        // low-rank factors carry signal through the check.
        for (auto& v : (*slot)->b.data()) v = rng.normal(0.0f, 0.3f);
    }

    Tensor x = Tensor::randn({n, d}, rng, 0.0f, 1.0f);
    Tensor probe = Tensor::randn({n, d}, rng, 0.0f, 1.0f);
    const AttentionMask mask = AttentionMask::causal(n);
    auto base = [&] { return sum(mul(probe, layer_forward(x, p, mask))); };

    struct Group {
        const char* name;
        std::vector<Tensor> params;
    };
    std::vector<Group> groups = {
        {"attn.w_qkvo", {p.attn.w_q, p.attn.w_k, p.attn.w_v, p.attn.w_o}},
        {"lora.a", {p.attn.lora_q->a, p.attn.lora_v->a}},
        {"lora.b", {p.attn.lora_q->b, p.attn.lora_v->b}},
        {"lambda", {p.lambda.lambda_q1, p.lambda.lambda_k1, p.lambda.lambda_q2,
                    p.lambda.lambda_k2}},
        {"rms_norm.gains", {p.norm1_gain, p.norm2_gain, p.attn.head_norm_gains[0],
                            p.attn.head_norm_gains[1]}},
        {"ffn.swiglu", {p.ffn.w_g, p.ffn.w_1, p.ffn.w_2}},
    };

    bool all_ok = true;
    for (auto& g : groups) {
        auto anchors = aligned_anchors(base, g.params, rng);
        auto loss = [&] {
            Tensor l = base();
            for (std::size_t i = 0; i < g.params.size(); ++i)
                l = add(l, sum(mul(anchors[i], g.params[i])));
            return l;
        };
        const float rel = grad_check(loss, g.params, 3e-3f);
        const bool ok = rel < 1e-3f;
        all_ok = all_ok && ok;
        std::printf("gradcheck  %-16s rel_err %.3e  %s\n", g.name, rel, ok ? "PASS" : "FAIL");
    }
    std::printf("gradcheck: %s\n", all_ok ? "all groups passed" : "FAILURES above");
    return all_ok ? kOk : kNumeric;
}

// ---------------------------------------------------------------------------
// inspect

int cmd_inspect(const std::string& model_path) {
    Checkpoint c = ckpt::load(model_path);
    std::cout << "checkpoint " << model_path << "\n";
    std::cout << "tensors " << c.tensors.size() << "\n";
    for (const auto& [name, t] : c.tensors) {
        std::cout << "  " << name << "  [";
        for (std::size_t i = 0; i < t.shape().size(); ++i)
            std::cout << (i ? " x " : "") << t.shape()[i];
        std::cout << "]\n";
    }
    if (c.metadata.contains("train")) {
        const auto& t = c.metadata["train"];
        std::cout << "adapters rank " << t.at("lora_rank").get<std::size_t>() << " alpha "
                  << t.at("lora_alpha").get<double>() << " targets";
        for (const auto& s : t.at("lora_targets")) std::cout << " " << s.get<std::string>();
        std::cout << "\n";
    }
    if (c.metadata.contains("config")) {
        auto [model, tok] = load_model(model_path);
        auto& layers = model.decoder_layers();
        for (std::size_t l = 0; l < layers.size(); ++l)
            std::printf("dec.layer%zu  lambda %.6f  lambda_init %.6f\n", l,
                        compute_lambda(layers[l].lambda).item(),
                        layers[l].lambda.lambda_init);
        std::cout << "trainable parameters " << model.trainable_param_count() << "\n";
    }
    return kOk;
}

int guarded(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kCorrupt;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        // ConfigError, ContractError, ShapeError, ImageError, bad paths.
        std::cerr << "error: " << e.what() << "\n";
        return kBadInput;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"differential-attention toy VLM toolkit"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "fine-tune the toy model with LoRA");
    std::string train_config;
    std::vector<std::string> train_sets;
    std::optional<std::uint64_t> train_seed;
    std::string train_out = "run";
    train->add_option("--config", train_config, "key = value config file")->required();
    train->add_option("--set", train_sets, "override, key=value (wins over the file)");
    train->add_option("--seed", train_seed, "override train.seed");
    train->add_option("--out-dir", train_out, "output directory");

    // eval-vqa
    auto* vqa_cmd = app.add_subcommand("eval-vqa", "consensus-score a VQA dataset");
    std::string vqa_model, vqa_data, vqa_out = "vqa_records.jsonl";
    std::size_t vqa_limit = 0;
    vqa_cmd->add_option("--model", vqa_model, "checkpoint path")->required();
    vqa_cmd->add_option("--data", vqa_data, "JSON-lines dataset")->required();
    vqa_cmd->add_option("--limit", vqa_limit, "max records (0 = all)");
    vqa_cmd->add_option("--out", vqa_out, "per-record JSON-lines output");

    // eval-needle
    auto* needle_cmd = app.add_subcommand("eval-needle", "stitched-grid needle search eval");
    std::string ndl_model, ndl_manifest, ndl_out = "needle_out", ndl_responder = "model";
    std::size_t ndl_grid = 2, ndl_samples = 200;
    std::uint64_t ndl_seed = 0;
    needle_cmd->add_option("--model", ndl_model, "checkpoint path (responder=model)");
    needle_cmd->add_option("--manifest", ndl_manifest, "candidate (image, caption) JSON lines")
        ->required();
    needle_cmd->add_option("--grid", ndl_grid, "grid side length");
    needle_cmd->add_option("--samples", ndl_samples, "sample limit");
    needle_cmd->add_option("--seed", ndl_seed, "placement seed");
    needle_cmd->add_option("--out-dir", ndl_out, "directory for cells.csv / summary.json");
    needle_cmd->add_option("--responder", ndl_responder, "model|oracle|inverted|random");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check per param group");
    std::uint64_t grad_seed = 0;
    grad_cmd->add_option("--seed", grad_seed, "instance seed");

    // inspect
    auto* inspect_cmd = app.add_subcommand("inspect", "summarize a checkpoint");
    std::string inspect_model;
    inspect_cmd->add_option("--model", inspect_model, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kBadInput;
    }

    if (train->parsed())
        return guarded([&] { return cmd_train(train_config, train_sets, train_seed, train_out); });
    if (vqa_cmd->parsed())
        return guarded([&] { return cmd_eval_vqa(vqa_model, vqa_data, vqa_limit, vqa_out); });
    if (needle_cmd->parsed())
        return guarded([&] {
            return cmd_eval_needle(ndl_model, ndl_manifest, ndl_grid, ndl_samples, ndl_seed,
                                   ndl_out, ndl_responder);
        });
    if (grad_cmd->parsed()) return guarded([&] { return cmd_gradcheck(grad_seed); });
    if (inspect_cmd->parsed()) return guarded([&] { return cmd_inspect(inspect_model); });
    return kBadInput;
}
