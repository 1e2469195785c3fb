#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffattn/config.hpp"
#include "diffattn/image.hpp"
#include "diffattn/rng.hpp"
#include "diffattn/tensor.hpp"

namespace diffattn {

struct NeedleConfig {
    std::size_t grid_n = 2;
    std::size_t stitched_count = 1;  // M; only M=1 is exercised
    std::size_t sample_limit = 200;
    std::uint64_t seed = 0;
    std::size_t model_input_size = 0;  // 0 = keep stitched resolution
};

struct NeedleCandidate {
    std::string image_path;
    std::string caption;
};

enum class Axis { Vertical, Horizontal };
enum class AxisAnswer { Top, Bottom, Left, Right, Unparseable };

// One stitched grid with its ground truth.
struct NeedleSample {
    Image stitched;
    std::size_t row = 0, col = 0;  // needle cell
    std::string caption;
    std::vector<std::size_t> source_indices;  // candidate pool indices, row-major
};

struct CellReport {
    std::size_t grid_n = 2;
    std::vector<std::size_t> trials;   // grid_n^2, row-major
    std::vector<std::size_t> correct;  // grid_n^2, row-major

    explicit CellReport(std::size_t n = 2)
        : grid_n(n), trials(n * n, 0), correct(n * n, 0) {}

    std::size_t total_trials() const {
        std::size_t s = 0;
        for (auto t : trials) s += t;
        return s;
    }
    std::size_t total_correct() const {
        std::size_t s = 0;
        for (auto c : correct) s += c;
        return s;
    }
    double index_accuracy() const {
        const std::size_t t = total_trials();
        return t ? static_cast<double>(total_correct()) / static_cast<double>(t) : 0.0;
    }
    double cell_accuracy(std::size_t r, std::size_t c) const {
        const std::size_t i = r * grid_n + c;
        return trials[i] ? static_cast<double>(correct[i]) / static_cast<double>(trials[i]) : 0.0;
    }
};

namespace needle {

// 224x224 RGB in [0,1]; exact-size input passes through bit-equal.
inline Image preprocess(const Image& im) { return img::resize(im, 224, 224); }

// Row-major placement of grid_n^2 equal-size sub-images.
inline Image stitch(const std::vector<Image>& subs, std::size_t grid_n) {
    if (subs.size() != grid_n * grid_n)
        throw ContractError("stitch: expected " + std::to_string(grid_n * grid_n) +
                            " sub-images, got " + std::to_string(subs.size()));
    const std::size_t w = subs[0].width, h = subs[0].height;
    for (const auto& s : subs)
        if (s.width != w || s.height != h)
            throw ContractError("stitch: sub-images must share one size");
    Image out(grid_n * w, grid_n * h);
    for (std::size_t k = 0; k < subs.size(); ++k) {
        const std::size_t r = k / grid_n, c = k % grid_n;
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    out.at(ch, r * h + y, c * w + x) = subs[k].at(ch, y, x);
    }
    return out;
}

// Two-step prompts: one fixed template per axis, differing only in the
// Top/Bottom vs Left/Right word pair.
inline std::pair<std::string, std::string> build_prompts(const std::string& caption) {
    if (caption.empty()) throw ContractError("build_prompts: empty caption");
    return {caption + " Where is the caption? Top or Bottom?",
            caption + " Where is the caption? Left or Right?"};
}

// Case-insensitive substring search for the two axis words; exactly one hit
// parses, zero or two is Unparseable (counted as incorrect downstream).
inline AxisAnswer parse_response(const std::string& text, Axis axis) {
    std::string lower;
    lower.reserve(text.size());
    for (char ch : text)
        lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    const char* first = axis == Axis::Vertical ? "top" : "left";
    const char* second = axis == Axis::Vertical ? "bottom" : "right";
    const bool has_first = lower.find(first) != std::string::npos;
    const bool has_second = lower.find(second) != std::string::npos;
    if (has_first == has_second) return AxisAnswer::Unparseable;
    if (axis == Axis::Vertical) return has_first ? AxisAnswer::Top : AxisAnswer::Bottom;
    return has_first ? AxisAnswer::Left : AxisAnswer::Right;
}

// Top/Bottom x Left/Right -> (row, col) for the 2x2 grid.
inline std::pair<std::size_t, std::size_t> map_coordinates(AxisAnswer v, AxisAnswer h) {
    if (v != AxisAnswer::Top && v != AxisAnswer::Bottom)
        throw ContractError("map_coordinates: vertical slot must be Top or Bottom");
    if (h != AxisAnswer::Left && h != AxisAnswer::Right)
        throw ContractError("map_coordinates: horizontal slot must be Left or Right");
    return {v == AxisAnswer::Top ? 0u : 1u, h == AxisAnswer::Left ? 0u : 1u};
}

inline std::vector<NeedleCandidate> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open needle manifest " + path);
    std::vector<NeedleCandidate> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ConfigError("needle manifest line " + std::to_string(lineno) + ": bad JSON");
        out.push_back({j.at("image").get<std::string>(), j.at("caption").get<std::string>()});
    }
    return out;
}

// A responder answers one axis question about a stitched sample. Scripted
// responders may read the ground truth inside the sample; a model-backed
// responder must only look at the pixels and the prompt.
using Responder = std::function<std::string(const NeedleSample&, Axis, const std::string&)>;

inline Responder oracle_responder() {
    return [](const NeedleSample& s, Axis axis, const std::string&) {
        if (axis == Axis::Vertical) return std::string(s.row == 0 ? "Top" : "Bottom");
        return std::string(s.col == 0 ? "Left" : "Right");
    };
}

inline Responder inverted_responder() {
    return [](const NeedleSample& s, Axis axis, const std::string&) {
        if (axis == Axis::Vertical) return std::string(s.row == 0 ? "Bottom" : "Top");
        return std::string(s.col == 0 ? "Right" : "Left");
    };
}

// Uniform over the two axis words, seeded; shares one RNG across calls.
inline Responder random_responder(std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [rng](const NeedleSample&, Axis axis, const std::string&) {
        const bool first = rng->index(2) == 0;
        if (axis == Axis::Vertical) return std::string(first ? "Top" : "Bottom");
        return std::string(first ? "Left" : "Right");
    };
}

struct NeedleRunResult {
    CellReport report;
    std::size_t skipped = 0;
    std::vector<nlohmann::json> sample_log;
};

// Full harness: draw sub-images, pick the needle uniformly, stitch, query
// both axes, map and compare. Undecodable images and model context overflows
// skip the sample with a logged reason.
inline NeedleRunResult run_needle_eval(const Responder& responder,
                                       const std::vector<NeedleCandidate>& pool,
                                       const NeedleConfig& cfg) {
    const std::size_t cells = cfg.grid_n * cfg.grid_n;
    if (cfg.grid_n < 2) throw ContractError("needle: grid_n must be >= 2");
    if (pool.size() < cells)
        throw ContractError("needle: candidate pool smaller than one grid");

    Rng rng(cfg.seed);
    NeedleRunResult out;
    out.report = CellReport(cfg.grid_n);

    for (std::size_t sample_i = 0; sample_i < cfg.sample_limit; ++sample_i) {
        // Draw the grid and needle first so skips cannot desync the stream.
        std::vector<std::size_t> picks(cells);
        for (auto& p : picks) p = rng.index(pool.size());
        const std::size_t needle_cell = rng.index(cells);

        NeedleSample sample;
        sample.row = needle_cell / cfg.grid_n;
        sample.col = needle_cell % cfg.grid_n;
        sample.caption = pool[picks[needle_cell]].caption;
        sample.source_indices = picks;

        try {
            std::vector<Image> subs;
            subs.reserve(cells);
            for (auto p : picks) subs.push_back(preprocess(img::load(pool[p].image_path)));
            sample.stitched = stitch(subs, cfg.grid_n);
            if (cfg.model_input_size)
                sample.stitched =
                    img::resize(sample.stitched, cfg.model_input_size, cfg.model_input_size);

            auto [vert_prompt, horiz_prompt] = build_prompts(sample.caption);
            const AxisAnswer v =
                parse_response(responder(sample, Axis::Vertical, vert_prompt), Axis::Vertical);
            const AxisAnswer h =
                parse_response(responder(sample, Axis::Horizontal, horiz_prompt),
                               Axis::Horizontal);

            bool correct = false;
            nlohmann::json pred = nullptr;
            if (v != AxisAnswer::Unparseable && h != AxisAnswer::Unparseable) {
                const auto [pr, pc] = map_coordinates(v, h);
                correct = pr == sample.row && pc == sample.col;
                pred = {{"row", pr}, {"col", pc}};
            }
            out.report.trials[needle_cell] += 1;
            if (correct) out.report.correct[needle_cell] += 1;
            out.sample_log.push_back({{"sample", sample_i},
                                      {"needle", {{"row", sample.row}, {"col", sample.col}}},
                                      {"caption", sample.caption},
                                      {"sources", picks},
                                      {"prediction", pred},
                                      {"correct", correct}});
        } catch (const std::exception& e) {
            ++out.skipped;
            out.sample_log.push_back(
                {{"sample", sample_i}, {"skipped", true}, {"reason", e.what()}});
        }
    }
    return out;
}

inline void write_reports(const std::filesystem::path& out_dir, const NeedleRunResult& res) {
    std::filesystem::create_directories(out_dir);
    const auto& rep = res.report;
    {
        const auto tmp = out_dir / "cells.csv.tmp";
        std::ofstream csv(tmp, std::ios::trunc);
        for (std::size_t r = 0; r < rep.grid_n; ++r) {
            for (std::size_t c = 0; c < rep.grid_n; ++c)
                csv << (c ? "," : "") << rep.cell_accuracy(r, c);
            csv << "\n";
        }
        csv.close();
        std::filesystem::rename(tmp, out_dir / "cells.csv");
    }
    {
        nlohmann::json per_cell = nlohmann::json::array();
        for (std::size_t r = 0; r < rep.grid_n; ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t c = 0; c < rep.grid_n; ++c) row.push_back(rep.cell_accuracy(r, c));
            per_cell.push_back(row);
        }
        nlohmann::json summary{{"index_accuracy", rep.index_accuracy()},
                               {"per_cell", per_cell},
                               {"trials", rep.total_trials()},
                               {"skipped", res.skipped}};
        const auto tmp = out_dir / "summary.json.tmp";
        std::ofstream js(tmp, std::ios::trunc);
        js << summary.dump(2) << "\n";
        js.close();
        std::filesystem::rename(tmp, out_dir / "summary.json");
    }
}

}  // namespace needle
}  // namespace diffattn
