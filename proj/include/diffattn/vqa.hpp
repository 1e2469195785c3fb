#pragma once

#include <array>
#include <cctype>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "diffattn/config.hpp"
#include "diffattn/image.hpp"
#include "diffattn/tensor.hpp"
#include "diffattn/tokenizer.hpp"

namespace diffattn {

// One VQA question with its 10 annotator answers.
struct VqaRecord {
    std::string image_path;
    std::string question;
    std::vector<std::string> answers;  // exactly 10
};

namespace vqa {

// Fixed normalization rule: lowercase, trim, collapse whitespace, strip
// ASCII punctuation (decimal points between digits survive), and map the
// number words zero..ten to digits.
inline std::string normalize_answer(const std::string& s) {
    std::string lowered;
    lowered.reserve(s.size());
    for (char raw : s)
        lowered.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(raw))));

    std::string stripped;
    for (std::size_t i = 0; i < lowered.size(); ++i) {
        const char ch = lowered[i];
        if (std::ispunct(static_cast<unsigned char>(ch))) {
            const bool decimal_point =
                ch == '.' && i > 0 && i + 1 < lowered.size() &&
                std::isdigit(static_cast<unsigned char>(lowered[i - 1])) &&
                std::isdigit(static_cast<unsigned char>(lowered[i + 1]));
            if (!decimal_point) continue;
        }
        stripped.push_back(ch);
    }

    static const std::array<std::pair<const char*, const char*>, 11> kNumberWords = {{
        {"zero", "0"}, {"one", "1"}, {"two", "2"}, {"three", "3"}, {"four", "4"},
        {"five", "5"}, {"six", "6"}, {"seven", "7"}, {"eight", "8"}, {"nine", "9"},
        {"ten", "10"},
    }};

    std::string out;
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        for (const auto& [name, digit] : kNumberWords)
            if (word == name) {
                word = digit;
                break;
            }
        if (!out.empty()) out.push_back(' ');
        out += word;
        word.clear();
    };
    for (char ch : stripped) {
        if (std::isspace(static_cast<unsigned char>(ch)))
            flush();
        else
            word.push_back(ch);
    }
    flush();
    return out;
}

// Annotator-consensus score: min(n(a)/3, 1) over normalized exact matches.
inline double score_answer(const std::string& pred, const std::vector<std::string>& refs) {
    if (refs.size() != 10)
        throw ContractError("score_answer: expected exactly 10 reference answers, got " +
                            std::to_string(refs.size()));
    const std::string p = normalize_answer(pred);
    int n = 0;
    for (const auto& r : refs)
        if (normalize_answer(r) == p) ++n;
    return std::min(n / 3.0, 1.0);
}

inline std::vector<VqaRecord> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open VQA dataset " + path);
    std::vector<VqaRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ConfigError("VQA dataset line " + std::to_string(lineno) + ": bad JSON");
        VqaRecord r;
        r.image_path = j.at("image").get<std::string>();
        r.question = j.at("question").get<std::string>();
        r.answers = j.at("answers").get<std::vector<std::string>>();
        if (r.answers.size() != 10)
            throw ContractError("VQA dataset line " + std::to_string(lineno) +
                                ": expected 10 answers, got " + std::to_string(r.answers.size()));
        if (r.question.empty())
            throw ContractError("VQA dataset line " + std::to_string(lineno) + ": empty question");
        out.push_back(std::move(r));
    }
    return out;
}

struct VqaResult {
    double aggregate = 0.0;  // 100 * mean per-record score
    std::vector<nlohmann::json> records;
};

inline std::size_t worker_cap() {
    if (const char* env = std::getenv("DIFFATTN_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

// Runs a responder over the dataset and aggregates consensus scores. Records
// independent; they fan out across worker threads and merge in input order.
// A responder that throws scores its record 0 and is flagged.
inline VqaResult run_vqa_eval(const std::function<std::string(const VqaRecord&)>& responder,
                              const std::vector<VqaRecord>& records, std::size_t limit = 0) {
    const std::size_t n = limit ? std::min(limit, records.size()) : records.size();
    std::vector<std::string> preds(n);
    std::vector<char> failed(n, 0);  // char, not bool: lanes are written concurrently
    std::vector<std::string> errors(n);

    const std::size_t workers = std::min(worker_cap(), std::max<std::size_t>(n, 1));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                try {
                    preds[i] = responder(records[i]);
                } catch (const std::exception& e) {
                    failed[i] = 1;
                    errors[i] = e.what();
                }
            }
        });
    for (auto& t : pool) t.join();

    VqaResult out;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double score = failed[i] ? 0.0 : score_answer(preds[i], records[i].answers);
        sum += score;
        nlohmann::json rec{{"index", i},
                           {"question", records[i].question},
                           {"prediction", preds[i]},
                           {"score", score}};
        if (failed[i]) rec["error"] = errors[i];
        out.records.push_back(std::move(rec));
    }
    out.aggregate = n ? 100.0 * sum / static_cast<double>(n) : 0.0;
    return out;
}

}  // namespace vqa
}  // namespace diffattn
