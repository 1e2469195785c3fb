#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace diffattn {

// Word-level toy tokenizer. The vocabulary is built from the corpus; every
// lowercase word and punctuation mark gets an id, anything unseen maps to UNK.
class ToyTokenizer {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kBos = 1;
    static constexpr std::size_t kEos = 2;
    static constexpr std::size_t kSep = 3;
    static constexpr std::size_t kUnk = 4;

    ToyTokenizer() { add_specials(); }

    explicit ToyTokenizer(const std::vector<std::string>& corpus) {
        add_specials();
        std::set<std::string> words;
        for (const auto& text : corpus)
            for (const auto& w : split_words(text)) words.insert(w);
        for (const auto& w : words) add_word(w);
    }

    explicit ToyTokenizer(const std::set<std::string>& vocabulary) {
        add_specials();
        for (const auto& w : vocabulary) add_word(w);
    }

    std::size_t vocab_size() const { return id_to_word_.size(); }

    // Lowercased word stream with punctuation split off as its own tokens.
    static std::vector<std::string> split_words(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char raw : text) {
            const char ch = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!cur.empty()) out.push_back(cur), cur.clear();
            } else if (std::ispunct(static_cast<unsigned char>(ch))) {
                if (!cur.empty()) out.push_back(cur), cur.clear();
                out.push_back(std::string(1, ch));
            } else {
                cur.push_back(ch);
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    static std::string normalize(const std::string& text) {
        std::string out;
        for (const auto& w : split_words(text)) {
            if (!out.empty()) out.push_back(' ');
            out += w;
        }
        return out;
    }

    std::vector<std::size_t> encode(const std::string& text) const {
        std::vector<std::size_t> ids;
        for (const auto& w : split_words(text)) {
            auto it = word_to_id_.find(w);
            ids.push_back(it == word_to_id_.end() ? kUnk : it->second);
        }
        return ids;
    }

    std::string decode(const std::vector<std::size_t>& ids) const {
        std::string out;
        for (auto id : ids) {
            if (id <= kSep) continue;  // skip structural specials
            if (!out.empty()) out.push_back(' ');
            out += id < id_to_word_.size() ? id_to_word_[id] : "<bad>";
        }
        return out;
    }

    const std::vector<std::string>& words() const { return id_to_word_; }

private:
    void add_specials() {
        for (const char* s : {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"}) add_word(s);
    }

    void add_word(const std::string& w) {
        if (word_to_id_.count(w)) return;
        word_to_id_[w] = id_to_word_.size();
        id_to_word_.push_back(w);
    }

    std::map<std::string, std::size_t> word_to_id_;
    std::vector<std::string> id_to_word_;
};

}  // namespace diffattn
