#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixtts/core/common.hpp"

// Character tokenizer and dataset manifest. Text is lowercased with all
// punctuation kept; pre-tokenized phoneme id files are accepted as a
// tokenizer-agnostic alternative input.

namespace mixtts {

struct SymbolSequence {
    std::vector<int> ids;
    std::string text;
    Index dropped = 0;  // unknown characters skipped
};

class SymbolVocab {
  public:
    static constexpr int kPadId = 0;

    SymbolVocab() {
        static const std::string charset = " abcdefghijklmnopqrstuvwxyz0123456789!'\"(),-.:;?";
        id_to_symbol_.push_back('\0');  // pad
        for (char ch : charset) {
            symbol_to_id_[ch] = static_cast<int>(id_to_symbol_.size());
            id_to_symbol_.push_back(ch);
        }
    }

    Index size() const { return static_cast<Index>(id_to_symbol_.size()); }

    SymbolSequence tokenize(const std::string& text) const {
        if (text.empty()) throw DataError("tokenize: empty text");
        SymbolSequence seq;
        seq.text = text;
        for (char raw : text) {
            const char ch = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
            auto it = symbol_to_id_.find(ch);
            if (it == symbol_to_id_.end())
                ++seq.dropped;
            else
                seq.ids.push_back(it->second);
        }
        if (seq.ids.empty())
            throw DataError("tokenize: no known symbols in \"" + text + "\" (" +
                            std::to_string(seq.dropped) + " dropped)");
        return seq;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id <= 0 || id >= static_cast<int>(id_to_symbol_.size()))
                throw DataError("detokenize: id " + std::to_string(id) + " out of range");
            out.push_back(id_to_symbol_[static_cast<std::size_t>(id)]);
        }
        return out;
    }

  private:
    std::unordered_map<char, int> symbol_to_id_;
    std::vector<char> id_to_symbol_;
};

struct Utterance {
    std::string id;
    std::string audio_path;
    std::string transcript;
    std::string pitch_path;    // optional, per-frame Hz values
    std::string phoneme_path;  // optional, pre-tokenized ids
};

// One record per line: id|audio_path|transcript[|pitch_path][|phoneme_path]
inline std::vector<Utterance> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    auto resolve = [&base](const std::string& p) -> std::string {
        if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
        return (base / p).string();
    };
    std::vector<Utterance> out;
    std::string line;
    Index line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string field;
        while (std::getline(ls, field, '|')) fields.push_back(field);
        if (fields.size() < 3 || fields[0].empty() || fields[1].empty() || fields[2].empty())
            throw DataError("manifest line " + std::to_string(line_no) +
                            ": expected id|audio_path|transcript, got \"" + line + "\"");
        Utterance u;
        u.id = fields[0];
        u.audio_path = resolve(fields[1]);
        u.transcript = fields[2];
        if (fields.size() > 3 && !fields[3].empty()) u.pitch_path = resolve(fields[3]);
        if (fields.size() > 4 && !fields[4].empty()) u.phoneme_path = resolve(fields[4]);
        out.push_back(std::move(u));
    }
    return out;
}

// Pitch text file: one Hz value per line (0 = unvoiced).
template <typename T>
std::vector<T> load_pitch_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open pitch file: " + path);
    std::vector<T> out;
    double v;
    while (in >> v) {
        if (v < 0) throw DataError("pitch file " + path + ": negative value " + std::to_string(v));
        out.push_back(static_cast<T>(v));
    }
    return out;
}

// Phoneme id file: whitespace-separated integer ids.
inline std::vector<int> load_phoneme_file(const std::string& path, Index vocab_size) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open phoneme file: " + path);
    std::vector<int> ids;
    long long v;
    while (in >> v) {
        if (v < 0 || v >= vocab_size)
            throw DataError("phoneme file " + path + ": id " + std::to_string(v) +
                            " outside vocab of size " + std::to_string(vocab_size));
        ids.push_back(static_cast<int>(v));
    }
    if (ids.empty()) throw DataError("phoneme file " + path + " holds no ids");
    return ids;
}

}  // namespace mixtts
