#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixtts/core/nn.hpp"
#include "mixtts/core/ops.hpp"

// Conditioning on frozen language-model token embeddings. The LM tokenizer
// produces a sequence of length M that generally differs from the symbol
// length N; a single-head attention block mixes the two streams while
// preserving N.

namespace mixtts {

inline const std::string kLmUnknownToken = "<unk>";

template <typename T>
struct FrozenEmbeddingTable {
    std::unordered_map<std::string, int> vocab;
    std::vector<std::string> tokens;  // id -> token
    Tensor<T> matrix;                 // [V, D_lm], never trainable
    Index dim = 0;

    Index size() const { return static_cast<Index>(tokens.size()); }

    int unknown_id() const {
        auto it = vocab.find(kLmUnknownToken);
        return it == vocab.end() ? 0 : it->second;
    }
};

// File format: header line "V D", then V lines of "token v_1 ... v_D".
template <typename T>
FrozenEmbeddingTable<T> load_embedding_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embedding table: " + path);
    std::string header;
    if (!std::getline(in, header)) throw DataError("embedding table is empty: " + path);
    std::istringstream hs(header);
    Index v = 0, d = 0;
    if (!(hs >> v >> d) || v <= 0 || d <= 0)
        throw DataError("embedding table header must be 'V D', got '" + header + "'");
    FrozenEmbeddingTable<T> table;
    table.dim = d;
    table.matrix = Tensor<T>({v, d});
    std::string line;
    for (Index i = 0; i < v; ++i) {
        if (!std::getline(in, line))
            throw DataError("embedding table truncated at row " + std::to_string(i + 1));
        std::istringstream ls(line);
        std::string token;
        if (!(ls >> token)) throw DataError("embedding table row " + std::to_string(i + 2) + " is blank");
        for (Index j = 0; j < d; ++j) {
            double value;
            if (!(ls >> value))
                throw DataError("embedding table row " + std::to_string(i + 2) + " has fewer than " +
                                std::to_string(d) + " values");
            table.matrix.at(i, j) = static_cast<T>(value);
        }
        if (table.vocab.count(token))
            throw DataError("embedding table has duplicate token '" + token + "'");
        table.vocab[token] = static_cast<int>(i);
        table.tokens.push_back(token);
    }
    return table;
}

template <typename T>
void save_embedding_table(const FrozenEmbeddingTable<T>& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write embedding table: " + path);
    out << table.size() << ' ' << table.dim << '\n';
    for (Index i = 0; i < table.size(); ++i) {
        out << table.tokens[static_cast<std::size_t>(i)];
        for (Index j = 0; j < table.dim; ++j) out << ' ' << table.matrix.at(i, j);
        out << '\n';
    }
}

struct LmTokenSequence {
    std::vector<int> ids;
};

// Greedy longest-match subword tokenization over the table vocabulary,
// lowercased, whitespace-separated words, unknown-token fallback per
// unmatched leading character.
template <typename T>
LmTokenSequence lm_tokenize(const std::string& text, const FrozenEmbeddingTable<T>& table) {
    if (text.empty()) throw DataError("lm_tokenize: empty text");
    std::string lower;
    lower.reserve(text.size());
    for (char ch : text) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));

    LmTokenSequence seq;
    std::istringstream words(lower);
    std::string word;
    while (words >> word) {
        std::size_t pos = 0;
        while (pos < word.size()) {
            std::size_t best_len = 0;
            int best_id = -1;
            const std::size_t max_len = word.size() - pos;
            for (std::size_t len = max_len; len >= 1; --len) {
                auto it = table.vocab.find(word.substr(pos, len));
                if (it != table.vocab.end()) {
                    best_len = len;
                    best_id = it->second;
                    break;
                }
            }
            if (best_id < 0) {
                seq.ids.push_back(table.unknown_id());
                pos += 1;
            } else {
                seq.ids.push_back(best_id);
                pos += best_len;
            }
        }
    }
    if (seq.ids.empty()) throw DataError("lm_tokenize: no tokens produced");
    return seq;
}

// Single-head scaled dot-product attention aligning LM embeddings to the
// symbol stream. Queries come from a conv over (t_e + positional embedding),
// keys from a conv over (projected lm_emb + positional embedding), values are
// a plain projection of lm_emb. The context is projected and added residually,
// so zeroing `out_proj` reduces the extended model to the basic one.
template <typename T>
struct LmAttention {
    Index model_dim = 0;
    Index lm_dim = 0;
    Index max_len = 0;
    Tensor<T> pos_text;  // [max_len, C]
    Tensor<T> pos_lm;    // [max_len, C]
    LinearLayer<T> lm_proj;
    ConvLayer<T> query_conv;
    ConvLayer<T> key_conv;
    LinearLayer<T> value_proj;
    LinearLayer<T> out_proj;

    LmAttention() = default;
    LmAttention(Index model_dim_, Index lm_dim_, Index max_len_, Rng& rng)
        : model_dim(model_dim_),
          lm_dim(lm_dim_),
          max_len(max_len_),
          lm_proj(lm_dim_, model_dim_, rng),
          query_conv(model_dim_, model_dim_, 3, rng),
          key_conv(model_dim_, model_dim_, 3, rng),
          value_proj(lm_dim_, model_dim_, rng),
          out_proj(model_dim_, model_dim_, rng) {
        pos_text = init_weight<T>({max_len_, model_dim_}, model_dim_, rng);
        pos_lm = init_weight<T>({max_len_, model_dim_}, model_dim_, rng);
    }

    // t_e [N,C], lm_emb [M,D_lm] -> [N,C]
    Tensor<T> forward(Tape<T>* tape, Tensor<T> t_e, Tensor<T> lm_emb) const {
        require_shape(t_e.rank() == 2 && t_e.dim(1) == model_dim,
                      "attend_lm: t_e must be [N," + std::to_string(model_dim) + "], got " +
                          shape_str(t_e.shape()));
        require_shape(lm_emb.rank() == 2 && lm_emb.dim(1) == lm_dim,
                      "attend_lm: lm_emb must be [M," + std::to_string(lm_dim) + "], got " +
                          shape_str(lm_emb.shape()));
        const Index n = t_e.dim(0), m = lm_emb.dim(0);
        require_shape(m >= 1, "attend_lm: empty LM token sequence");
        require_shape(n <= max_len && m <= max_len,
                      "attend_lm: sequence exceeds positional table of length " +
                          std::to_string(max_len));

        std::vector<int> text_positions(static_cast<std::size_t>(n));
        std::vector<int> lm_positions(static_cast<std::size_t>(m));
        for (Index i = 0; i < n; ++i) text_positions[static_cast<std::size_t>(i)] = static_cast<int>(i);
        for (Index i = 0; i < m; ++i) lm_positions[static_cast<std::size_t>(i)] = static_cast<int>(i);

        auto q_in = add(tape, t_e, embedding(tape, pos_text, text_positions));
        auto q = query_conv.forward(tape, q_in);  // [N,C]

        auto lm_projected = lm_proj.forward(tape, lm_emb);  // [M,C]
        auto k_in = add(tape, lm_projected, embedding(tape, pos_lm, lm_positions));
        auto k = key_conv.forward(tape, k_in);  // [M,C]

        auto v = value_proj.forward(tape, lm_emb);  // [M,C]

        auto scores = scale(tape, matmul_nt(tape, q, k),
                            static_cast<T>(1.0 / std::sqrt(static_cast<double>(model_dim))));
        auto weights = exp_elem(tape, log_softmax(tape, scores, 1));  // rows sum to 1
        auto context = matmul(tape, weights, v);                      // [N,C]
        return add(tape, t_e, out_proj.forward(tape, context));
    }

    // Attention weights for inspection (eval path, no tape).
    Tensor<T> attention_weights(Tensor<T> t_e, Tensor<T> lm_emb) const {
        const Index n = t_e.dim(0), m = lm_emb.dim(0);
        std::vector<int> tp(static_cast<std::size_t>(n)), lp(static_cast<std::size_t>(m));
        for (Index i = 0; i < n; ++i) tp[static_cast<std::size_t>(i)] = static_cast<int>(i);
        for (Index i = 0; i < m; ++i) lp[static_cast<std::size_t>(i)] = static_cast<int>(i);
        auto q = query_conv.forward(nullptr, add<T>(nullptr, t_e, embedding<T>(nullptr, pos_text, tp)));
        auto k = key_conv.forward(
            nullptr, add<T>(nullptr, lm_proj.forward(nullptr, lm_emb), embedding<T>(nullptr, pos_lm, lp)));
        auto scores = scale<T>(nullptr, matmul_nt<T>(nullptr, q, k),
                               static_cast<T>(1.0 / std::sqrt(static_cast<double>(model_dim))));
        return exp_elem<T>(nullptr, log_softmax<T>(nullptr, scores, 1));
    }

    void collect(const std::string& prefix, ParamMap<T>& out) const {
        add_param(out, prefix + ".pos_text", pos_text);
        add_param(out, prefix + ".pos_lm", pos_lm);
        lm_proj.collect(prefix + ".lm_proj", out);
        query_conv.collect(prefix + ".query_conv", out);
        key_conv.collect(prefix + ".key_conv", out);
        value_proj.collect(prefix + ".value_proj", out);
        out_proj.collect(prefix + ".out_proj", out);
    }
};

// Small deterministic table for tests and demos: 26 letters, digits, common
// English subwords, an unknown token; values seeded pseudo-randomly.
template <typename T>
FrozenEmbeddingTable<T> build_demo_lm_table(Index dim = 32, std::uint64_t seed = 0xA11CE) {
    static const char* kSubwords[] = {
        "the",  "and",  "ing",  "tion", "er",   "on",   "re",   "at",  "en",   "nd",  "es",
        "or",   "te",   "of",   "ed",   "is",   "it",   "al",   "ar",  "st",   "to",  "nt",
        "ng",   "se",   "ha",   "as",   "ou",   "io",   "le",   "ve",  "co",   "me",  "de",
        "hi",   "ri",   "ro",   "ic",   "ne",   "ea",   "ra",   "ce",  "li",   "ch",  "ll",
        "be",   "ma",   "si",   "om",   "ur",   "in",   "he",   "ti",  "sine", "tone", "ris",
        "pitch", "sweep", "two", "tones", "here", "rising", "a",   "b",   "c",    "d",   "e",
        "f",    "g",    "h",    "i",    "j",    "k",    "l",    "m",   "n",    "o",   "p",
        "q",    "r",    "s",    "t",    "u",    "v",    "w",    "x",   "y",    "z",   "0",
        "1",    "2",    "3",    "4",    "5",    "6",    "7",    "8",   "9",
    };
    FrozenEmbeddingTable<T> table;
    table.dim = dim;
    std::vector<std::string> toks;
    toks.push_back(kLmUnknownToken);
    for (const char* s : kSubwords) toks.emplace_back(s);
    table.matrix = Tensor<T>({static_cast<Index>(toks.size()), dim});
    Rng rng(seed);
    for (std::size_t i = 0; i < toks.size(); ++i) {
        table.vocab[toks[i]] = static_cast<int>(i);
        table.tokens.push_back(toks[i]);
        for (Index j = 0; j < dim; ++j)
            table.matrix.at(static_cast<Index>(i), j) = static_cast<T>(rng.normal(0.0, 0.3));
    }
    return table;
}

}  // namespace mixtts
