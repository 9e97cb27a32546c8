#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mixtts/config.hpp"
#include "mixtts/model.hpp"
#include "mixtts/optim.hpp"

// Checkpoint container: magic MTCK, version, step, seed, the config snapshot,
// the frozen LM vocabulary (extended models), then length-prefixed named f32
// tensors. Optimizer moments live under the opt/ prefix. A checkpoint is
// self-contained: loading one rebuilds the model without the original table
// file.

namespace mixtts {

namespace ckpt_detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_string(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t read_u32(std::istream& in, const std::string& path) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw DataError("checkpoint truncated: " + path);
    return v;
}
inline std::uint64_t read_u64(std::istream& in, const std::string& path) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw DataError("checkpoint truncated: " + path);
    return v;
}
inline std::string read_string(std::istream& in, const std::string& path) {
    const std::uint32_t len = read_u32(in, path);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw DataError("checkpoint truncated: " + path);
    return s;
}

template <typename T>
void write_tensor(std::ostream& out, const std::string& name, const Tensor<T>& t) {
    write_string(out, name);
    write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t i = 0; i < t.rank(); ++i) write_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    for (Index i = 0; i < t.numel(); ++i) {
        const float v = static_cast<float>(t.at(i));
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
}

}  // namespace ckpt_detail

struct CheckpointData {
    std::uint32_t version = 0;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::string config_text;
    std::vector<std::string> lm_tokens;
    std::map<std::string, Tensor<float>> entries;
};

template <typename T>
void save_checkpoint(const std::string& path, const MixerTtsModel<T>& model,
                     const LambState<T>& opt_state, std::uint64_t step, std::uint64_t seed) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write("MTCK", 4);
    ckpt_detail::write_u32(out, 1);  // version
    ckpt_detail::write_u64(out, step);
    ckpt_detail::write_u64(out, seed);
    Config cfg = model.config();
    ckpt_detail::write_string(out, dump_config(cfg));

    // frozen LM vocabulary, one token per line
    std::string vocab_blob;
    if (model.extended()) {
        std::ostringstream vb;
        for (const auto& tok : model.lm_table().tokens) vb << tok << '\n';
        vocab_blob = vb.str();
    }
    ckpt_detail::write_string(out, vocab_blob);

    auto params = model.parameters();
    std::uint32_t count = static_cast<std::uint32_t>(params.size());
    count += static_cast<std::uint32_t>(opt_state.m.size() + opt_state.v.size());
    count += 2;  // pitch stats
    if (model.extended()) count += 1;
    ckpt_detail::write_u32(out, count);
    for (const auto& [name, p] : params) ckpt_detail::write_tensor(out, name, p);
    for (std::size_t i = 0; i < opt_state.m.size(); ++i) {
        Tensor<T> m({static_cast<Index>(opt_state.m[i].size())}, opt_state.m[i]);
        ckpt_detail::write_tensor(out, "opt/m/" + params[i].first, m);
        Tensor<T> v({static_cast<Index>(opt_state.v[i].size())}, opt_state.v[i]);
        ckpt_detail::write_tensor(out, "opt/v/" + params[i].first, v);
    }
    ckpt_detail::write_tensor(out, "stats/pitch_mean", Tensor<T>::scalar(model.pitch_stats().mean));
    ckpt_detail::write_tensor(out, "stats/pitch_std", Tensor<T>::scalar(model.pitch_stats().stddev));
    if (model.extended()) ckpt_detail::write_tensor(out, "lm_table/matrix", model.lm_table().matrix);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MTCK", 4) != 0) throw DataError("bad checkpoint magic: " + path);
    CheckpointData data;
    data.version = ckpt_detail::read_u32(in, path);
    if (data.version != 1)
        throw DataError("unsupported checkpoint version " + std::to_string(data.version) + ": " + path);
    data.step = ckpt_detail::read_u64(in, path);
    data.seed = ckpt_detail::read_u64(in, path);
    data.config_text = ckpt_detail::read_string(in, path);
    const std::string vocab_blob = ckpt_detail::read_string(in, path);
    if (!vocab_blob.empty()) {
        std::istringstream vb(vocab_blob);
        std::string tok;
        while (std::getline(vb, tok))
            if (!tok.empty()) data.lm_tokens.push_back(tok);
    }
    const std::uint32_t count = ckpt_detail::read_u32(in, path);
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::string name = ckpt_detail::read_string(in, path);
        const std::uint32_t rank = ckpt_detail::read_u32(in, path);
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i)
            shape.push_back(static_cast<Index>(ckpt_detail::read_u32(in, path)));
        Tensor<float> t(shape);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
        if (!in) throw DataError("checkpoint truncated in tensor " + name + ": " + path);
        data.entries.emplace(name, std::move(t));
    }
    return data;
}

// Rebuilds config, model, optimizer state and pitch stats from a checkpoint.
template <typename T>
struct RestoredTraining {
    Config cfg;
    MixerTtsModel<T> model;
    LambState<T> opt_state;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
};

template <typename T>
RestoredTraining<T> restore_checkpoint(const std::string& path) {
    CheckpointData data = load_checkpoint(path);
    Config cfg;
    std::istringstream cs(data.config_text);
    parse_config_stream(cfg, cs, path + " (embedded config)");

    FrozenEmbeddingTable<T> table;
    const FrozenEmbeddingTable<T>* table_ptr = nullptr;
    if (cfg.model.extended) {
        auto it = data.entries.find("lm_table/matrix");
        if (it == data.entries.end() || data.lm_tokens.empty())
            throw DataError("extended checkpoint lacks the LM table: " + path);
        table.dim = it->second.dim(1);
        table.matrix = Tensor<T>(it->second.shape());
        for (Index i = 0; i < it->second.numel(); ++i)
            table.matrix.at(i) = static_cast<T>(it->second.at(i));
        table.tokens = data.lm_tokens;
        for (std::size_t i = 0; i < table.tokens.size(); ++i)
            table.vocab[table.tokens[i]] = static_cast<int>(i);
        table_ptr = &table;
    }

    Rng init_rng(data.seed);
    RestoredTraining<T> restored{cfg, MixerTtsModel<T>(cfg, init_rng, table_ptr), {}, data.step,
                                 data.seed};

    auto params = restored.model.parameters();
    restored.opt_state.init_like(params);
    restored.opt_state.step = static_cast<Index>(data.step);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        auto it = data.entries.find(name);
        if (it == data.entries.end()) throw DataError("checkpoint misses tensor " + name + ": " + path);
        require_shape(it->second.numel() == p.numel(),
                      "checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) +
                          ", model expects " + shape_str(p.shape()));
        for (Index j = 0; j < p.numel(); ++j) p.at(j) = static_cast<T>(it->second.at(j));
        auto mit = data.entries.find("opt/m/" + name);
        auto vit = data.entries.find("opt/v/" + name);
        if (mit != data.entries.end() && vit != data.entries.end()) {
            for (Index j = 0; j < p.numel(); ++j) {
                restored.opt_state.m[i][static_cast<std::size_t>(j)] = static_cast<T>(mit->second.at(j));
                restored.opt_state.v[i][static_cast<std::size_t>(j)] = static_cast<T>(vit->second.at(j));
            }
        }
    }
    PitchStats<T> stats;
    if (auto it = data.entries.find("stats/pitch_mean"); it != data.entries.end())
        stats.mean = static_cast<T>(it->second.at(0));
    if (auto it = data.entries.find("stats/pitch_std"); it != data.entries.end())
        stats.stddev = static_cast<T>(it->second.at(0));
    restored.model.set_pitch_stats(stats);
    return restored;
}

}  // namespace mixtts
