#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mixtts/adaptors.hpp"
#include "mixtts/audio.hpp"
#include "mixtts/mixer.hpp"

// Whole-run configuration in one validated record, readable from an INI-style
// file ([section] + key = value), overridable via section.key=value strings,
// and printable back in parseable form.

namespace mixtts {

struct LossWeights {
    double aligner = 1.0;
    double mel = 1.0;
    double durs = 0.1;
    double pitch = 0.1;
};

struct ModelSection {
    Index vocab_size = 49;  // char vocab; override for phoneme ids
    Index feature_dim = 384;
    StackConfig encoder{6, 11, 21, 2};
    StackConfig decoder{9, 15, 31, 2};
    Index expansion = 4;
    double dropout = 0.15;
    Index aligner_dim = 384;
    bool aligner_prior = false;
    double aligner_prior_scale = 1.0;
    bool extended = false;
    std::string lm_table;
    Index lm_max_len = 1024;
};

struct TrainSection {
    Index batch_size = 8;
    Index accum = 2;
    Index steps = 500;
    double base_lr = 0.1;
    Index warmup = 1000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 1e-6;
    double clip_norm = 1000.0;
    std::uint64_t seed = 1234;
    Index checkpoint_interval = 250;
};

struct Config {
    ModelSection model;
    PredictorConfig duration_predictor{384, 256, 3, 2, 0.1};
    PredictorConfig pitch_predictor{384, 256, 3, 2, 0.1};
    MelConfig audio;
    LossWeights loss;
    TrainSection train;

    void validate() const {
        require_config(model.vocab_size > 1, "config: vocab_size must exceed the pad symbol");
        require_config(model.feature_dim > 0, "config: feature_dim must be positive");
        model.encoder.validate();
        model.decoder.validate();
        require_config(model.expansion >= 1, "config: expansion must be >= 1");
        require_config(model.dropout >= 0 && model.dropout < 1, "config: dropout must lie in [0,1)");
        require_config(model.aligner_dim > 0, "config: aligner_dim must be positive");
        if (model.extended) require_config(!model.lm_table.empty(), "config: extended model needs lm_table");
        duration_predictor.validate();
        pitch_predictor.validate();
        audio.validate();
        require_config(train.batch_size >= 1 && train.accum >= 1, "config: batch/accum must be >= 1");
        require_config(train.base_lr > 0 && train.warmup >= 1, "config: lr/warmup must be positive");
    }
};

namespace config_detail {

struct Binding {
    std::string key;  // "section.name"
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

inline Index parse_index(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<Index>(x);
    } catch (const std::exception&) {
        throw ConfigError("config: key " + key + " expects an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key " + key + " expects a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key " + key + " expects a boolean, got '" + v + "'");
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void bind_index(std::vector<Binding>& out, const std::string& key, Index& ref) {
    out.push_back({key, [&ref] { return std::to_string(ref); },
                   [&ref, key](const std::string& v) { ref = parse_index(key, v); }});
}

inline void bind_u64(std::vector<Binding>& out, const std::string& key, std::uint64_t& ref) {
    out.push_back({key, [&ref] { return std::to_string(ref); }, [&ref, key](const std::string& v) {
                       try {
                           ref = std::stoull(v);
                       } catch (const std::exception&) {
                           throw ConfigError("config: key " + key + " expects an unsigned integer");
                       }
                   }});
}

inline void bind_double(std::vector<Binding>& out, const std::string& key, double& ref) {
    out.push_back({key, [&ref] { return format_double(ref); },
                   [&ref, key](const std::string& v) { ref = parse_double(key, v); }});
}

inline void bind_bool(std::vector<Binding>& out, const std::string& key, bool& ref) {
    out.push_back({key, [&ref] { return ref ? std::string("true") : std::string("false"); },
                   [&ref, key](const std::string& v) { ref = parse_bool(key, v); }});
}

inline void bind_string(std::vector<Binding>& out, const std::string& key, std::string& ref) {
    out.push_back({key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }});
}

inline void bind_predictor(std::vector<Binding>& out, const std::string& section,
                           PredictorConfig& p) {
    bind_index(out, section + ".hidden", p.hidden);
    bind_index(out, section + ".kernel", p.kernel);
    bind_index(out, section + ".layers", p.n_layers);
    bind_double(out, section + ".dropout", p.dropout_p);
}

inline std::vector<Binding> bindings(Config& c) {
    std::vector<Binding> out;
    bind_index(out, "model.vocab_size", c.model.vocab_size);
    bind_index(out, "model.feature_dim", c.model.feature_dim);
    bind_index(out, "model.encoder_blocks", c.model.encoder.n_blocks);
    bind_index(out, "model.encoder_kernel_start", c.model.encoder.kernel_start);
    bind_index(out, "model.encoder_kernel_end", c.model.encoder.kernel_end);
    bind_index(out, "model.encoder_kernel_step", c.model.encoder.kernel_step);
    bind_index(out, "model.decoder_blocks", c.model.decoder.n_blocks);
    bind_index(out, "model.decoder_kernel_start", c.model.decoder.kernel_start);
    bind_index(out, "model.decoder_kernel_end", c.model.decoder.kernel_end);
    bind_index(out, "model.decoder_kernel_step", c.model.decoder.kernel_step);
    bind_index(out, "model.expansion", c.model.expansion);
    bind_double(out, "model.dropout", c.model.dropout);
    bind_index(out, "model.aligner_dim", c.model.aligner_dim);
    bind_bool(out, "model.aligner_prior", c.model.aligner_prior);
    bind_double(out, "model.aligner_prior_scale", c.model.aligner_prior_scale);
    bind_bool(out, "model.extended", c.model.extended);
    bind_string(out, "model.lm_table", c.model.lm_table);
    bind_index(out, "model.lm_max_len", c.model.lm_max_len);
    bind_predictor(out, "duration_predictor", c.duration_predictor);
    bind_predictor(out, "pitch_predictor", c.pitch_predictor);
    bind_index(out, "audio.sample_rate", c.audio.sample_rate);
    bind_index(out, "audio.win_length", c.audio.win_length);
    bind_index(out, "audio.hop_length", c.audio.hop_length);
    bind_index(out, "audio.n_fft", c.audio.n_fft);
    bind_index(out, "audio.n_mels", c.audio.n_mels);
    bind_double(out, "audio.fmin", c.audio.fmin);
    bind_double(out, "audio.fmax", c.audio.fmax);
    bind_double(out, "audio.log_floor", c.audio.log_floor);
    bind_double(out, "audio.f0_min", c.audio.f0_min);
    bind_double(out, "audio.f0_max", c.audio.f0_max);
    bind_double(out, "audio.voicing_threshold", c.audio.voicing_threshold);
    bind_double(out, "loss.w_aligner", c.loss.aligner);
    bind_double(out, "loss.w_mel", c.loss.mel);
    bind_double(out, "loss.w_durs", c.loss.durs);
    bind_double(out, "loss.w_pitch", c.loss.pitch);
    bind_index(out, "train.batch_size", c.train.batch_size);
    bind_index(out, "train.accum", c.train.accum);
    bind_index(out, "train.steps", c.train.steps);
    bind_double(out, "train.base_lr", c.train.base_lr);
    bind_index(out, "train.warmup", c.train.warmup);
    bind_double(out, "train.beta1", c.train.beta1);
    bind_double(out, "train.beta2", c.train.beta2);
    bind_double(out, "train.eps", c.train.eps);
    bind_double(out, "train.weight_decay", c.train.weight_decay);
    bind_double(out, "train.clip_norm", c.train.clip_norm);
    bind_u64(out, "train.seed", c.train.seed);
    bind_index(out, "train.checkpoint_interval", c.train.checkpoint_interval);
    return out;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace config_detail

inline void apply_config_override(Config& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config override must look like section.key=value, got '" + assignment + "'");
    const std::string key = config_detail::trim(assignment.substr(0, eq));
    const std::string value = config_detail::trim(assignment.substr(eq + 1));
    auto binds = config_detail::bindings(cfg);
    for (auto& b : binds)
        if (b.key == key) {
            b.set(value);
            return;
        }
    throw ConfigError("config: unknown key '" + key + "'");
}

inline void parse_config_stream(Config& cfg, std::istream& in, const std::string& origin) {
    auto binds = config_detail::bindings(cfg);
    std::string line, section;
    Index line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = config_detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + " line " + std::to_string(line_no) + ": expected key = value");
        const std::string key =
            (section.empty() ? "" : section + ".") + config_detail::trim(line.substr(0, eq));
        const std::string value = config_detail::trim(line.substr(eq + 1));
        bool found = false;
        for (auto& b : binds)
            if (b.key == key) {
                b.set(value);
                found = true;
                break;
            }
        if (!found)
            throw ConfigError(origin + " line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
}

inline Config load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    Config cfg;
    parse_config_stream(cfg, in, path);
    return cfg;
}

inline std::string dump_config(Config& cfg) {
    auto binds = config_detail::bindings(cfg);
    std::ostringstream out;
    std::string section;
    for (auto& b : binds) {
        const auto dot = b.key.find('.');
        const std::string sec = b.key.substr(0, dot);
        const std::string name = b.key.substr(dot + 1);
        if (sec != section) {
            if (!section.empty()) out << '\n';
            out << '[' << sec << "]\n";
            section = sec;
        }
        out << name << " = " << b.get() << '\n';
    }
    return out.str();
}

}  // namespace mixtts
